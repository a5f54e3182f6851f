//! Run configuration: JSON schema, validation, and model resolution.

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use vpt_core::coverage::{AxisSpec, Strategy};
use vpt_core::lindblad::{parameterize, DirectionDelta, LindbladModel, ParameterizedLiouvillian};
use vpt_core::models::{self, BuiltModel, CatParams, KerrParams, XYZParams};
use vpt_core::sparse::SparseMatrix;
use vpt_core::symbolic::{ModeSpec, OperatorContext};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub observables: Vec<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub sweep: Option<SweepConfig>,
    pub fit: Option<FitConfig>,
    pub generate: Option<GenerateConfig>,
    pub svd: Option<SvdConfig>,
    pub bench: Option<BenchConfig>,
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
    /// custom-model fields
    #[serde(default)]
    pub modes: Vec<ModeConfig>,
    pub hamiltonian: Option<String>,
    #[serde(default)]
    pub jumps: Vec<JumpConfig>,
    #[serde(default)]
    pub directions: Vec<CustomDirection>,
    #[serde(default)]
    pub custom_observables: Vec<CustomObservable>,
}

#[derive(Debug, Deserialize)]
pub struct ModeConfig {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Deserialize)]
pub struct JumpConfig {
    pub op: String,
    pub rate: f64,
}

#[derive(Debug, Deserialize)]
pub struct CustomDirection {
    pub name: String,
    pub hamiltonian: String,
    /// current (anchor) value of the parameter multiplying this direction
    #[serde(default)]
    pub value: f64,
}

#[derive(Debug, Deserialize)]
pub struct CustomObservable {
    pub name: String,
    pub expr: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axes: Vec<AxisConfig>,
    pub strategy: String,
    pub orders: Vec<usize>,
    pub tolerance: f64,
    /// for lattice models: sweep on the symmetry-reduced block
    #[serde(default)]
    pub sector: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AxisConfig {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisConfig {
    pub fn to_spec(&self) -> AxisSpec {
        AxisSpec { name: self.name.clone(), min: self.min, max: self.max, count: self.count }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub dataset: String,
    pub observable: String,
    pub axes: Vec<AxisConfig>,
    pub unknowns: Vec<UnknownConfig>,
    pub orders: Vec<usize>,
    #[serde(default = "default_fit_tol")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_estimator")]
    pub estimator: String,
}

fn default_fit_tol() -> f64 {
    1e-8
}

fn default_max_iterations() -> usize {
    30
}

fn default_estimator() -> String {
    "reduced".into()
}

#[derive(Debug, Deserialize)]
pub struct UnknownConfig {
    pub name: String,
    pub init: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub axes: Vec<AxisConfig>,
    pub observable: String,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    pub orders: Vec<usize>,
    #[serde(default = "default_generate_tol")]
    pub tolerance: f64,
}

fn default_sigma() -> f64 {
    0.02
}

fn default_generate_tol() -> f64 {
    1e-9
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvdConfig {
    pub axes: Vec<AxisConfig>,
    pub orders_list: Vec<Vec<usize>>,
    pub samples: usize,
    pub tolerance: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub axes: Vec<AxisConfig>,
    pub orders: Vec<usize>,
    pub tolerance: f64,
    pub strategies: Vec<String>,
}

/// A resolved model: superoperator family with named directions plus
/// observables, and the original typed parameters where applicable.
pub struct ResolvedModel {
    pub built: BuiltModel,
    pub cat_params: Option<CatParams>,
}

pub fn load_config(path: &std::path::Path) -> Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
        anyhow!("config validation failed at {} line {} column {}: {e}", path.display(), e.line(), e.column())
    })?;
    Ok((config, text))
}

fn param_f64(params: &serde_json::Value, key: &str) -> Result<f64> {
    params
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| anyhow!("model parameter '{key}' missing or not a number"))
}

fn param_usize(params: &serde_json::Value, key: &str) -> Result<usize> {
    params
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| anyhow!("model parameter '{key}' missing or not a positive integer"))
}

fn param_bool_or(params: &serde_json::Value, key: &str, default: bool) -> bool {
    params.get(key).and_then(|v| v.as_bool()).unwrap_or(default)
}

pub fn resolve_model(mc: &ModelConfig) -> Result<ResolvedModel> {
    match mc.name.as_str() {
        "kerr" => {
            let p = KerrParams {
                delta: param_f64(&mc.params, "delta")?,
                kerr: param_f64(&mc.params, "kerr")?,
                drive: param_f64(&mc.params, "drive")?,
                kappa: param_f64(&mc.params, "kappa")?,
                n_max: param_usize(&mc.params, "n_max")?,
            };
            Ok(ResolvedModel { built: models::kerr_model(&p)?, cat_params: None })
        }
        "cat2mode" => {
            let p = CatParams {
                delta_a: param_f64(&mc.params, "delta_a")?,
                delta_b: param_f64(&mc.params, "delta_b")?,
                g2: param_f64(&mc.params, "g2")?,
                drive: param_f64(&mc.params, "drive")?,
                kerr_a: param_f64(&mc.params, "kerr_a")?,
                kerr_b: param_f64(&mc.params, "kerr_b")?,
                cross_kerr: param_f64(&mc.params, "cross_kerr")?,
                kappa_a: param_f64(&mc.params, "kappa_a")?,
                kappa_b: param_f64(&mc.params, "kappa_b")?,
                n_a: param_usize(&mc.params, "n_a")?,
                n_b: param_usize(&mc.params, "n_b")?,
            };
            Ok(ResolvedModel { built: models::cat_model(&p)?, cat_params: Some(p) })
        }
        "xyz" => {
            let p = XYZParams {
                lx: param_usize(&mc.params, "lx")?,
                ly: param_usize(&mc.params, "ly")?,
                periodic_x: param_bool_or(&mc.params, "periodic_x", true),
                periodic_y: param_bool_or(&mc.params, "periodic_y", true),
                jx: param_f64(&mc.params, "jx")?,
                jy: param_f64(&mc.params, "jy")?,
                jz: param_f64(&mc.params, "jz")?,
                gamma: param_f64(&mc.params, "gamma")?,
            };
            let cap = mc
                .params
                .get("spin_cap")
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .unwrap_or(models::DEFAULT_SPIN_CAP);
            Ok(ResolvedModel { built: models::xyz_model_with_cap(&p, cap)?, cat_params: None })
        }
        "custom" => resolve_custom(mc),
        other => bail!("unknown model '{other}' (expected kerr, cat2mode, xyz, or custom)"),
    }
}

fn resolve_custom(mc: &ModelConfig) -> Result<ResolvedModel> {
    if mc.modes.is_empty() {
        bail!("custom model requires at least one mode");
    }
    let ctx = OperatorContext::new(
        mc.modes.iter().map(|m| ModeSpec { name: m.name.clone(), dim: m.dim }).collect(),
    )?;
    let h_text = mc.hamiltonian.as_deref().ok_or_else(|| anyhow!("custom model requires a hamiltonian"))?;
    let h = ctx.parse_operator(h_text).with_context(|| format!("hamiltonian '{h_text}'"))?;
    let jumps: Vec<(SparseMatrix, f64)> = mc
        .jumps
        .iter()
        .map(|j| Ok((ctx.parse_operator(&j.op).with_context(|| format!("jump '{}'", j.op))?, j.rate)))
        .collect::<Result<_>>()?;
    let model = LindbladModel::new(h, jumps)?;
    let mut deltas = Vec::new();
    let mut names = Vec::new();
    let mut anchor = Vec::new();
    for dir in &mc.directions {
        let hd = ctx
            .parse_operator(&dir.hamiltonian)
            .with_context(|| format!("direction '{}' expression", dir.name))?;
        deltas.push(DirectionDelta::from_hamiltonian(hd));
        names.push(dir.name.clone());
        anchor.push(dir.value);
    }
    let family: ParameterizedLiouvillian = parameterize(&model, &deltas, anchor)?;
    let observables = mc
        .custom_observables
        .iter()
        .map(|o| Ok((o.name.clone(), ctx.parse_operator(&o.expr).with_context(|| format!("observable '{}'", o.name))?)))
        .collect::<Result<Vec<_>>>()?;
    let mode_dims = mc.modes.iter().map(|m| m.dim).collect();
    Ok(ResolvedModel {
        built: BuiltModel {
            model,
            family,
            direction_names: names,
            observables,
            mode_dims,
            symmetries: vec![],
        },
        cat_params: None,
    })
}

/// Family restricted to the named directions, in the given order.
pub fn restrict_family(built: &BuiltModel, names: &[String]) -> Result<ParameterizedLiouvillian> {
    let mut dirs = Vec::with_capacity(names.len());
    let mut anchor = Vec::with_capacity(names.len());
    for name in names {
        let idx = built.direction_index(name)?;
        dirs.push(built.family.directions()[idx].clone());
        anchor.push(built.family.base_point()[idx]);
    }
    Ok(ParameterizedLiouvillian::new(built.family.base().clone(), dirs, anchor)?)
}

pub fn resolve_observables(
    built: &BuiltModel,
    names: &[String],
) -> Result<Vec<(String, SparseMatrix)>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), built.observable(n)?.clone())))
        .collect()
}

pub fn parse_strategy(text: &str) -> Result<Strategy> {
    Ok(text.parse::<Strategy>()?)
}
