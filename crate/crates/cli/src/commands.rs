//! Command implementations: sweep, fit, generate-data, svd-analysis, bench.

use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use vpt_core::coverage::{
    cover, fnv1a64, format_float, sidecar_json, single_region, svd_optimal_rank, write_phase_csv, SweepPlan,
};
use vpt_core::gradfit::{
    add_complex_noise, fit, model_curve, EstimatorKind, FitProblem, FitSettings, ObservableKind, Unknown,
};
use vpt_core::krylov::{sector_sweep, symmetric_sector_reduce};
use vpt_core::models::annihilation;
use vpt_core::sparse::SparseMatrix;
use vpt_core::C64;

use crate::config::{
    parse_strategy, resolve_model, resolve_observables, restrict_family, FitConfig, GenerateConfig, ResolvedModel,
    RunConfig,
};

pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub tolerance: Option<f64>,
    pub threads: usize,
}

fn config_hashes(config_text: &str, config: &RunConfig) -> (String, String) {
    let whole = format!("{:016x}", fnv1a64(config_text.as_bytes()));
    let model_json = serde_json::to_string(&serde_json::json!({
        "name": config.model.name,
        "params": config.model.params,
    }))
    .unwrap_or_default();
    let model = format!("{:016x}", fnv1a64(model_json.as_bytes()));
    (whole, model)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_sweep(config: &RunConfig, config_text: &str, out: &Path, ov: &Overrides) -> Result<()> {
    let sweep = config.sweep.as_ref().ok_or_else(|| anyhow!("config has no \"sweep\" section"))?;
    let resolved = resolve_model(&config.model)?;
    let strategy = parse_strategy(ov.strategy.as_deref().unwrap_or(&sweep.strategy))?;
    let plan = SweepPlan {
        axes: sweep.axes.iter().map(|a| a.to_spec()).collect(),
        strategy,
        orders: sweep.orders.clone(),
        tolerance: ov.tolerance.unwrap_or(sweep.tolerance),
        rng_seed: ov.seed.unwrap_or(config.seed),
    };
    let (whole_hash, model_hash) = config_hashes(config_text, config);
    let obs_names: Vec<String> = if config.observables.is_empty() {
        resolved.built.observables.iter().map(|(n, _)| n.clone()).collect()
    } else {
        config.observables.clone()
    };
    let observables = resolve_observables(&resolved.built, &obs_names)?;

    let (diagram, regions) = if sweep.sector {
        run_sector_sweep(&resolved, &plan, &observables, &model_hash)?
    } else {
        let axis_names: Vec<String> = plan.axes.iter().map(|a| a.name.clone()).collect();
        let family = restrict_family(&resolved.built, &axis_names)?;
        cover(&plan, &family, &observables, &model_hash, ov.threads)?
    };

    let mut csv = Vec::new();
    write_phase_csv(&diagram, &mut csv)?;
    write_file(&out.join("sweep.csv"), &csv)?;
    let mut sidecar = sidecar_json(&diagram, &regions);
    sidecar["config_hash"] = serde_json::json!(whole_hash);
    write_file(&out.join("sweep.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    eprintln!(
        "sweep: {} points, {} base points, strategy {}, wrote {}",
        diagram.points.len(),
        diagram.base_point_indices.len(),
        plan.strategy.name(),
        out.join("sweep.csv").display()
    );
    Ok(())
}

fn run_sector_sweep(
    resolved: &ResolvedModel,
    plan: &SweepPlan,
    observables: &[(String, SparseMatrix)],
    model_hash: &str,
) -> Result<(vpt_core::coverage::PhaseDiagram, Vec<vpt_core::coverage::ConvergenceRegion>)> {
    if resolved.built.symmetries.is_empty() {
        bail!("sector sweep requires a model with symmetry superoperators (xyz with periodic boundaries)");
    }
    let syms: Vec<SparseMatrix> = resolved.built.symmetries.iter().map(|(_, s)| s.clone()).collect();
    let red = symmetric_sector_reduce(resolved.built.family.base(), &syms)?;
    eprintln!(
        "sector reduction: full dimension {} -> sector dimension {} (group order {})",
        resolved.built.family.base().nrows(),
        red.sector_dim(),
        red.group_order
    );
    let mut dir_blocks = Vec::with_capacity(plan.axes.len());
    let mut anchor = Vec::with_capacity(plan.axes.len());
    for ax in &plan.axes {
        let idx = resolved.built.direction_index(&ax.name)?;
        dir_blocks.push(red.project_matrix(&resolved.built.family.directions()[idx])?);
        anchor.push(resolved.built.family.base_point()[idx]);
    }
    Ok(sector_sweep(&red, &dir_blocks, plan, &anchor, observables, model_hash)?)
}

fn build_fit_observable(
    resolved: &ResolvedModel,
    name: &str,
    unknowns: &[Unknown],
) -> Result<ObservableKind> {
    if name == "s21" {
        let p = resolved
            .cat_params
            .as_ref()
            .ok_or_else(|| anyhow!("observable 's21' is only defined for the cat2mode model"))?;
        let b_op = SparseMatrix::identity(p.n_a).kron(&annihilation(p.n_b));
        let drive_unknown = unknowns.iter().position(|u| u.name == "drive");
        return Ok(ObservableKind::S21 {
            b_op,
            kappa_b: p.kappa_b,
            drive_unknown,
            fixed_drive: p.drive,
        });
    }
    Ok(ObservableKind::Expectation(resolved.built.observable(name)?.clone()))
}

fn build_fit_problem(
    config: &RunConfig,
    fc: &FitConfig,
    dataset: Vec<C64>,
    ov: &Overrides,
) -> Result<(FitProblem, ResolvedModel)> {
    let resolved = resolve_model(&config.model)?;
    let unknowns: Vec<Unknown> = fc
        .unknowns
        .iter()
        .map(|u| Unknown { name: u.name.clone(), init: u.init, lower: u.lower, upper: u.upper })
        .collect();
    let mut names: Vec<String> = fc.axes.iter().map(|a| a.name.clone()).collect();
    names.extend(unknowns.iter().map(|u| u.name.clone()));
    let family = restrict_family(&resolved.built, &names)?;
    let observable = build_fit_observable(&resolved, &fc.observable, &unknowns)?;
    let problem = FitProblem {
        family,
        theta_axes: fc.axes.iter().map(|a| a.to_spec()).collect(),
        unknowns,
        dataset,
        observable,
        orders: fc.orders.clone(),
        tolerance: ov.tolerance.unwrap_or(fc.tolerance),
    };
    Ok((problem, resolved))
}

pub fn cmd_fit(config: &RunConfig, config_text: &str, out: &Path, ov: &Overrides) -> Result<()> {
    let fc = config.fit.as_ref().ok_or_else(|| anyhow!("config has no \"fit\" section"))?;
    let dataset = read_dataset_csv(Path::new(&fc.dataset), &fc.axes.iter().map(|a| a.to_spec()).collect::<Vec<_>>())?;
    let (problem, _resolved) = build_fit_problem(config, fc, dataset, ov)?;
    let estimator = match fc.estimator.as_str() {
        "reduced" | "reduced-equation" => EstimatorKind::ReducedEquation,
        "fixed" | "fixed-coefficients" => EstimatorKind::FixedCoefficients,
        other => bail!("unknown estimator '{other}'"),
    };
    let settings = FitSettings { max_iterations: fc.max_iterations, estimator, ..Default::default() };
    let outcome = fit(&problem, &settings)?;
    let (whole_hash, _) = config_hashes(config_text, config);

    let trace_json = serde_json::json!({
        "config_hash": whole_hash,
        "seed": ov.seed.unwrap_or(config.seed),
        "version": env!("CARGO_PKG_VERSION"),
        "estimator": fc.estimator,
        "converged": outcome.converged,
        "hit_max_iterations": outcome.hit_max_iterations,
        "best_cost": outcome.best_cost,
        "best_phi": problem.unknowns.iter().zip(&outcome.best_phi)
            .map(|(u, v)| serde_json::json!({"name": u.name, "value": v}))
            .collect::<Vec<_>>(),
        "iterations": outcome.trace.iter().map(|it| serde_json::json!({
            "iteration": it.iteration,
            "phi": it.phi,
            "cost": it.cost,
            "gradient_norm": it.gradient_norm,
        })).collect::<Vec<_>>(),
    });
    write_file(&out.join("fit_trace.json"), serde_json::to_string_pretty(&trace_json)?.as_bytes())?;

    // model-vs-data comparison at the optimum
    let model = model_curve(&problem, &outcome.best_phi)?;
    let mut csv = Vec::new();
    writeln!(csv, "# config_hash: {whole_hash}")?;
    writeln!(csv, "# seed: {}", ov.seed.unwrap_or(config.seed))?;
    writeln!(csv, "# version: {}", env!("CARGO_PKG_VERSION"))?;
    let mut header: Vec<String> = problem.theta_axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["data_re", "data_im", "model_re", "model_im"].map(String::from));
    writeln!(csv, "{}", header.join(","))?;
    for flat in 0..problem.grid_len() {
        let theta = problem.theta_of(flat);
        let mut fields: Vec<String> = theta.iter().map(|v| format_float(*v)).collect();
        fields.push(format_float(problem.dataset[flat].re));
        fields.push(format_float(problem.dataset[flat].im));
        fields.push(format_float(model[flat].re));
        fields.push(format_float(model[flat].im));
        writeln!(csv, "{}", fields.join(","))?;
    }
    write_file(&out.join("fit_result.csv"), &csv)?;
    eprintln!(
        "fit: best cost {:.6e} after {} iterations (converged: {}), wrote {}",
        outcome.best_cost,
        outcome.trace.len() - 1,
        outcome.converged,
        out.join("fit_trace.json").display()
    );
    if outcome.hit_max_iterations && !outcome.converged {
        bail!("fit exceeded the iteration budget (best-so-far written)");
    }
    Ok(())
}

pub fn cmd_generate_data(config: &RunConfig, config_text: &str, out: &Path, ov: &Overrides) -> Result<()> {
    let gc = config.generate.as_ref().ok_or_else(|| anyhow!("config has no \"generate\" section"))?;
    let resolved = resolve_model(&config.model)?;
    let names: Vec<String> = gc.axes.iter().map(|a| a.name.clone()).collect();
    let family = restrict_family(&resolved.built, &names)?;
    let observable = build_fit_observable(&resolved, &gc.observable, &[])?;
    let axes: Vec<_> = gc.axes.iter().map(|a| a.to_spec()).collect();
    let grid_len: usize = axes.iter().map(|a| a.count).product();
    let problem = FitProblem {
        family,
        theta_axes: axes,
        unknowns: vec![],
        dataset: vec![C64::new(0.0, 0.0); grid_len],
        observable,
        orders: gc.orders.clone(),
        tolerance: ov.tolerance.unwrap_or(gc.tolerance),
    };
    let mut values = model_curve(&problem, &[])?;
    let seed = ov.seed.unwrap_or(config.seed);
    if gc.noise_sigma > 0.0 {
        add_complex_noise(&mut values, gc.noise_sigma, seed);
    }
    let (whole_hash, _) = config_hashes(config_text, config);
    let mut csv = Vec::new();
    writeln!(csv, "# config_hash: {whole_hash}")?;
    writeln!(csv, "# seed: {seed}")?;
    writeln!(csv, "# version: {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(csv, "# noise_sigma: {}", format_float(gc.noise_sigma))?;
    let mut header: Vec<String> = problem.theta_axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["value_re", "value_im"].map(String::from));
    writeln!(csv, "{}", header.join(","))?;
    for flat in 0..problem.grid_len() {
        let theta = problem.theta_of(flat);
        let mut fields: Vec<String> = theta.iter().map(|v| format_float(*v)).collect();
        fields.push(format_float(values[flat].re));
        fields.push(format_float(values[flat].im));
        writeln!(csv, "{}", fields.join(","))?;
    }
    write_file(&out.join("dataset.csv"), &csv)?;
    eprintln!("generate-data: {} points, sigma {}, wrote {}", grid_len, gc.noise_sigma, out.join("dataset.csv").display());
    Ok(())
}

pub fn cmd_svd_analysis(config: &RunConfig, config_text: &str, out: &Path, ov: &Overrides) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let sc = config.svd.as_ref().ok_or_else(|| anyhow!("config has no \"svd\" section"))?;
    let resolved = resolve_model(&config.model)?;
    let axis_names: Vec<String> = sc.axes.iter().map(|a| a.name.clone()).collect();
    let family = restrict_family(&resolved.built, &axis_names)?;
    let seed = ov.seed.unwrap_or(config.seed);
    let (whole_hash, _) = config_hashes(config_text, config);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut csv = Vec::new();
    writeln!(csv, "# config_hash: {whole_hash}")?;
    writeln!(csv, "# seed: {seed}")?;
    writeln!(csv, "# version: {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(csv, "sample,base_flat,orders,basis_vectors,region_points,m_svd,compression_ratio")?;
    let d = sc.axes.len();
    let total: usize = sc.axes.iter().map(|a| a.count).product();
    for sample in 0..sc.samples {
        let base_flat = rng.gen_range(0..total);
        for orders in &sc.orders_list {
            if orders.len() != d {
                bail!("orders_list entries must have one order per axis");
            }
            let plan = SweepPlan {
                axes: sc.axes.iter().map(|a| a.to_spec()).collect(),
                strategy: vpt_core::coverage::Strategy::Vpt,
                orders: orders.clone(),
                tolerance: sc.tolerance,
                rng_seed: seed,
            };
            let base_point = plan.params_of(base_flat);
            let fam_b = family.rebase(&base_point);
            let (region, states) = single_region(&plan, &family, base_flat)?;
            let m_svd = svd_optimal_rank(&states, &fam_b, sc.tolerance)?;
            let vectors: usize = orders.iter().map(|m| m + 1).product();
            writeln!(
                csv,
                "{sample},{base_flat},{},{},{},{m_svd},{}",
                orders.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("x"),
                region.basis_size,
                region.covered.len(),
                format_float(vectors as f64 / m_svd as f64)
            )?;
        }
    }
    write_file(&out.join("svd_analysis.csv"), &csv)?;
    eprintln!("svd-analysis: {} samples, wrote {}", sc.samples, out.join("svd_analysis.csv").display());
    Ok(())
}

pub fn cmd_bench(config: &RunConfig, config_text: &str, out: &Path, ov: &Overrides) -> Result<()> {
    let bc = config.bench.as_ref().ok_or_else(|| anyhow!("config has no \"bench\" section"))?;
    let resolved = resolve_model(&config.model)?;
    let axis_names: Vec<String> = bc.axes.iter().map(|a| a.name.clone()).collect();
    let family = restrict_family(&resolved.built, &axis_names)?;
    let obs_names: Vec<String> = if config.observables.is_empty() {
        resolved.built.observables.iter().map(|(n, _)| n.clone()).collect()
    } else {
        config.observables.clone()
    };
    let observables = resolve_observables(&resolved.built, &obs_names)?;
    let (whole_hash, model_hash) = config_hashes(config_text, config);
    let seed = ov.seed.unwrap_or(config.seed);
    let mut csv = Vec::new();
    writeln!(csv, "# config_hash: {whole_hash}")?;
    writeln!(csv, "# seed: {seed}")?;
    writeln!(csv, "# version: {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(csv, "strategy,base_points,covered_points,factorization_ms,corrections_ms,evaluation_ms,total_ms")?;
    for name in &bc.strategies {
        let strategy = parse_strategy(name)?;
        let plan = SweepPlan {
            axes: bc.axes.iter().map(|a| a.to_spec()).collect(),
            strategy,
            orders: bc.orders.clone(),
            tolerance: ov.tolerance.unwrap_or(bc.tolerance),
            rng_seed: seed,
        };
        let (diagram, _regions) = cover(&plan, &family, &observables, &model_hash, ov.threads)?;
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            strategy.name(),
            diagram.base_point_indices.len(),
            diagram.points.len(),
            format_float(diagram.timings.factorization_ms),
            format_float(diagram.timings.corrections_ms),
            format_float(diagram.timings.evaluation_ms),
            format_float(diagram.timings.total_ms),
        )?;
        eprintln!(
            "bench {}: {} base points, {:.1} ms total",
            strategy.name(),
            diagram.base_point_indices.len(),
            diagram.timings.total_ms
        );
    }
    write_file(&out.join("bench.csv"), &csv)?;
    Ok(())
}

/// Read a dataset CSV produced by `generate-data` (or hand-prepared with
/// the same layout): `#` comments, a header with the axis names followed
/// by `value_re,value_im`, and rows in grid order.
pub fn read_dataset_csv(path: &Path, axes: &[vpt_core::coverage::AxisSpec]) -> Result<Vec<C64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read dataset {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| anyhow!("dataset {} is empty", path.display()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let re_col = cols
        .iter()
        .position(|c| *c == "value_re")
        .ok_or_else(|| anyhow!("dataset header lacks a 'value_re' column"))?;
    let im_col = cols
        .iter()
        .position(|c| *c == "value_im")
        .ok_or_else(|| anyhow!("dataset header lacks a 'value_im' column"))?;
    let axis_cols: Vec<usize> = axes
        .iter()
        .map(|a| {
            cols.iter()
                .position(|c| *c == a.name)
                .ok_or_else(|| anyhow!("dataset header lacks axis column '{}'", a.name))
        })
        .collect::<Result<_>>()?;
    let expected: usize = axes.iter().map(|a| a.count).product();
    let mut out = Vec::with_capacity(expected);
    for (row_idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |k: usize| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| anyhow!("dataset row {} is short", row_idx + 1))?
                .parse::<f64>()
                .map_err(|e| anyhow!("dataset row {}: {e}", row_idx + 1))
        };
        // validate the grid ordering
        let mut rem = row_idx;
        for (k, ax) in axes.iter().enumerate().rev() {
            let expected_val = ax.value(rem % ax.count);
            rem /= ax.count;
            let got = parse(axis_cols[k])?;
            let scale = (ax.max - ax.min).abs().max(1.0);
            if (got - expected_val).abs() > 1e-9 * scale {
                bail!(
                    "dataset row {} axis '{}' is {} but the grid expects {}",
                    row_idx + 1,
                    ax.name,
                    got,
                    expected_val
                );
            }
        }
        out.push(C64::new(parse(re_col)?, parse(im_col)?));
    }
    if out.len() != expected {
        bail!("dataset has {} rows, the axis grid needs {expected}", out.len());
    }
    Ok(out)
}
