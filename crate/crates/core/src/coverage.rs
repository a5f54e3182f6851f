//! Adaptive coverage of a parameter grid by convergence regions.
//!
//! The sweep repeatedly picks a uniformly random uncovered grid point
//! (seeded RNG), computes the steady state and a correction grid there,
//! and flood-fills outward over grid neighbors as long as the full-space
//! residual stays below tolerance. Points where the expansion fails stop
//! the region and are retried under later base points; a point only fails
//! the sweep if it cannot be solved as its own base. For the multipoint
//! strategy, each region's basis additionally pools the correction grids
//! of the two nearest previously computed base points (Euclidean distance
//! in axis-normalized units).

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{
    build_recycled_space, recycled_solve, IterativeSettings, Precond, PrecondSpec, RecycledSpace,
};
use crate::lindblad::{steady_state_lu, trace_modify, DensityVector, ParameterizedLiouvillian};
use crate::perturbation::{
    build_basis, pt_corrections_grid, standard_pt_eval, vpt_solve, CorrectionGrid, PerturbationBasis, VptSolution,
};
use crate::sparse::SparseMatrix;
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(rename = "lu")]
    LuOnly,
    Pt,
    Vpt,
    #[serde(rename = "mvpt")]
    MVpt,
    Krylov,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::LuOnly => "lu",
            Strategy::Pt => "pt",
            Strategy::Vpt => "vpt",
            Strategy::MVpt => "mvpt",
            Strategy::Krylov => "krylov",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lu" | "lu-only" | "luonly" => Ok(Strategy::LuOnly),
            "pt" => Ok(Strategy::Pt),
            "vpt" => Ok(Strategy::Vpt),
            "mvpt" | "m-vpt" => Ok(Strategy::MVpt),
            "krylov" => Ok(Strategy::Krylov),
            other => Err(Error::InvalidParameter(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn value(&self, index: usize) -> f64 {
        self.min + (self.max - self.min) * index as f64 / (self.count - 1) as f64
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPlan {
    pub axes: Vec<AxisSpec>,
    pub strategy: Strategy,
    /// per-axis correction orders
    pub orders: Vec<usize>,
    pub tolerance: f64,
    pub rng_seed: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::InvalidParameter("sweep needs at least one axis".into()));
        }
        for ax in &self.axes {
            if ax.count < 2 {
                return Err(Error::InvalidParameter(format!("axis '{}' needs at least 2 points", ax.name)));
            }
            if !(ax.max > ax.min) {
                return Err(Error::InvalidParameter(format!("axis '{}' has empty range", ax.name)));
            }
        }
        if self.tolerance <= 0.0 {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        if self.orders.len() != self.axes.len() {
            return Err(Error::InvalidParameter("one correction order per axis required".into()));
        }
        Ok(())
    }

    pub fn total_points(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn params_of(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut out = vec![0.0; self.axes.len()];
        for (k, ax) in self.axes.iter().enumerate().rev() {
            out[k] = ax.value(rem % ax.count);
            rem /= ax.count;
        }
        out
    }

    pub fn indices_of(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        let mut out = vec![0usize; self.axes.len()];
        for (k, ax) in self.axes.iter().enumerate().rev() {
            out[k] = rem % ax.count;
            rem /= ax.count;
        }
        out
    }

    pub fn flat_of(&self, indices: &[usize]) -> usize {
        let mut flat = 0usize;
        for (k, ax) in self.axes.iter().enumerate() {
            flat = flat * ax.count + indices[k].min(ax.count - 1);
        }
        let _ = self;
        flat
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.step()).product()
    }

    fn neighbors(&self, flat: usize, out: &mut Vec<usize>) {
        out.clear();
        let idx = self.indices_of(flat);
        for k in 0..self.axes.len() {
            if idx[k] > 0 {
                let mut n = idx.clone();
                n[k] -= 1;
                out.push(self.flat_of(&n));
            }
            if idx[k] + 1 < self.axes[k].count {
                let mut n = idx.clone();
                n[k] += 1;
                out.push(self.flat_of(&n));
            }
        }
    }
}

/// Set of grid points covered by one base point's expansion.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRegion {
    pub base_index: usize,
    pub covered: Vec<usize>,
    pub residuals: Vec<f64>,
    pub basis_size: usize,
}

#[derive(Debug, Clone)]
pub struct PointData {
    pub params: Vec<f64>,
    pub observables: Vec<C64>,
    pub residual: f64,
    pub base_id: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CoverTimings {
    pub factorization_ms: f64,
    pub corrections_ms: f64,
    pub evaluation_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub model_hash: String,
    pub seed: u64,
    pub tolerance: f64,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct PhaseDiagram {
    pub plan: SweepPlan,
    pub observable_names: Vec<String>,
    pub points: Vec<PointData>,
    pub base_point_indices: Vec<usize>,
    pub provenance: Provenance,
    pub timings: CoverTimings,
}

/// FNV-1a 64-bit hash, used for deterministic provenance stamps.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

enum RegionBasis {
    LuOnly,
    Pt(CorrectionGrid),
    Vpt(PerturbationBasis),
    Krylov(Box<RecycledSpace>),
}

struct BaseRecord {
    flat: usize,
    point: Vec<f64>,
    grid: Option<CorrectionGrid>,
}

/// Run the adaptive coverage loop.
///
/// `family`'s directions must line up with `plan.axes`. Observables are
/// evaluated at every covered point from the perturbative state. With
/// `threads > 1` the frontier evaluations of each flood-fill wave run in a
/// rayon pool; results are committed in deterministic order either way.
pub fn cover(
    plan: &SweepPlan,
    family: &ParameterizedLiouvillian,
    observables: &[(String, SparseMatrix)],
    model_hash: &str,
    threads: usize,
) -> Result<(PhaseDiagram, Vec<ConvergenceRegion>)> {
    plan.validate()?;
    if family.directions().len() != plan.axes.len() {
        return Err(Error::DimensionMismatch(format!(
            "family has {} directions, plan has {} axes",
            family.directions().len(),
            plan.axes.len()
        )));
    }
    let t_start = Instant::now();
    let mut timings = CoverTimings::default();
    let total = plan.total_points();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.rng_seed);
    let mut assigned: Vec<Option<(usize, f64, DensityVector)>> = (0..total).map(|_| None).collect();
    let mut uncovered: Vec<usize> = (0..total).collect();
    let mut uncovered_pos: Vec<usize> = (0..total).collect();
    let mut regions: Vec<ConvergenceRegion> = Vec::new();
    let mut base_records: Vec<BaseRecord> = Vec::new();
    let mut neighbor_buf = Vec::new();
    let settings = IterativeSettings::default();
    let axis_spans: Vec<f64> = plan.axes.iter().map(|a| a.max - a.min).collect();

    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let remove_uncovered = |flat: usize, uncovered: &mut Vec<usize>, pos: &mut Vec<usize>| {
        let p = pos[flat];
        if p == usize::MAX {
            return;
        }
        let last = *uncovered.last().unwrap();
        uncovered.swap_remove(p);
        pos[flat] = usize::MAX;
        if last != flat {
            pos[last] = p;
        }
    };

    while !uncovered.is_empty() {
        let pick = rng.gen_range(0..uncovered.len());
        let base_flat = uncovered[pick];
        let base_point = plan.params_of(base_flat);
        let base_id = regions.len();

        // base solve (the expensive step)
        let t0 = Instant::now();
        let fam_b = family.rebase(&base_point);
        let sys = trace_modify(fam_b.base(), C64::new(1.0, 0.0));
        let ilu_precond = if plan.strategy == Strategy::Krylov {
            Some(Precond::build(&sys.matrix, PrecondSpec::Ilu { drop_tolerance: 1e-4, fill_factor: 10.0 })?)
        } else {
            None
        };
        let (rho0, lu) = match plan.strategy {
            Strategy::Krylov => {
                // iterative base solve, warm-started from the nearest
                // previously computed base state when available
                let precond = ilu_precond.as_ref().unwrap();
                let x0: Option<Vec<C64>> = nearest_base_state(&base_records, &assigned, &base_point, &axis_spans);
                let mut s = settings;
                s.tolerance = (0.1 * plan.tolerance).clamp(1e-13, 1e-8);
                let r = crate::krylov::gmres_solve(&sys.matrix, &sys.rhs, x0.as_deref(), &s, precond)?;
                if !r.converged {
                    return Err(Error::NonConvergentPoint {
                        index: plan.indices_of(base_flat),
                        detail: format!("iterative base solve stalled at residual {:.3e}", r.residual_history.last().unwrap()),
                    });
                }
                let d = (fam_b.dim() as f64).sqrt().round() as usize;
                let mut data = r.x;
                let tr = DensityVector::new(data.clone(), d)?.trace();
                if tr.norm() < 1e-12 {
                    return Err(Error::NonConvergentPoint {
                        index: plan.indices_of(base_flat),
                        detail: "iterative base state has vanishing trace".into(),
                    });
                }
                crate::vecops::scale(C64::new(1.0, 0.0) / tr, &mut data);
                (DensityVector::new(data, d)?, None)
            }
            _ => match steady_state_lu(&sys) {
                Ok((rho, f)) => (rho, Some(f)),
                Err(e) => {
                    return Err(Error::NonConvergentPoint {
                        index: plan.indices_of(base_flat),
                        detail: e.to_string(),
                    })
                }
            },
        };
        timings.factorization_ms += t0.elapsed().as_secs_f64() * 1e3;

        // corrections and basis
        let t1 = Instant::now();
        let region_basis = match plan.strategy {
            Strategy::LuOnly => RegionBasis::LuOnly,
            Strategy::Pt | Strategy::Vpt | Strategy::MVpt => {
                let f = lu.as_ref().expect("LU path");
                let grid = pt_corrections_grid(f, &sys.matrix, &rho0, fam_b.directions(), &plan.orders, &base_point)?;
                match plan.strategy {
                    Strategy::Pt => RegionBasis::Pt(grid),
                    Strategy::Vpt => {
                        let basis = build_basis(&[&grid], fam_b.base(), fam_b.directions(), C64::new(1.0, 0.0))?;
                        base_records.push(BaseRecord { flat: base_flat, point: base_point.clone(), grid: Some(grid) });
                        RegionBasis::Vpt(basis)
                    }
                    Strategy::MVpt => {
                        // pool the two nearest previous base grids
                        let mut order: Vec<usize> = (0..base_records.len()).collect();
                        order.sort_by(|&i, &j| {
                            normalized_distance(&base_records[i].point, &base_point, &axis_spans)
                                .total_cmp(&normalized_distance(&base_records[j].point, &base_point, &axis_spans))
                        });
                        let mut grids: Vec<&CorrectionGrid> = vec![&grid];
                        for &i in order.iter().take(2) {
                            if let Some(g) = &base_records[i].grid {
                                grids.push(g);
                            }
                        }
                        let basis = build_basis(&grids, fam_b.base(), fam_b.directions(), C64::new(1.0, 0.0))?;
                        base_records.push(BaseRecord { flat: base_flat, point: base_point.clone(), grid: Some(grid) });
                        RegionBasis::Vpt(basis)
                    }
                    _ => unreachable!(),
                }
            }
            Strategy::Krylov => {
                let rec = build_recycled_space(
                    ilu_precond.unwrap(),
                    &rho0,
                    fam_b.base(),
                    fam_b.directions(),
                    &plan.orders,
                    C64::new(1.0, 0.0),
                    &base_point,
                )?;
                base_records.push(BaseRecord { flat: base_flat, point: base_point.clone(), grid: None });
                RegionBasis::Krylov(Box::new(rec))
            }
        };
        if matches!(plan.strategy, Strategy::Pt | Strategy::LuOnly) {
            base_records.push(BaseRecord {
                flat: base_flat,
                point: base_point.clone(),
                grid: match &region_basis {
                    RegionBasis::Pt(g) => Some(g.clone()),
                    _ => None,
                },
            });
        }
        timings.corrections_ms += t1.elapsed().as_secs_f64() * 1e3;

        // flood fill
        let t2 = Instant::now();
        let base_residual = fam_b.residual_norm(&vec![0.0; plan.axes.len()], &rho0.data);
        let mut region = ConvergenceRegion {
            base_index: base_flat,
            covered: vec![base_flat],
            residuals: vec![base_residual],
            basis_size: match &region_basis {
                RegionBasis::LuOnly => 1,
                RegionBasis::Pt(g) => g.len(),
                RegionBasis::Vpt(b) => b.len(),
                RegionBasis::Krylov(r) => r.basis.len(),
            },
        };
        assigned[base_flat] = Some((base_id, base_residual, rho0.clone()));
        remove_uncovered(base_flat, &mut uncovered, &mut uncovered_pos);

        if !matches!(region_basis, RegionBasis::LuOnly) {
            let mut frontier: VecDeque<usize> = VecDeque::new();
            let mut queued = vec![false; total];
            plan.neighbors(base_flat, &mut neighbor_buf);
            for &n in &neighbor_buf {
                if assigned[n].is_none() && !queued[n] {
                    queued[n] = true;
                    frontier.push_back(n);
                }
            }
            let mut abort_region = false;
            while !frontier.is_empty() && !abort_region {
                // evaluate one wave
                let wave: Vec<usize> = frontier.drain(..).collect();
                let eval = |&flat: &usize| -> (usize, Option<VptSolution>, Option<usize>) {
                    let params = plan.params_of(flat);
                    let eps: Vec<f64> = params.iter().zip(&base_point).map(|(p, b)| p - b).collect();
                    match &region_basis {
                        RegionBasis::Pt(grid) => {
                            let sol = standard_pt_eval(grid, &fam_b, &eps, plan.tolerance);
                            (flat, Some(sol), None)
                        }
                        RegionBasis::Vpt(basis) => {
                            let sol = vpt_solve(basis, &fam_b, &eps, plan.tolerance);
                            (flat, Some(sol), None)
                        }
                        RegionBasis::Krylov(rec) => {
                            match recycled_solve(rec, &fam_b, &eps, plan.tolerance, &settings) {
                                Ok(out) => (flat, Some(out.solution), out.fallback_iterations),
                                Err(_) => (flat, None, None),
                            }
                        }
                        RegionBasis::LuOnly => unreachable!(),
                    }
                };
                let results: Vec<(usize, Option<VptSolution>, Option<usize>)> = match &pool {
                    Some(p) => p.install(|| {
                        use rayon::prelude::*;
                        wave.par_iter().map(eval).collect()
                    }),
                    None => wave.iter().map(eval).collect(),
                };
                for (flat, sol, fallback) in results {
                    if abort_region {
                        break;
                    }
                    let converged = sol.as_ref().map(|s| s.converged).unwrap_or(false);
                    if converged {
                        let sol = sol.unwrap();
                        if assigned[flat].is_none() {
                            assigned[flat] = Some((base_id, sol.residual, sol.state));
                            remove_uncovered(flat, &mut uncovered, &mut uncovered_pos);
                            region.covered.push(flat);
                            region.residuals.push(sol.residual);
                            plan.neighbors(flat, &mut neighbor_buf);
                            for &n in &neighbor_buf {
                                if assigned[n].is_none() && !queued[n] {
                                    queued[n] = true;
                                    frontier.push_back(n);
                                }
                            }
                        }
                        // the warm-start tradeoff: a heavy fallback means the
                        // recycled space has drifted; stop growing and re-base
                        if let Some(iters) = fallback {
                            if iters > settings.max_iterations / 4 {
                                abort_region = true;
                            }
                        }
                    }
                }
            }
        }
        timings.evaluation_ms += t2.elapsed().as_secs_f64() * 1e3;
        regions.push(region);
    }

    // assemble the diagram
    let mut points = Vec::with_capacity(total);
    for flat in 0..total {
        let (base_id, residual, state) = assigned[flat].as_ref().expect("full coverage");
        let obs: Vec<C64> = observables
            .iter()
            .map(|(_, op)| crate::lindblad::expectation(state, op))
            .collect::<Result<_>>()?;
        points.push(PointData {
            params: plan.params_of(flat),
            observables: obs,
            residual: *residual,
            base_id: *base_id,
        });
    }
    timings.total_ms = t_start.elapsed().as_secs_f64() * 1e3;
    let diagram = PhaseDiagram {
        plan: plan.clone(),
        observable_names: observables.iter().map(|(n, _)| n.clone()).collect(),
        points,
        base_point_indices: regions.iter().map(|r| r.base_index).collect(),
        provenance: Provenance {
            model_hash: model_hash.to_string(),
            seed: plan.rng_seed,
            tolerance: plan.tolerance,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        timings,
    };
    Ok((diagram, regions))
}

/// Grow a single convergence region from a prescribed base point,
/// independent of any global coverage state; returns the region together
/// with the converged states (offsets relative to the base point). Used by
/// the region-size and SVD-optimality analyses.
pub fn single_region(
    plan: &SweepPlan,
    family: &ParameterizedLiouvillian,
    base_flat: usize,
) -> Result<(ConvergenceRegion, Vec<(Vec<f64>, DensityVector)>)> {
    plan.validate()?;
    let base_point = plan.params_of(base_flat);
    let fam_b = family.rebase(&base_point);
    let sys = trace_modify(fam_b.base(), C64::new(1.0, 0.0));
    let (rho0, lu) = steady_state_lu(&sys).map_err(|e| Error::NonConvergentPoint {
        index: plan.indices_of(base_flat),
        detail: e.to_string(),
    })?;
    let grid = pt_corrections_grid(&lu, &sys.matrix, &rho0, fam_b.directions(), &plan.orders, &base_point)?;
    let use_vpt = matches!(plan.strategy, Strategy::Vpt | Strategy::MVpt | Strategy::Krylov);
    let basis = if use_vpt {
        Some(build_basis(&[&grid], fam_b.base(), fam_b.directions(), C64::new(1.0, 0.0))?)
    } else {
        None
    };
    let zeros = vec![0.0; plan.axes.len()];
    let mut region = ConvergenceRegion {
        base_index: base_flat,
        covered: vec![base_flat],
        residuals: vec![fam_b.residual_norm(&zeros, &rho0.data)],
        basis_size: basis.as_ref().map(|b| b.len()).unwrap_or(grid.len()),
    };
    let mut states = vec![(zeros, rho0)];
    let total = plan.total_points();
    let mut in_region = vec![false; total];
    in_region[base_flat] = true;
    let mut queued = vec![false; total];
    let mut frontier = VecDeque::new();
    let mut nbuf = Vec::new();
    plan.neighbors(base_flat, &mut nbuf);
    for &n in &nbuf {
        queued[n] = true;
        frontier.push_back(n);
    }
    while let Some(flat) = frontier.pop_front() {
        let params = plan.params_of(flat);
        let eps: Vec<f64> = params.iter().zip(&base_point).map(|(p, b)| p - b).collect();
        let sol = match &basis {
            Some(b) => vpt_solve(b, &fam_b, &eps, plan.tolerance),
            None => standard_pt_eval(&grid, &fam_b, &eps, plan.tolerance),
        };
        if sol.converged {
            in_region[flat] = true;
            region.covered.push(flat);
            region.residuals.push(sol.residual);
            states.push((eps, sol.state));
            plan.neighbors(flat, &mut nbuf);
            for &n in &nbuf {
                if !queued[n] && !in_region[n] {
                    queued[n] = true;
                    frontier.push_back(n);
                }
            }
        }
    }
    Ok((region, states))
}

fn normalized_distance(a: &[f64], b: &[f64], spans: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(spans)
        .map(|((x, y), s)| ((x - y) / s).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn nearest_base_state(
    records: &[BaseRecord],
    assigned: &[Option<(usize, f64, DensityVector)>],
    point: &[f64],
    spans: &[f64],
) -> Option<Vec<C64>> {
    records
        .iter()
        .min_by(|a, b| {
            normalized_distance(&a.point, point, spans).total_cmp(&normalized_distance(&b.point, point, spans))
        })
        .and_then(|r| assigned[r.flat].as_ref())
        .map(|(_, _, state)| state.data.clone())
}

// ---------------------------------------------------------------------------
// Region statistics and SVD rank analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RegionStat {
    pub base_index: usize,
    pub point_count: usize,
    /// point count times grid cell volume
    pub area: f64,
    pub basis_size: usize,
}

pub fn region_stats(regions: &[ConvergenceRegion], plan: &SweepPlan) -> Vec<RegionStat> {
    let cell = plan.cell_volume();
    regions
        .iter()
        .map(|r| RegionStat {
            base_index: r.base_index,
            point_count: r.covered.len(),
            area: r.covered.len() as f64 * cell,
            basis_size: r.basis_size,
        })
        .collect()
}

/// Smallest truncated-SVD rank whose reconstruction of every provided
/// state keeps the full-space residual `|L(eps) rho|` at or below
/// `target_accuracy`. States are trace-normalized after reconstruction.
pub fn svd_optimal_rank(
    states: &[(Vec<f64>, DensityVector)],
    family: &ParameterizedLiouvillian,
    target_accuracy: f64,
) -> Result<usize> {
    if states.is_empty() {
        return Err(Error::EmptyInput("svd_optimal_rank: no states".into()));
    }
    let n = states[0].1.len();
    let p = states.len();
    let mut stacked = nalgebra::DMatrix::<C64>::zeros(n, p);
    for (j, (_, s)) in states.iter().enumerate() {
        for (i, v) in s.data.iter().enumerate() {
            stacked[(i, j)] = *v;
        }
    }
    let svd = crate::dense::dense_svd(&stacked);
    let rank = svd.rank(1e-14).max(1);
    // coefficients of every state in the left singular basis
    let coeffs = svd.u.ad_mul(&stacked);
    let d_hilbert = states[0].1.hilbert_dim;

    let ok_at = |k: usize| -> bool {
        for (j, (eps, _)) in states.iter().enumerate() {
            let mut recon = vec![C64::new(0.0, 0.0); n];
            for col in 0..k {
                let c = coeffs[(col, j)];
                if c == C64::new(0.0, 0.0) {
                    continue;
                }
                for (i, u) in svd.u.column(col).iter().enumerate() {
                    recon[i] += u * c;
                }
            }
            let dv = DensityVector::new(recon, d_hilbert).expect("dims");
            let tr = dv.trace();
            if tr.norm() < 1e-12 {
                return false;
            }
            let mut data = dv.data;
            crate::vecops::scale(C64::new(1.0, 0.0) / tr, &mut data);
            if family.residual_norm(eps, &data) > target_accuracy {
                return false;
            }
        }
        true
    };
    if !ok_at(rank) {
        // even the full rank misses the target; report it anyway
        return Ok(rank);
    }
    let (mut lo, mut hi) = (1usize, rank);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if ok_at(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    // guard against non-monotone residuals near the boundary
    while lo > 1 && ok_at(lo - 1) {
        lo -= 1;
    }
    Ok(lo)
}

// ---------------------------------------------------------------------------
// CSV / JSON artifacts
// ---------------------------------------------------------------------------

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// One row per grid point: axis values, observable re/im pairs, residual,
/// base-point id, strategy. Provenance rides in `#` comment lines.
pub fn write_phase_csv<W: Write>(diagram: &PhaseDiagram, w: &mut W) -> Result<()> {
    writeln!(w, "# model_hash: {}", diagram.provenance.model_hash)?;
    writeln!(w, "# seed: {}", diagram.provenance.seed)?;
    writeln!(w, "# version: {}", diagram.provenance.version)?;
    writeln!(w, "# tolerance: {}", format_float(diagram.provenance.tolerance))?;
    let mut header: Vec<String> = diagram.plan.axes.iter().map(|a| a.name.clone()).collect();
    for name in &diagram.observable_names {
        header.push(format!("{name}_re"));
        header.push(format!("{name}_im"));
    }
    header.push("residual".into());
    header.push("base_id".into());
    header.push("strategy".into());
    writeln!(w, "{}", header.join(","))?;
    for p in &diagram.points {
        let mut fields: Vec<String> = p.params.iter().map(|v| format_float(*v)).collect();
        for o in &p.observables {
            fields.push(format_float(o.re));
            fields.push(format_float(o.im));
        }
        fields.push(format_float(p.residual));
        fields.push(p.base_id.to_string());
        fields.push(diagram.plan.strategy.name().to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Sidecar metadata: plan, seed, base points, region sizes, timings.
pub fn sidecar_json(diagram: &PhaseDiagram, regions: &[ConvergenceRegion]) -> serde_json::Value {
    let stats = region_stats(regions, &diagram.plan);
    serde_json::json!({
        "plan": diagram.plan,
        "seed": diagram.provenance.seed,
        "model_hash": diagram.provenance.model_hash,
        "version": diagram.provenance.version,
        "base_points": diagram.base_point_indices.iter().map(|&flat| {
            serde_json::json!({
                "flat_index": flat,
                "params": diagram.plan.params_of(flat),
            })
        }).collect::<Vec<_>>(),
        "region_sizes": regions.iter().map(|r| r.covered.len()).collect::<Vec<_>>(),
        "region_stats": stats,
        "timings_ms": diagram.timings,
    })
}
