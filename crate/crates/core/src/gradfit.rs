//! Steady-state parameter estimation from measured observables.
//!
//! The fit minimizes `C(phi) = sum_theta |<o>(phi, theta) - o_exp(theta)|^2`
//! over unknown generator parameters `phi`, with the controllable
//! parameters `theta` scanned on a measurement grid. States across the grid
//! come from variational perturbation theory; the gradient of each state
//! with respect to an unknown comes from one of two estimators:
//!
//! - fixed-coefficients: the ansatz coefficients are frozen while the
//!   corrections acquire one extra order in the unknown's direction;
//! - reduced-equation (default): the derivative solves the reduced system
//!   `Ltilde_eff(eps) dq = -L2_eff q` in the basis pooled from the
//!   `(n,0)` and `(n,1)` correction layers.
//!
//! Optimization is a bounded quasi-Newton (L-BFGS) loop with a Wolfe line
//! search and projection onto the box constraints.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coverage::AxisSpec;
use crate::dense::small_dense_solve;
use crate::error::{Error, Result};
use crate::lindblad::{expectation, steady_state_lu, trace_modify, DensityVector, ParameterizedLiouvillian};
use crate::lu::LUFactorization;
use crate::models::s21_from_b_expectation;
use crate::ortho::orthonormalize_tracked;
use crate::perturbation::{
    build_basis_from_orthonormal, pt_corrections_grid, vpt_solve, CorrectionGrid, PerturbationBasis, VptSolution,
    BASIS_DEDUP_TOL,
};
use crate::sparse::SparseMatrix;
use crate::vecops;
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    FixedCoefficients,
    ReducedEquation,
}

/// An unknown parameter with box bounds.
#[derive(Debug, Clone)]
pub struct Unknown {
    pub name: String,
    pub init: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Unknown {
    fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite()) {
            return Err(Error::InvalidParameter(format!("unknown '{}' needs finite bounds", self.name)));
        }
        if self.lower > self.upper || self.init < self.lower || self.init > self.upper {
            return Err(Error::InvalidParameter(format!("unknown '{}' has inconsistent bounds", self.name)));
        }
        Ok(())
    }
}

/// How measured values derive from the steady state.
#[derive(Debug, Clone)]
pub enum ObservableKind {
    Expectation(SparseMatrix),
    /// `S21 = 1 - i kappa_b <b> / F`; the drive may itself be one of the
    /// unknowns, in which case its explicit derivative is included.
    S21 { b_op: SparseMatrix, kappa_b: f64, drive_unknown: Option<usize>, fixed_drive: f64 },
}

impl ObservableKind {
    fn value(&self, state: &DensityVector, phi: &[f64]) -> Result<C64> {
        match self {
            ObservableKind::Expectation(op) => expectation(state, op),
            ObservableKind::S21 { b_op, kappa_b, drive_unknown, fixed_drive } => {
                let drive = drive_unknown.map(|k| phi[k]).unwrap_or(*fixed_drive);
                if drive == 0.0 {
                    return Err(Error::ZeroDrive);
                }
                Ok(s21_from_b_expectation(expectation(state, b_op)?, *kappa_b, drive))
            }
        }
    }

    fn derivative(
        &self,
        state: &DensityVector,
        state_derivative: &DensityVector,
        phi: &[f64],
        unknown: usize,
    ) -> Result<C64> {
        match self {
            ObservableKind::Expectation(op) => expectation(state_derivative, op),
            ObservableKind::S21 { b_op, kappa_b, drive_unknown, fixed_drive } => {
                let drive = drive_unknown.map(|k| phi[k]).unwrap_or(*fixed_drive);
                if drive == 0.0 {
                    return Err(Error::ZeroDrive);
                }
                let minus_i_kb = C64::new(0.0, -kappa_b);
                let mut d = minus_i_kb * expectation(state_derivative, b_op)? / C64::new(drive, 0.0);
                if Some(unknown) == *drive_unknown {
                    d += C64::new(0.0, *kappa_b) * expectation(state, b_op)? / C64::new(drive * drive, 0.0);
                }
                Ok(d)
            }
        }
    }
}

/// Correction grids carrying one extra order in each unknown direction:
/// the base grid holds the `(n, 0)` layer over the controllable axes, and
/// `layers[k]` the `(n, 1)` layer of unknown `k`.
#[derive(Debug, Clone)]
pub struct DeltaGrids {
    pub base: CorrectionGrid,
    pub layers: Vec<Vec<DensityVector>>,
}

/// Extend a base-point factorization with the delta layers of every
/// unknown direction.
pub fn delta_grids(
    f: &LUFactorization,
    ltilde0: &SparseMatrix,
    rho0: &DensityVector,
    theta_dirs: &[SparseMatrix],
    orders: &[usize],
    phi_dirs: &[SparseMatrix],
    base_point: &[f64],
) -> Result<DeltaGrids> {
    let base = pt_corrections_grid(f, ltilde0, rho0, theta_dirs, orders, base_point)?;
    let n = rho0.len();
    let d_hilbert = rho0.hilbert_dim;
    let base_norm = rho0.norm();
    let rbar: Vec<C64> = rho0.data.iter().map(|v| v / C64::new(base_norm, 0.0)).collect();
    let shape: Vec<usize> = orders.iter().map(|m| m + 1).collect();
    let mut strides = vec![0usize; shape.len()];
    let mut total = 1usize;
    for k in (0..shape.len()).rev() {
        strides[k] = total;
        total *= shape[k];
    }
    let mut layers = Vec::with_capacity(phi_dirs.len());
    for phi_dir in phi_dirs {
        let mut layer: Vec<DensityVector> = Vec::with_capacity(total);
        for flat in 0..total {
            // Ltilde0 sigma = -( sum_j L1j layer[flat - e_j] + L2 base[flat] )
            let mut rhs = vec![C64::new(0.0, 0.0); n];
            let mut rem = flat;
            for (k, s) in strides.iter().enumerate() {
                let nk = rem / s;
                rem %= s;
                if nk > 0 {
                    theta_dirs[k].matvec_acc(C64::new(-1.0, 0.0), &layer[flat - s].data, &mut rhs);
                }
            }
            phi_dir.matvec_acc(C64::new(-1.0, 0.0), &base.get(&base_multi(flat, &strides, &shape)).data, &mut rhs);
            let sigma = f.solve_refined(ltilde0, &rhs)?;
            let overlap = vecops::dot(&rbar, &sigma);
            let mut data = sigma;
            vecops::axpy(-overlap, &rbar, &mut data);
            layer.push(DensityVector::new(data, d_hilbert)?);
        }
        layers.push(layer);
    }
    Ok(DeltaGrids { base, layers })
}

fn base_multi(mut flat: usize, strides: &[usize], shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for (k, s) in strides.iter().enumerate() {
        idx[k] = flat / s;
        flat %= s;
    }
    idx
}

/// Union basis over the `(n,0)` grid and every `(n,1)` layer; directions
/// are the controllable ones followed by the unknowns.
pub fn build_union_basis(
    grids: &DeltaGrids,
    l0: &SparseMatrix,
    all_dirs: &[SparseMatrix],
    b: C64,
) -> Result<PerturbationBasis> {
    let mut inputs: Vec<Vec<C64>> = grids.base.iter().map(|c| c.data.clone()).collect();
    for layer in &grids.layers {
        inputs.extend(layer.iter().map(|c| c.data.clone()));
    }
    let input_count = inputs.len();
    let (q, ortho) = orthonormalize_tracked(&inputs, BASIS_DEDUP_TOL)?;
    Ok(build_basis_from_orthonormal(
        q,
        ortho,
        l0,
        all_dirs,
        b,
        vec![grids.base.base_point().to_vec()],
        input_count,
    ))
}

/// Fixed-coefficients estimator: with the ansatz coefficients `c_n` frozen,
/// the derivative of the unit-trace state along unknown `k` is
/// `(sum_n c_n rho^(n,1))/N - (d_delta N / N) rho`, where
/// `d_delta N = Tr[sum_n c_n rho^(n,1)]`.
pub fn state_derivative_fixed(
    grids: &DeltaGrids,
    unknown: usize,
    coeffs: &[C64],
    normalizer: C64,
    state: &DensityVector,
) -> Result<DensityVector> {
    let layer = grids
        .layers
        .get(unknown)
        .ok_or_else(|| Error::MissingDeltaGrid(format!("unknown index {unknown}")))?;
    if coeffs.len() != layer.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients vs {} delta-layer vectors",
            coeffs.len(),
            layer.len()
        )));
    }
    let n = state.len();
    let mut weighted = vec![C64::new(0.0, 0.0); n];
    for (c, corr) in coeffs.iter().zip(layer) {
        if *c != C64::new(0.0, 0.0) {
            vecops::axpy(*c, &corr.data, &mut weighted);
        }
    }
    let weighted_dv = DensityVector::new(weighted, state.hilbert_dim)?;
    let dn = weighted_dv.trace();
    let inv_n = C64::new(1.0, 0.0) / normalizer;
    let mut data = weighted_dv.data;
    vecops::scale(inv_n, &mut data);
    vecops::axpy(-dn * inv_n, &state.data, &mut data);
    Ok(DensityVector::new(data, state.hilbert_dim)?)
}

/// Reduced-equation estimator: solve
/// `Ltilde_eff(eps) dq = -L2_eff q` on the union basis and return the
/// derivative of the unit-trace state.
pub fn state_derivative_reduced(
    basis: &PerturbationBasis,
    eps: &[f64],
    delta_dir: usize,
    solution: &VptSolution,
) -> Result<DensityVector> {
    if delta_dir >= basis.direction_count() {
        return Err(Error::MissingDeltaGrid(format!("direction index {delta_dir}")));
    }
    let m = basis.assemble(eps);
    let q = DVector::from_column_slice(&solution.coefficients);
    let rhs = -(basis.reduced_direction(delta_dir) * &q);
    let sol = small_dense_solve(&m, &rhs);
    if sol.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::ReducedSystemSingular);
    }
    let dq: Vec<C64> = sol.x.iter().copied().collect();
    let n_tr = solution.normalizer;
    if n_tr.norm() < 1e-12 {
        return Err(Error::ReducedSystemSingular);
    }
    let dn = basis.trace_of_coefficients(&dq);
    let inv_n = C64::new(1.0, 0.0) / n_tr;
    let mut data = basis.basis().combine(&dq);
    vecops::scale(inv_n, &mut data);
    vecops::axpy(-(dn * inv_n), &solution.state.data, &mut data);
    Ok(DensityVector::new(data, solution.state.hilbert_dim)?)
}

// ---------------------------------------------------------------------------
// Fit problem and cost evaluation
// ---------------------------------------------------------------------------

/// Observable model, measurement grid, dataset, and unknowns.
///
/// The family's directions must be the controllable axes followed by the
/// unknowns, all affine.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub family: ParameterizedLiouvillian,
    pub theta_axes: Vec<AxisSpec>,
    pub unknowns: Vec<Unknown>,
    pub dataset: Vec<C64>,
    pub observable: ObservableKind,
    /// per-axis correction orders for the theta grid
    pub orders: Vec<usize>,
    /// residual tolerance a state must meet to enter the cost
    pub tolerance: f64,
}

impl FitProblem {
    pub fn validate(&self) -> Result<()> {
        let n_theta = self.theta_axes.len();
        let n_phi = self.unknowns.len();
        if self.family.directions().len() != n_theta + n_phi {
            return Err(Error::DimensionMismatch(format!(
                "family has {} directions; need {} axes + {} unknowns",
                self.family.directions().len(),
                n_theta,
                n_phi
            )));
        }
        let expected: usize = self.theta_axes.iter().map(|a| a.count).product();
        if self.dataset.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} entries, grid has {expected}",
                self.dataset.len()
            )));
        }
        if self.orders.len() != n_theta {
            return Err(Error::InvalidParameter("one correction order per controllable axis".into()));
        }
        for u in &self.unknowns {
            u.validate()?;
        }
        if self.tolerance <= 0.0 {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        self.theta_axes.iter().map(|a| a.count).product()
    }

    pub fn theta_of(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut out = vec![0.0; self.theta_axes.len()];
        for (k, ax) in self.theta_axes.iter().enumerate().rev() {
            out[k] = ax.value(rem % ax.count);
            rem /= ax.count;
        }
        out
    }
}

struct CachedBase {
    theta: Vec<f64>,
    phi: Vec<f64>,
    family: ParameterizedLiouvillian,
    union_basis: PerturbationBasis,
    /// controllable-axes family and basis only, used by the
    /// fixed-coefficients estimator (its coefficients pair the theta-grid
    /// corrections with their delta layers one-to-one)
    family_theta: ParameterizedLiouvillian,
    theta_basis: PerturbationBasis,
    grids: DeltaGrids,
}

/// Reusable state across cost evaluations: bases survive as long as their
/// residual certificates keep passing at the new parameters.
#[derive(Default)]
pub struct FitCache {
    bases: Vec<CachedBase>,
}

impl FitCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn base_count(&self) -> usize {
        self.bases.len()
    }
}

pub struct CostEval {
    pub cost: f64,
    pub gradient: Vec<f64>,
    /// false when some grid point failed even from a fresh base; the cost
    /// is then infinite and the gradient zero
    pub full_coverage: bool,
    pub model_values: Vec<C64>,
}

/// Per-unknown partial derivatives plus bookkeeping.
pub struct GradientReport {
    pub partials: Vec<f64>,
    pub estimator: EstimatorKind,
    /// per grid point, per unknown (on request)
    pub state_derivatives: Option<Vec<Vec<DensityVector>>>,
}

fn make_base(problem: &FitProblem, theta: &[f64], phi: &[f64]) -> Result<CachedBase> {
    let n_theta = problem.theta_axes.len();
    let mut anchor = theta.to_vec();
    anchor.extend_from_slice(phi);
    let fam = problem.family.rebase(&anchor);
    let sys = trace_modify(fam.base(), C64::new(1.0, 0.0));
    let (rho0, f) = steady_state_lu(&sys)?;
    let theta_dirs = &fam.directions()[..n_theta];
    let phi_dirs = &fam.directions()[n_theta..];
    let grids = delta_grids(&f, &sys.matrix, &rho0, theta_dirs, &problem.orders, phi_dirs, &anchor)?;
    let union_basis = build_union_basis(&grids, fam.base(), fam.directions(), C64::new(1.0, 0.0))?;
    let family_theta =
        ParameterizedLiouvillian::new(fam.base().clone(), theta_dirs.to_vec(), theta.to_vec())?;
    let theta_basis = crate::perturbation::build_basis(
        &[&grids.base],
        family_theta.base(),
        family_theta.directions(),
        C64::new(1.0, 0.0),
    )?;
    Ok(CachedBase {
        theta: theta.to_vec(),
        phi: phi.to_vec(),
        family: fam,
        union_basis,
        family_theta,
        theta_basis,
        grids,
    })
}

fn solve_point(
    problem: &FitProblem,
    cache: &mut FitCache,
    theta: &[f64],
    phi: &[f64],
) -> Result<Option<(usize, VptSolution)>> {
    // nearest cached base first
    let mut order: Vec<usize> = (0..cache.bases.len()).collect();
    order.sort_by(|&i, &j| {
        let di: f64 = cache.bases[i].theta.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
        let dj: f64 = cache.bases[j].theta.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
        di.total_cmp(&dj)
    });
    for i in order {
        let base = &cache.bases[i];
        let eps: Vec<f64> = theta
            .iter()
            .zip(&base.theta)
            .map(|(t, b)| t - b)
            .chain(phi.iter().zip(&base.phi).map(|(p, b)| p - b))
            .collect();
        let sol = vpt_solve(&base.union_basis, &base.family, &eps, problem.tolerance);
        if sol.converged {
            return Ok(Some((i, sol)));
        }
    }
    // re-baseline here (fresh factorization at the current phi)
    match make_base(problem, theta, phi) {
        Ok(base) => {
            cache.bases.push(base);
            let i = cache.bases.len() - 1;
            let eps = vec![0.0; problem.family.directions().len()];
            let sol = vpt_solve(&cache.bases[i].union_basis, &cache.bases[i].family, &eps, problem.tolerance);
            if sol.converged {
                Ok(Some((i, sol)))
            } else {
                Ok(None)
            }
        }
        Err(Error::SingularMatrix(_)) | Err(Error::DivergingCorrections(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Cost and gradient at `phi` with the default (reduced-equation)
/// estimator. A coverage failure is reported as infinite cost with a zero
/// gradient rather than an error.
pub fn cost_and_gradient(problem: &FitProblem, phi: &[f64], cache: &mut FitCache) -> Result<CostEval> {
    cost_and_gradient_with(problem, phi, cache, EstimatorKind::ReducedEquation, false)
        .map(|(eval, _)| eval)
}

pub fn cost_gradient_report(
    problem: &FitProblem,
    phi: &[f64],
    cache: &mut FitCache,
    estimator: EstimatorKind,
    want_state_derivatives: bool,
) -> Result<(CostEval, GradientReport)> {
    cost_and_gradient_with(problem, phi, cache, estimator, want_state_derivatives)
}

fn cost_and_gradient_with(
    problem: &FitProblem,
    phi: &[f64],
    cache: &mut FitCache,
    estimator: EstimatorKind,
    want_state_derivatives: bool,
) -> Result<(CostEval, GradientReport)> {
    problem.validate()?;
    let n_theta = problem.theta_axes.len();
    let n_phi = problem.unknowns.len();
    let mut cost = 0.0;
    let mut gradient = vec![0.0; n_phi];
    let mut model_values = Vec::with_capacity(problem.grid_len());
    let mut derivatives_log = if want_state_derivatives { Some(Vec::new()) } else { None };

    for flat in 0..problem.grid_len() {
        let theta = problem.theta_of(flat);
        let solved = solve_point(problem, cache, &theta, phi)?;
        let Some((base_idx, sol)) = solved else {
            return Ok((
                CostEval {
                    cost: f64::INFINITY,
                    gradient: vec![0.0; n_phi],
                    full_coverage: false,
                    model_values,
                },
                GradientReport { partials: vec![0.0; n_phi], estimator, state_derivatives: None },
            ));
        };
        let value = problem.observable.value(&sol.state, phi)?;
        model_values.push(value);
        let diff = value - problem.dataset[flat];
        cost += diff.norm_sqr();

        // the fixed-coefficients estimator needs a base anchored at the
        // current phi (its delta must be zero); re-baseline once if needed
        let eval_idx = match estimator {
            EstimatorKind::ReducedEquation => base_idx,
            EstimatorKind::FixedCoefficients => {
                if phi.iter().zip(&cache.bases[base_idx].phi).any(|(a, b)| a != b) {
                    let fresh = make_base(problem, &theta, phi)?;
                    cache.bases.push(fresh);
                    cache.bases.len() - 1
                } else {
                    base_idx
                }
            }
        };
        let mut here = Vec::with_capacity(n_phi);
        match estimator {
            EstimatorKind::ReducedEquation => {
                let base = &cache.bases[eval_idx];
                for k in 0..n_phi {
                    let ds = state_derivative_reduced(&base.union_basis, &sol.epsilon, n_theta + k, &sol)?;
                    let d_obs = problem.observable.derivative(&sol.state, &ds, phi, k)?;
                    gradient[k] += 2.0 * (diff.conj() * d_obs).re;
                    if want_state_derivatives {
                        here.push(ds);
                    }
                }
            }
            EstimatorKind::FixedCoefficients => {
                // Galerkin solve restricted to the theta-grid span, whose
                // coefficients pair with the delta layers order by order.
                // The theta slice has a smaller validity radius than the
                // union basis; re-baseline at this theta when it misses.
                let mut use_idx = eval_idx;
                let mut sol_theta = {
                    let b = &cache.bases[use_idx];
                    let eps_theta: Vec<f64> = theta.iter().zip(&b.theta).map(|(t, v)| t - v).collect();
                    vpt_solve(&b.theta_basis, &b.family_theta, &eps_theta, problem.tolerance)
                };
                if !sol_theta.converged {
                    let fresh = make_base(problem, &theta, phi)?;
                    cache.bases.push(fresh);
                    use_idx = cache.bases.len() - 1;
                    let b = &cache.bases[use_idx];
                    let zeros = vec![0.0; n_theta];
                    sol_theta = vpt_solve(&b.theta_basis, &b.family_theta, &zeros, problem.tolerance);
                }
                if !sol_theta.converged {
                    return Ok((
                        CostEval {
                            cost: f64::INFINITY,
                            gradient: vec![0.0; n_phi],
                            full_coverage: false,
                            model_values,
                        },
                        GradientReport { partials: vec![0.0; n_phi], estimator, state_derivatives: None },
                    ));
                }
                let base = &cache.bases[use_idx];
                let coeffs = base.theta_basis.correction_coefficients(&sol_theta);
                for k in 0..n_phi {
                    let ds = state_derivative_fixed(&base.grids, k, &coeffs, sol_theta.normalizer, &sol_theta.state)?;
                    let d_obs = problem.observable.derivative(&sol_theta.state, &ds, phi, k)?;
                    gradient[k] += 2.0 * (diff.conj() * d_obs).re;
                    if want_state_derivatives {
                        here.push(ds);
                    }
                }
            }
        }
        if let Some(log) = derivatives_log.as_mut() {
            log.push(here);
        }
    }
    Ok((
        CostEval { cost, gradient: gradient.clone(), full_coverage: true, model_values },
        GradientReport { partials: gradient, estimator, state_derivatives: derivatives_log },
    ))
}

/// Model curve at fixed parameters (used by the synthetic-data generator).
pub fn model_curve(problem: &FitProblem, phi: &[f64]) -> Result<Vec<C64>> {
    let mut cache = FitCache::new();
    let mut out = Vec::with_capacity(problem.grid_len());
    for flat in 0..problem.grid_len() {
        let theta = problem.theta_of(flat);
        match solve_point(problem, &mut cache, &theta, phi)? {
            Some((_, sol)) => out.push(problem.observable.value(&sol.state, phi)?),
            None => {
                return Err(Error::NonConvergentPoint {
                    index: vec![flat],
                    detail: "model curve evaluation failed".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Additive complex Gaussian noise, independent re/im with standard
/// deviation `sigma` each (Box-Muller on a seeded stream).
pub fn add_complex_noise(data: &mut [C64], sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for v in data.iter_mut() {
        *v += C64::new(sigma * gauss(), sigma * gauss());
    }
}

// ---------------------------------------------------------------------------
// Bounded L-BFGS
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitSettings {
    pub memory: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub max_iterations: usize,
    pub estimator: EstimatorKind,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            memory: 10,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-12,
            max_iterations: 30,
            estimator: EstimatorKind::ReducedEquation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitIterate {
    pub iteration: usize,
    pub phi: Vec<f64>,
    pub cost: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub trace: Vec<FitIterate>,
    pub best_phi: Vec<f64>,
    pub best_cost: f64,
    pub converged: bool,
    pub hit_max_iterations: bool,
}

fn project(phi: &mut [f64], unknowns: &[Unknown]) {
    for (p, u) in phi.iter_mut().zip(unknowns) {
        *p = p.clamp(u.lower, u.upper);
    }
}

/// Run the bounded quasi-Newton loop from the unknowns' initial guesses.
pub fn fit(problem: &FitProblem, settings: &FitSettings) -> Result<FitOutcome> {
    problem.validate()?;

    let mut cache = FitCache::new();
    let mut x: Vec<f64> = problem.unknowns.iter().map(|u| u.init).collect();
    project(&mut x, &problem.unknowns);

    let eval = |phi: &[f64], cache: &mut FitCache, estimator: EstimatorKind| -> Result<(f64, Vec<f64>)> {
        let (ev, _) = cost_and_gradient_with(problem, phi, cache, estimator, false)?;
        Ok((ev.cost, ev.gradient))
    };

    let (mut f0, mut g0) = eval(&x, &mut cache, settings.estimator)?;
    if !f0.is_finite() {
        return Err(Error::NonConvergent(f64::INFINITY));
    }
    let mut trace = vec![FitIterate {
        iteration: 0,
        phi: x.clone(),
        cost: f0,
        gradient_norm: norm(&g0),
    }];
    let mut best = (x.clone(), f0);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut hit_max = false;

    for iter in 1..=settings.max_iterations {
        if norm(&g0) <= settings.gradient_tolerance {
            converged = true;
            break;
        }
        // two-loop recursion for the quasi-Newton direction
        let mut p: Vec<f64> = g0.iter().map(|v| -v).collect();
        let pairs = s_hist.len();
        let mut alphas = vec![0.0; pairs];
        for i in (0..pairs).rev() {
            let rho_i = 1.0 / dotf(&y_hist[i], &s_hist[i]);
            alphas[i] = rho_i * dotf(&s_hist[i], &p);
            axpyf(-alphas[i], &y_hist[i], &mut p);
        }
        if pairs > 0 {
            let last = pairs - 1;
            let gamma = dotf(&s_hist[last], &y_hist[last]) / dotf(&y_hist[last], &y_hist[last]);
            for v in p.iter_mut() {
                *v *= gamma;
            }
        }
        for i in 0..pairs {
            let rho_i = 1.0 / dotf(&y_hist[i], &s_hist[i]);
            let beta = rho_i * dotf(&y_hist[i], &p);
            axpyf(alphas[i] - beta, &s_hist[i], &mut p);
        }
        if dotf(&p, &g0) >= 0.0 {
            // not a descent direction; restart from steepest descent
            p = g0.iter().map(|v| -v).collect();
            s_hist.clear();
            y_hist.clear();
        }

        // Wolfe line search with projection onto the box; before any
        // curvature information exists the step is capped at unit length
        let (c1, c2) = (1e-4, 0.9);
        let dir_deriv = dotf(&p, &g0);
        let mut alpha = if pairs == 0 { (1.0 / norm(&p).max(1e-300)).min(1.0) } else { 1.0 };
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        let mut shrink_only = false;
        for _ls in 0..25 {
            let mut xt: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha * pi).collect();
            project(&mut xt, &problem.unknowns);
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if norm(&step) < settings.step_tolerance * norm(&x).max(1.0) {
                break;
            }
            let (ft, gt) = eval(&xt, &mut cache, settings.estimator)?;
            let armijo = ft.is_finite() && ft <= f0 + c1 * dotf(&g0, &step);
            if armijo {
                let curvature = dotf(&gt, &p).abs() <= c2 * dir_deriv.abs();
                accepted = Some((xt, ft, gt));
                if curvature || shrink_only {
                    break;
                }
                // extend once to satisfy the curvature condition
                alpha *= 2.0;
                shrink_only = true;
            } else {
                alpha *= 0.5;
                shrink_only = true;
            }
        }
        let Some((xt, ft, gt)) = accepted else {
            // line search failed; gradient step converged as far as it can
            hit_max = false;
            converged = norm(&g0) <= settings.gradient_tolerance;
            break;
        };
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g0).map(|(a, b)| a - b).collect();
        if dotf(&s, &y) > 1e-12 * norm(&s) * norm(&y) {
            s_hist.push(s.clone());
            y_hist.push(y);
            if s_hist.len() > settings.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        x = xt;
        f0 = ft;
        g0 = gt;
        if f0 < best.1 {
            best = (x.clone(), f0);
        }
        trace.push(FitIterate { iteration: iter, phi: x.clone(), cost: f0, gradient_norm: norm(&g0) });
        if norm(&s) <= settings.step_tolerance * norm(&x).max(1.0) {
            converged = true;
            break;
        }
        if iter == settings.max_iterations {
            hit_max = true;
        }
    }
    if !converged && trace.len() == settings.max_iterations + 1 {
        hit_max = true;
    }
    Ok(FitOutcome {
        trace,
        best_phi: best.0,
        best_cost: best.1,
        converged,
        hit_max_iterations: hit_max,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpyf(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use crate::oracles;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// driven two-level fit fixture: theta = detuning axis, phi = drive
    fn qubit_problem(dataset: Vec<C64>, init: f64) -> FitProblem {
        let built = models::driven_two_level(0.0, 0.9, 1.3).unwrap();
        FitProblem {
            family: built.family.clone(),
            theta_axes: vec![AxisSpec { name: "delta".into(), min: -1.0, max: 1.0, count: 9 }],
            unknowns: vec![Unknown { name: "omega".into(), init, lower: 0.2, upper: 3.0 }],
            dataset,
            observable: ObservableKind::Expectation(models::pauli_z()),
            orders: vec![1],
            tolerance: 1e-8,
        }
    }

    fn qubit_dataset(omega: f64) -> Vec<C64> {
        // exact dense curve, independent of the VPT machinery
        let mut out = Vec::new();
        for k in 0..9 {
            let delta = -1.0 + 0.25 * k as f64;
            let built = models::driven_two_level(delta, omega, 1.3).unwrap();
            let rho = oracles::dense_steady_state_lu(built.family.base()).unwrap();
            out.push(expectation(&rho, &models::pauli_z()).unwrap());
        }
        out
    }

    #[test]
    fn zero_phi_direction_gives_zero_derivative() {
        // unknown direction identically zero: derivative must vanish
        let built = models::driven_two_level(0.3, 0.9, 1.3).unwrap();
        let fam = &built.family;
        let sys = trace_modify(fam.base(), c(1.0, 0.0));
        let (rho0, f) = steady_state_lu(&sys).unwrap();
        let zero_dir = SparseMatrix::zeros(4, 4);
        let grids = delta_grids(
            &f,
            &sys.matrix,
            &rho0,
            &fam.directions()[..1],
            &[1],
            &[zero_dir.clone()],
            &[0.3, 0.0],
        )
        .unwrap();
        for v in &grids.layers[0] {
            assert!(v.norm() < 1e-14);
        }
        let all_dirs = vec![fam.directions()[0].clone(), zero_dir];
        let basis = build_union_basis(&grids, fam.base(), &all_dirs, c(1.0, 0.0)).unwrap();
        let fam2 = ParameterizedLiouvillian::new(fam.base().clone(), all_dirs, vec![0.3, 0.0]).unwrap();
        let sol = vpt_solve(&basis, &fam2, &[0.0, 0.0], 1e-8);
        assert!(sol.converged);
        let ds = state_derivative_reduced(&basis, &[0.0, 0.0], 1, &sol).unwrap();
        assert!(ds.norm() < 1e-10, "reduced derivative norm {:e}", ds.norm());
        // fixed estimator via the theta-only basis
        let fam_theta = ParameterizedLiouvillian::new(
            fam.base().clone(),
            vec![fam.directions()[0].clone()],
            vec![0.3],
        )
        .unwrap();
        let theta_basis = crate::perturbation::build_basis(
            &[&grids.base],
            fam_theta.base(),
            fam_theta.directions(),
            c(1.0, 0.0),
        )
        .unwrap();
        let sol_t = vpt_solve(&theta_basis, &fam_theta, &[0.0], 1e-8);
        let coeffs = theta_basis.correction_coefficients(&sol_t);
        let dsf = state_derivative_fixed(&grids, 0, &coeffs, sol_t.normalizer, &sol_t.state).unwrap();
        assert!(dsf.norm() < 1e-10, "fixed derivative norm {:e}", dsf.norm());
    }

    #[test]
    fn derivative_of_unit_trace_state_is_traceless_and_matches_fd() {
        let built = models::driven_two_level(0.4, 0.9, 1.3).unwrap();
        let fam = &built.family;
        let sys = trace_modify(fam.base(), c(1.0, 0.0));
        let (rho0, f) = steady_state_lu(&sys).unwrap();
        // theta = detuning, unknown = drive; order 1 keeps the reduced
        // system nonsingular (the two-level correction space saturates at
        // three dimensions, where the Galerkin section degenerates)
        let m = 1usize;
        let grids = delta_grids(
            &f,
            &sys.matrix,
            &rho0,
            &fam.directions()[..1],
            &[m],
            &fam.directions()[1..],
            fam.base_point(),
        )
        .unwrap();
        let basis = build_union_basis(&grids, fam.base(), fam.directions(), c(1.0, 0.0)).unwrap();
        let fam_theta = ParameterizedLiouvillian::new(
            fam.base().clone(),
            vec![fam.directions()[0].clone()],
            vec![fam.base_point()[0]],
        )
        .unwrap();
        let theta_basis = crate::perturbation::build_basis(
            &[&grids.base],
            fam_theta.base(),
            fam_theta.directions(),
            c(1.0, 0.0),
        )
        .unwrap();
        // reduced estimator away from the base point (the union basis
        // spans the full two-level space, so it converges anywhere)
        let eps = [0.15, 0.0];
        let sol = vpt_solve(&basis, fam, &eps, 1e-9);
        assert!(sol.converged);
        let ds_red = state_derivative_reduced(&basis, &eps, 1, &sol).unwrap();
        assert!(ds_red.trace().norm() < 1e-10);

        let fd_at = |delta_eps: f64| -> Vec<C64> {
            let h = 1e-5;
            let plus = oracles::dense_steady_state_lu(&fam.at(&[delta_eps, h])).unwrap();
            let minus = oracles::dense_steady_state_lu(&fam.at(&[delta_eps, -h])).unwrap();
            plus.data.iter().zip(&minus.data).map(|(p, m)| (p - m) / c(2.0 * h, 0.0)).collect()
        };
        let fd = fd_at(eps[0]);
        let err_red = vecops::nrm2(&vecops::sub(&ds_red.data, &fd)) / vecops::nrm2(&fd);
        assert!(err_red < 1e-3, "reduced estimator vs FD: {err_red:e}");

        // fixed estimator at the base point, where the theta-slice basis
        // converges and its coefficients pair with the delta layers
        let sol_t0 = vpt_solve(&theta_basis, &fam_theta, &[0.0], 1e-9);
        assert!(sol_t0.converged);
        let coeffs0 = theta_basis.correction_coefficients(&sol_t0);
        let ds_fix = state_derivative_fixed(&grids, 0, &coeffs0, sol_t0.normalizer, &sol_t0.state).unwrap();
        assert!(ds_fix.trace().norm() < 1e-10);
        let fd0 = fd_at(0.0);
        let err_fix = vecops::nrm2(&vecops::sub(&ds_fix.data, &fd0)) / vecops::nrm2(&fd0);
        assert!(err_fix < 1e-3, "fixed estimator vs FD: {err_fix:e}");

        // the two estimators agree closely at eps = 0
        let sol0 = vpt_solve(&basis, fam, &[0.0, 0.0], 1e-9);
        let red0 = state_derivative_reduced(&basis, &[0.0, 0.0], 1, &sol0).unwrap();
        let agree = vecops::nrm2(&vecops::sub(&red0.data, &ds_fix.data));
        assert!(agree < 1e-6, "estimators disagree by {agree:e} at eps = 0");
    }

    #[test]
    fn zero_noise_cost_vanishes_at_truth_with_flat_gradient() {
        let truth = 0.9;
        let data = qubit_dataset(truth);
        let scale: f64 = data.iter().map(|v| v.norm_sqr()).sum();
        let problem = qubit_problem(data, truth);
        let mut cache = FitCache::new();
        let eval = cost_and_gradient(&problem, &[truth], &mut cache).unwrap();
        assert!(eval.full_coverage);
        assert!(eval.cost <= 1e-12, "cost at truth = {:e}", eval.cost);
        assert!(norm(&eval.gradient) <= 1e-6 * scale.max(1.0), "gradient at truth = {:e}", norm(&eval.gradient));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = qubit_dataset(0.9);
        let problem = qubit_problem(data, 0.7);
        let phi = [0.75];
        let mut cache = FitCache::new();
        let eval = cost_and_gradient(&problem, &phi, &mut cache).unwrap();
        let fd = oracles::finite_difference_gradient(
            |p| {
                let mut fresh = FitCache::new();
                cost_and_gradient(&problem, p, &mut fresh).unwrap().cost
            },
            &phi,
            1e-5,
        );
        let rel = (eval.gradient[0] - fd[0]).abs() / fd[0].abs().max(1e-12);
        assert!(rel < 1e-3, "gradient {} vs FD {} (rel {rel:e})", eval.gradient[0], fd[0]);

        // fixed-coefficients estimator agrees too
        let mut cache2 = FitCache::new();
        let (_, report) =
            cost_gradient_report(&problem, &phi, &mut cache2, EstimatorKind::FixedCoefficients, false).unwrap();
        let rel2 = (report.partials[0] - fd[0]).abs() / fd[0].abs().max(1e-12);
        assert!(rel2 < 1e-3, "fixed estimator {} vs FD {}", report.partials[0], fd[0]);
    }

    #[test]
    fn quadratic_synthetic_fit_converges_quickly() {
        // noiseless synthetic data with a near-quadratic cost bowl around
        // the truth; must converge well within ten iterations
        let data = qubit_dataset(1.1);
        let problem = qubit_problem(data, 0.9);
        let outcome = fit(&problem, &FitSettings { max_iterations: 10, ..Default::default() }).unwrap();
        assert!(outcome.converged || outcome.best_cost < 1e-10, "cost {:e}", outcome.best_cost);
        assert!((outcome.best_phi[0] - 1.1).abs() < 1e-4, "recovered {}", outcome.best_phi[0]);
        assert!(outcome.trace.len() <= 11);
    }

    #[test]
    fn noiseless_fit_drives_cost_to_floor_and_noise_sets_floor() {
        let truth = 0.9;
        let mut noisy = qubit_dataset(truth);
        let sigma = 0.02;
        add_complex_noise(&mut noisy, sigma, 42);
        let problem = qubit_problem(noisy, 0.6);
        let outcome = fit(&problem, &FitSettings::default()).unwrap();
        let floor = 0.1 * problem.dataset.len() as f64 * sigma * sigma;
        assert!(outcome.best_cost >= floor, "cost {:e} below noise floor {floor:e}", outcome.best_cost);
        assert!((outcome.best_phi[0] - truth).abs() < 0.05, "recovered {}", outcome.best_phi[0]);
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let n = 4000;
        let mut data = vec![c(0.0, 0.0); n];
        add_complex_noise(&mut data, 0.02, 7);
        let mean_re: f64 = data.iter().map(|v| v.re).sum::<f64>() / n as f64;
        let var_re: f64 = data.iter().map(|v| (v.re - mean_re).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var_re.sqrt();
        assert!((sd - 0.02).abs() < 0.002, "sample sd {sd}");
    }

    #[test]
    fn bounds_are_respected() {
        let data = qubit_dataset(2.9);
        let mut problem = qubit_problem(data, 0.5);
        problem.unknowns[0].upper = 1.0;
        let outcome = fit(&problem, &FitSettings { max_iterations: 15, ..Default::default() }).unwrap();
        assert!(outcome.best_phi[0] <= 1.0 + 1e-12);
    }
}
