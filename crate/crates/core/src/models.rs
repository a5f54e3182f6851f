//! Built-in model builders and their affine parameter directions.
//!
//! Each builder returns the Lindblad model together with a
//! [`ParameterizedLiouvillian`] family whose directions are the affine
//! derivative generators of the named parameters. Only parameters that
//! enter the generator affinely are exposed as directions; anything else
//! requires re-baselining with fresh parameters.

use crate::error::{Error, Result};
use crate::lindblad::{
    parameterize, DensityVector, DirectionDelta, LindbladModel, ParameterizedLiouvillian,
};
use crate::sparse::SparseMatrix;
use crate::special::ln_gamma;
use crate::C64;

pub const DEFAULT_SPIN_CAP: usize = 9;

/// A built model: generator family plus named directions and observables.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub model: LindbladModel,
    pub family: ParameterizedLiouvillian,
    pub direction_names: Vec<String>,
    pub observables: Vec<(String, SparseMatrix)>,
    /// per-mode truncation dimensions, outermost Kronecker factor first
    pub mode_dims: Vec<usize>,
    /// symmetry superoperators (translations and parity for the lattice model)
    pub symmetries: Vec<(String, SparseMatrix)>,
}

impl BuiltModel {
    /// Index of a named direction; unsupported names are rejected, which is
    /// how non-affine parameters are kept out of the perturbative machinery.
    pub fn direction_index(&self, name: &str) -> Result<usize> {
        self.direction_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidParameter(format!("no affine direction named '{name}'")))
    }

    pub fn observable(&self, name: &str) -> Result<&SparseMatrix> {
        self.observables
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, op)| op)
            .ok_or_else(|| Error::InvalidParameter(format!("no observable named '{name}'")))
    }
}

/// Bosonic annihilation operator on a truncated Fock space.
pub fn annihilation(dim: usize) -> SparseMatrix {
    let tri: Vec<(usize, usize, C64)> =
        (1..dim).map(|n| (n - 1, n, C64::new((n as f64).sqrt(), 0.0))).collect();
    if tri.is_empty() {
        return SparseMatrix::zeros(dim, dim);
    }
    SparseMatrix::from_triplets(dim, dim, &tri).unwrap()
}

pub fn number_operator(dim: usize) -> SparseMatrix {
    SparseMatrix::diagonal(&(0..dim).map(|n| C64::new(n as f64, 0.0)).collect::<Vec<_>>())
}

pub fn pauli_x() -> SparseMatrix {
    SparseMatrix::from_triplets(2, 2, &[(0, 1, C64::new(1.0, 0.0)), (1, 0, C64::new(1.0, 0.0))]).unwrap()
}

pub fn pauli_y() -> SparseMatrix {
    SparseMatrix::from_triplets(2, 2, &[(0, 1, C64::new(0.0, -1.0)), (1, 0, C64::new(0.0, 1.0))]).unwrap()
}

pub fn pauli_z() -> SparseMatrix {
    SparseMatrix::from_triplets(2, 2, &[(0, 0, C64::new(1.0, 0.0)), (1, 1, C64::new(-1.0, 0.0))]).unwrap()
}

/// `sigma^- = |down><up|` in the (up, down) basis.
pub fn sigma_minus() -> SparseMatrix {
    SparseMatrix::from_triplets(2, 2, &[(1, 0, C64::new(1.0, 0.0))]).unwrap()
}

// ---------------------------------------------------------------------------
// Driven-dissipative Kerr resonator
// ---------------------------------------------------------------------------

/// `H = -Delta a^dag a - K/2 a^dag a^dag a a + F (a + a^dag)`, single-photon
/// loss at rate `kappa`, on `n_max` Fock states.
#[derive(Debug, Clone, PartialEq)]
pub struct KerrParams {
    pub delta: f64,
    pub kerr: f64,
    pub drive: f64,
    pub kappa: f64,
    pub n_max: usize,
}

pub fn kerr_model(p: &KerrParams) -> Result<BuiltModel> {
    if p.kappa <= 0.0 {
        return Err(Error::InvalidParameter("kappa must be positive".into()));
    }
    if p.n_max < 2 {
        return Err(Error::TruncationTooSmall(f64::NAN));
    }
    let d = p.n_max;
    let a = annihilation(d);
    let adag = a.adjoint();
    let n_op = number_operator(d);
    let kerr_term = adag.matmul(&adag)?.matmul(&a)?.matmul(&a)?;
    let drive_term = a.add_scaled(C64::new(1.0, 0.0), &adag, C64::new(1.0, 0.0))?;
    let h = n_op
        .scaled(C64::new(-p.delta, 0.0))
        .add_scaled(C64::new(1.0, 0.0), &kerr_term, C64::new(-0.5 * p.kerr, 0.0))?
        .add_scaled(C64::new(1.0, 0.0), &drive_term, C64::new(p.drive, 0.0))?;
    let model = LindbladModel::new(h, vec![(a.clone(), p.kappa)])?;
    let deltas = vec![
        DirectionDelta::from_hamiltonian(n_op.scaled(C64::new(-1.0, 0.0))),
        DirectionDelta::from_hamiltonian(drive_term),
    ];
    let family = parameterize(&model, &deltas, vec![p.delta, p.drive])?;
    Ok(BuiltModel {
        model,
        family,
        direction_names: vec!["delta".into(), "drive".into()],
        observables: vec![("photon_number".into(), n_op)],
        mode_dims: vec![d],
        symmetries: vec![],
    })
}

/// Closed-form steady-state moment `<a^dag^j a^k>` of the driven Kerr
/// resonator, evaluated from the hypergeometric-type series
///
/// `<a^dag^m a^n> = z^{m+n} S(m,n) / S(0,0)`,
/// `S(m,n) = sum_r (2 z^2)^r / (r! Gamma(n+r+c) Gamma(m+r+conj(c)))`,
///
/// with `z = 2F/K` and `c = (2/K)(Delta + i kappa/2)`. Independent of any
/// matrix computation; serves as an analytic oracle.
pub fn kerr_exact_observable(p: &KerrParams, j: u32, k: u32) -> Result<C64> {
    if p.kappa <= 0.0 {
        return Err(Error::InvalidParameter("kappa must be positive".into()));
    }
    let (m, n) = (j as f64, k as f64);
    if p.kerr == 0.0 {
        // linear cavity: coherent steady state alpha = F / (Delta + i kappa/2)
        let alpha = C64::new(p.drive, 0.0) / C64::new(p.delta, 0.5 * p.kappa);
        return Ok(alpha.conj().powf(m) * alpha.powf(n));
    }
    let z = 2.0 * p.drive / p.kerr;
    if z == 0.0 {
        return Ok(if j == 0 && k == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
    }
    let c = C64::new(2.0 * p.delta / p.kerr, p.kappa / p.kerr);
    let x = 2.0 * z * z;
    let tau_sum = |nn: f64, mm: f64| -> Result<C64> {
        // sum_r tau_r with tau_0 = 1 and the term ratio below
        let mut tau = C64::new(1.0, 0.0);
        let mut total = tau;
        for r in 0..100_000u64 {
            let rf = r as f64;
            let ratio = C64::new(x, 0.0)
                / (C64::new(rf + 1.0, 0.0) * (C64::new(nn + rf, 0.0) + c) * (C64::new(mm + rf, 0.0) + c.conj()));
            tau *= ratio;
            total += tau;
            if !total.is_finite() {
                return Err(Error::SeriesNonConvergent);
            }
            if r > 3 && tau.norm() < 1e-18 * total.norm() {
                return Ok(total);
            }
        }
        Err(Error::SeriesNonConvergent)
    };
    // prefactor Gamma(c) Gamma(conj c) / (Gamma(n+c) Gamma(m+conj c))
    let log_pref = ln_gamma(c) + ln_gamma(c.conj())
        - ln_gamma(C64::new(n, 0.0) + c)
        - ln_gamma(C64::new(m, 0.0) + c.conj());
    let pref = log_pref.exp();
    if !pref.is_finite() {
        return Err(Error::SeriesNonConvergent);
    }
    let num = tau_sum(n, m)?;
    let den = tau_sum(0.0, 0.0)?;
    if den.norm() == 0.0 {
        return Err(Error::SeriesNonConvergent);
    }
    Ok(C64::new(z, 0.0).powf(m + n) * pref * num / den)
}

// ---------------------------------------------------------------------------
// Two-mode memory-buffer (cat) system
// ---------------------------------------------------------------------------

/// Memory mode `a` and buffer mode `b` coupled by a two-photon exchange:
///
/// `H = -Delta_a a^dag a - Delta_b b^dag b + g2 (a^2 b^dag + h.c.)
///      + F (b + b^dag) - K_a a^dag a^dag a a - K_b b^dag b^dag b b
///      + chi a^dag a b^dag b`,
///
/// with single-photon losses `kappa_a D[a] + kappa_b D[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CatParams {
    pub delta_a: f64,
    pub delta_b: f64,
    pub g2: f64,
    pub drive: f64,
    pub kerr_a: f64,
    pub kerr_b: f64,
    pub cross_kerr: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

pub fn cat_model(p: &CatParams) -> Result<BuiltModel> {
    if p.kappa_a <= 0.0 || p.kappa_b <= 0.0 {
        return Err(Error::InvalidParameter("loss rates must be positive".into()));
    }
    if p.n_a < 2 || p.n_b < 2 {
        return Err(Error::TruncationTooSmall(f64::NAN));
    }
    let ia = SparseMatrix::identity(p.n_a);
    let ib = SparseMatrix::identity(p.n_b);
    // mode a is the outer Kronecker factor
    let a = annihilation(p.n_a).kron(&ib);
    let b = ia.kron(&annihilation(p.n_b));
    let na = a.adjoint().matmul(&a)?;
    let nb = b.adjoint().matmul(&b)?;
    let two_photon = {
        let aab = a.matmul(&a)?.matmul(&b.adjoint())?;
        aab.add_scaled(C64::new(1.0, 0.0), &aab.adjoint(), C64::new(1.0, 0.0))?
    };
    let drive_b = b.add_scaled(C64::new(1.0, 0.0), &b.adjoint(), C64::new(1.0, 0.0))?;
    let kerr_a_term = a.adjoint().matmul(&a.adjoint())?.matmul(&a)?.matmul(&a)?;
    let kerr_b_term = b.adjoint().matmul(&b.adjoint())?.matmul(&b)?.matmul(&b)?;
    let cross = na.matmul(&nb)?;

    let mut h = na.scaled(C64::new(-p.delta_a, 0.0));
    h = h.add_scaled(C64::new(1.0, 0.0), &nb, C64::new(-p.delta_b, 0.0))?;
    h = h.add_scaled(C64::new(1.0, 0.0), &two_photon, C64::new(p.g2, 0.0))?;
    h = h.add_scaled(C64::new(1.0, 0.0), &drive_b, C64::new(p.drive, 0.0))?;
    h = h.add_scaled(C64::new(1.0, 0.0), &kerr_a_term, C64::new(-p.kerr_a, 0.0))?;
    h = h.add_scaled(C64::new(1.0, 0.0), &kerr_b_term, C64::new(-p.kerr_b, 0.0))?;
    h = h.add_scaled(C64::new(1.0, 0.0), &cross, C64::new(p.cross_kerr, 0.0))?;

    let model = LindbladModel::new(h, vec![(a.clone(), p.kappa_a), (b.clone(), p.kappa_b)])?;
    let deltas = vec![
        DirectionDelta::from_hamiltonian(na.scaled(C64::new(-1.0, 0.0))),
        DirectionDelta::from_hamiltonian(nb.scaled(C64::new(-1.0, 0.0))),
        DirectionDelta::from_hamiltonian(two_photon),
        DirectionDelta::from_hamiltonian(drive_b),
        DirectionDelta::from_hamiltonian(kerr_a_term.scaled(C64::new(-1.0, 0.0))),
    ];
    let family = parameterize(&model, &deltas, vec![p.delta_a, p.delta_b, p.g2, p.drive, p.kerr_a])?;
    Ok(BuiltModel {
        model,
        family,
        direction_names: vec!["delta_a".into(), "delta_b".into(), "g2".into(), "drive".into(), "kerr_a".into()],
        observables: vec![("na".into(), na), ("nb".into(), nb), ("b_annihilation".into(), b)],
        mode_dims: vec![p.n_a, p.n_b],
        symmetries: vec![],
    })
}

/// Buffer transmission coefficient `S21 = 1 - i kappa_b <b> / F`.
pub fn s21(rho: &DensityVector, p: &CatParams) -> Result<C64> {
    if p.drive == 0.0 {
        return Err(Error::ZeroDrive);
    }
    let ia = SparseMatrix::identity(p.n_a);
    let b = ia.kron(&annihilation(p.n_b));
    let b_expect = crate::lindblad::expectation(rho, &b)?;
    Ok(s21_from_b_expectation(b_expect, p.kappa_b, p.drive))
}

pub fn s21_from_b_expectation(b_expect: C64, kappa_b: f64, drive: f64) -> C64 {
    C64::new(1.0, 0.0) - C64::new(0.0, 1.0) * C64::new(kappa_b, 0.0) * b_expect / C64::new(drive, 0.0)
}

// ---------------------------------------------------------------------------
// Dissipative XYZ lattice
// ---------------------------------------------------------------------------

/// Anisotropic Heisenberg couplings on an `lx x ly` lattice with local
/// spin-flip dissipation at rate `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct XYZParams {
    pub lx: usize,
    pub ly: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
    pub jx: f64,
    pub jy: f64,
    pub jz: f64,
    pub gamma: f64,
}

/// Pauli operator on one site of the lattice (site 0 is the outermost
/// Kronecker factor).
fn site_operator(op: &SparseMatrix, site: usize, spins: usize) -> SparseMatrix {
    let mut out = if site == 0 { op.clone() } else { SparseMatrix::identity(1 << site) };
    if site > 0 {
        out = out.kron(op);
    }
    let remaining = spins - site - 1;
    if remaining > 0 {
        out = out.kron(&SparseMatrix::identity(1 << remaining));
    }
    out
}

fn lattice_edges(p: &XYZParams) -> Vec<(usize, usize)> {
    let site = |x: usize, y: usize| y * p.lx + x;
    let mut edges = Vec::new();
    for y in 0..p.ly {
        for x in 0..p.lx {
            if p.lx > 1 && (x + 1 < p.lx || p.periodic_x) {
                edges.push((site(x, y), site((x + 1) % p.lx, y)));
            }
            if p.ly > 1 && (y + 1 < p.ly || p.periodic_y) {
                edges.push((site(x, y), site(x, (y + 1) % p.ly)));
            }
        }
    }
    edges
}

pub fn xyz_model(p: &XYZParams) -> Result<BuiltModel> {
    xyz_model_with_cap(p, DEFAULT_SPIN_CAP)
}

pub fn xyz_model_with_cap(p: &XYZParams, cap: usize) -> Result<BuiltModel> {
    let spins = p.lx * p.ly;
    if spins == 0 {
        return Err(Error::InvalidParameter("lattice must have at least one site".into()));
    }
    if spins > cap {
        return Err(Error::LatticeTooLarge { spins, cap });
    }
    if p.gamma <= 0.0 {
        return Err(Error::InvalidParameter("gamma must be positive".into()));
    }
    let edges = lattice_edges(p);
    let dim = 1usize << spins;
    let paulis = [pauli_x(), pauli_y(), pauli_z()];
    let couplings = [p.jx, p.jy, p.jz];

    let mut coupling_terms: Vec<SparseMatrix> = Vec::with_capacity(3);
    for pauli in &paulis {
        let mut term = SparseMatrix::zeros(dim, dim);
        for &(s1, s2) in &edges {
            let pair = site_operator(pauli, s1, spins).matmul(&site_operator(pauli, s2, spins))?;
            term = term.add_scaled(C64::new(1.0, 0.0), &pair, C64::new(1.0, 0.0))?;
        }
        coupling_terms.push(term);
    }
    let mut h = SparseMatrix::zeros(dim, dim);
    for (term, j) in coupling_terms.iter().zip(couplings) {
        h = h.add_scaled(C64::new(1.0, 0.0), term, C64::new(j, 0.0))?;
    }
    let jumps: Vec<(SparseMatrix, f64)> =
        (0..spins).map(|s| (site_operator(&sigma_minus(), s, spins), p.gamma)).collect();
    let model = LindbladModel::new(h, jumps)?;
    let deltas: Vec<DirectionDelta> =
        coupling_terms.iter().map(|t| DirectionDelta::from_hamiltonian(t.clone())).collect();
    let family = parameterize(&model, &deltas, vec![p.jx, p.jy, p.jz])?;

    // average magnetization along z
    let mut mz = SparseMatrix::zeros(dim, dim);
    for s in 0..spins {
        mz = mz.add_scaled(C64::new(1.0, 0.0), &site_operator(&pauli_z(), s, spins), C64::new(1.0, 0.0))?;
    }
    let mz = mz.scaled(C64::new(1.0 / spins as f64, 0.0));

    let mut symmetries = Vec::new();
    if p.periodic_x && p.lx > 1 {
        symmetries.push(("translation_x".to_string(), translation_superoperator(p, spins, true)));
    }
    if p.periodic_y && p.ly > 1 {
        symmetries.push(("translation_y".to_string(), translation_superoperator(p, spins, false)));
    }
    symmetries.push(("parity_z".to_string(), parity_superoperator(spins)));

    Ok(BuiltModel {
        model,
        family,
        direction_names: vec!["jx".into(), "jy".into(), "jz".into()],
        observables: vec![("mz".into(), mz)],
        mode_dims: vec![2; spins],
        symmetries,
    })
}

/// Per-site `sigma_z` operators, for site-uniformity checks.
pub fn xyz_site_sz_ops(p: &XYZParams) -> Vec<SparseMatrix> {
    let spins = p.lx * p.ly;
    (0..spins).map(|s| site_operator(&pauli_z(), s, spins)).collect()
}

fn permute_basis_state(index: usize, spins: usize, site_map: &[usize]) -> usize {
    // bit of site s sits at position (spins - 1 - s)
    let mut out = 0usize;
    for s in 0..spins {
        let bit = (index >> (spins - 1 - s)) & 1;
        out |= bit << (spins - 1 - site_map[s]);
    }
    out
}

fn translation_superoperator(p: &XYZParams, spins: usize, along_x: bool) -> SparseMatrix {
    let site = |x: usize, y: usize| y * p.lx + x;
    let mut site_map = vec![0usize; spins];
    for y in 0..p.ly {
        for x in 0..p.lx {
            let target = if along_x { site((x + 1) % p.lx, y) } else { site(x, (y + 1) % p.ly) };
            site_map[site(x, y)] = target;
        }
    }
    let dim = 1usize << spins;
    let tri: Vec<(usize, usize, C64)> = (0..dim)
        .map(|i| (permute_basis_state(i, spins, &site_map), i, C64::new(1.0, 0.0)))
        .collect();
    let v = SparseMatrix::from_triplets(dim, dim, &tri).unwrap();
    // superoperator rho -> V rho V^dag; V is a real permutation
    v.kron(&v)
}

fn parity_superoperator(spins: usize) -> SparseMatrix {
    let dim = 1usize << spins;
    let diag: Vec<C64> = (0..dim)
        .map(|i| {
            let downs = (i as u64).count_ones();
            C64::new(if downs % 2 == 0 { 1.0 } else { -1.0 }, 0.0)
        })
        .collect();
    let pop = SparseMatrix::diagonal(&diag);
    pop.kron(&pop)
}

// ---------------------------------------------------------------------------
// Two-level helpers (widely used in tests and cross-checks)
// ---------------------------------------------------------------------------

/// Pure decay: `H = 0`, jump `sigma^-` at rate `kappa`. Basis order is
/// (up, down), so the steady state is `diag(0, 1)`.
pub fn two_level_decay(kappa: f64) -> Result<LindbladModel> {
    LindbladModel::new(SparseMatrix::zeros(2, 2), vec![(sigma_minus(), kappa)])
}

/// Rabi-driven two-level system `H = -delta/2 sigma_z + omega sigma_x`
/// with decay `kappa`; directions are `delta` and `omega`.
pub fn driven_two_level(delta: f64, omega: f64, kappa: f64) -> Result<BuiltModel> {
    let h = pauli_z()
        .scaled(C64::new(-0.5 * delta, 0.0))
        .add_scaled(C64::new(1.0, 0.0), &pauli_x(), C64::new(omega, 0.0))?;
    let model = LindbladModel::new(h, vec![(sigma_minus(), kappa)])?;
    let deltas = vec![
        DirectionDelta::from_hamiltonian(pauli_z().scaled(C64::new(-0.5, 0.0))),
        DirectionDelta::from_hamiltonian(pauli_x()),
    ];
    let family = parameterize(&model, &deltas, vec![delta, omega])?;
    Ok(BuiltModel {
        model,
        family,
        direction_names: vec!["delta".into(), "omega".into()],
        observables: vec![("sz".into(), pauli_z())],
        mode_dims: vec![2],
        symmetries: vec![],
    })
}

/// Largest steady-state population in the top two levels of any mode
/// marginal; values above ~1e-6 signal an inadequate Fock truncation.
pub fn truncation_defect(rho: &DensityVector, mode_dims: &[usize]) -> f64 {
    let d: usize = mode_dims.iter().product();
    assert_eq!(d, rho.hilbert_dim, "mode dimensions do not match the state");
    let mut worst: f64 = 0.0;
    for (m, &dm) in mode_dims.iter().enumerate() {
        if dm < 3 {
            continue;
        }
        let stride: usize = mode_dims[m + 1..].iter().product();
        let mut marginal = vec![0.0f64; dm];
        for idx in 0..d {
            let level = (idx / stride) % dm;
            marginal[level] += rho.data[idx + d * idx].re;
        }
        worst = worst.max(marginal[dm - 1].abs()).max(marginal[dm - 2].abs());
    }
    worst
}

pub const TRUNCATION_WARN_LEVEL: f64 = 1e-6;

/// Escalate an inadequate truncation into an error.
pub fn assert_truncation(rho: &DensityVector, mode_dims: &[usize]) -> Result<()> {
    let defect = truncation_defect(rho, mode_dims);
    if defect > TRUNCATION_WARN_LEVEL {
        return Err(Error::TruncationTooSmall(defect));
    }
    Ok(())
}
