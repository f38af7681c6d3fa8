//! Brute-force ground truth for small instances.
//!
//! Two independent routes to the physics: Gaussian covariance algebra with
//! Hafnians for photon-count probabilities, and dense Fock-space density
//! matrices for Schmidt spectra. Neither touches the tensor-network code.

use ndarray::{s, Array2, Axis};
use ndarray_linalg::{Determinant, Inverse, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock_local::{FockError, LocalDensity, PhaseDistribution};
use crate::interferometer::{
    compose_circuit, fock_beamsplitter_gate, CircuitError, LayeredCircuit,
};
use crate::util::{factorial, splitmix64, unitarity_error};
use crate::C64;

/// Default bound on the side length of a dense density matrix.
pub const DENSE_SIDE_LIMIT: usize = 4096;

const UNITARY_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-10;
const MC_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("matrix is not unitary (error {0:e})")]
    NonUnitary(f64),
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("covariance matrix is singular")]
    Singular,
    #[error("hafnian needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("matrix is not symmetric (error {0:e})")]
    NotSymmetric(f64),
    #[error("dense side {side} exceeds limit {limit}")]
    SizeLimit { side: usize, limit: usize },
    #[error("transmissivity {0} outside [0, 1]")]
    InvalidTransmissivity(f64),
    #[error("need at least one Monte Carlo sample")]
    NoSamples,
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}

pub type OracleResult<T> = Result<T, OracleError>;

/// Q-covariance in the `(a_1..a_M, a_1†..a_M†)` basis; vacuum is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCovariance {
    pub num_modes: usize,
    pub sigma_q: Array2<C64>,
}

impl GaussianCovariance {
    pub fn vacuum(num_modes: usize) -> Self {
        Self {
            num_modes,
            sigma_q: Array2::eye(2 * num_modes),
        }
    }

    pub fn determinant(&self) -> OracleResult<f64> {
        Ok(self.sigma_q.det()?.re)
    }

    pub fn mean_photon_number(&self) -> f64 {
        (0..self.num_modes)
            .map(|i| self.sigma_q[[i, i]].re - 1.0)
            .sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let n = self.sigma_q.nrows();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.sigma_q[[i, j]] - self.sigma_q[[j, i]].conj()).norm());
            }
        }
        worst
    }

    /// Real covariance of `(x_1..x_M, p_1..p_M)` with `x = a + a†`, `p = -i(a - a†)`,
    /// so the vacuum again maps to the identity.
    pub fn quadrature_covariance(&self) -> Array2<f64> {
        let m = self.num_modes;
        let sigma = &self.sigma_q - &Array2::<C64>::eye(2 * m).mapv(|z| z * 0.5);
        // ξ = (a, a†), r = Ω ξ with x = a + a†, p = -i a + i a†.
        let mut omega = Array2::<C64>::zeros((2 * m, 2 * m));
        let i = C64::new(0.0, 1.0);
        for j in 0..m {
            omega[[j, j]] = C64::new(1.0, 0.0);
            omega[[j, j + m]] = C64::new(1.0, 0.0);
            omega[[j + m, j]] = -i;
            omega[[j + m, j + m]] = i;
        }
        let omega_dag = omega.t().mapv(|z| z.conj());
        omega.dot(&sigma).dot(&omega_dag).mapv(|z| z.re)
    }

    /// Uniform loss `a ↦ √η a + √(1-η) vac` on every mode.
    pub fn with_loss(&self, eta: f64) -> OracleResult<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(OracleError::InvalidTransmissivity(eta));
        }
        let n = 2 * self.num_modes;
        let mut out = self.sigma_q.mapv(|z| z * eta);
        for k in 0..n {
            out[[k, k]] += 1.0 - eta;
        }
        Ok(Self {
            num_modes: self.num_modes,
            sigma_q: out,
        })
    }
}

/// Photon counts per output mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhotonPattern {
    pub counts: Vec<usize>,
}

impl PhotonPattern {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn factorial(&self) -> f64 {
        self.counts.iter().map(|&n| factorial(n)).product()
    }

    /// Mode indices repeated by their count, in ascending order.
    pub fn repeated_modes(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
            .collect()
    }
}

fn check_unitary(u: &Array2<C64>) -> OracleResult<()> {
    let err = unitarity_error(u);
    if err > UNITARY_TOL || u.nrows() != u.ncols() {
        return Err(OracleError::NonUnitary(err));
    }
    Ok(())
}

/// Output covariance for squeezed vacua with parameters `r` entering `u`.
/// Uses `Û† a_i Û = Σ_j U_ij a_j`.
pub fn covariance_from_circuit(r: &[f64], u: &Array2<C64>) -> OracleResult<GaussianCovariance> {
    check_unitary(u)?;
    let m = u.nrows();
    if r.len() != m {
        return Err(OracleError::LengthMismatch {
            expected: m,
            got: r.len(),
        });
    }
    // ⟨a a^T⟩ = U diag(-cosh r sinh r) U^T and ⟨a† a^T⟩ = U* diag(sinh² r) U^T.
    let anomalous = Array2::from_diag(
        &r.iter()
            .map(|&x| C64::new(-x.cosh() * x.sinh(), 0.0))
            .collect::<ndarray::Array1<_>>(),
    );
    let occupation = Array2::from_diag(
        &r.iter()
            .map(|&x| C64::new(x.sinh().powi(2), 0.0))
            .collect::<ndarray::Array1<_>>(),
    );
    let ut = u.t().to_owned();
    let uc = u.mapv(|z| z.conj());
    let mm = u.dot(&anomalous).dot(&ut);
    let nn = uc.dot(&occupation).dot(&ut);
    let mut sq = Array2::<C64>::zeros((2 * m, 2 * m));
    for i in 0..m {
        for j in 0..m {
            let delta = if i == j { 1.0 } else { 0.0 };
            sq[[i, j]] = nn[[j, i]] + delta;
            sq[[i, j + m]] = mm[[i, j]];
            sq[[i + m, j]] = mm[[i, j]].conj();
            sq[[i + m, j + m]] = nn[[i, j]] + delta;
        }
    }
    Ok(GaussianCovariance {
        num_modes: m,
        sigma_q: sq,
    })
}

/// `A = X (I - Σ_Q⁻¹)` with `X` the block swap.
pub fn build_a(c: &GaussianCovariance) -> OracleResult<Array2<C64>> {
    let m = c.num_modes;
    if c.determinant()?.abs() < 1e-300 {
        return Err(OracleError::Singular);
    }
    let inv = c.sigma_q.inv().map_err(|_| OracleError::Singular)?;
    let core = Array2::<C64>::eye(2 * m) - inv;
    let mut a = Array2::<C64>::zeros((2 * m, 2 * m));
    a.slice_mut(s![..m, ..]).assign(&core.slice(s![m.., ..]));
    a.slice_mut(s![m.., ..]).assign(&core.slice(s![..m, ..]));
    Ok(a)
}

/// `B = -U diag(tanh r) U^T`, the pair amplitude of the output state
/// `exp(½ Σ B_ij a_i† a_j†)|0⟩`. In the basis used here `A = [[B*, 0], [0, B]]`
/// for pure squeezing.
pub fn build_b(r: &[f64], u: &Array2<C64>) -> OracleResult<Array2<C64>> {
    check_unitary(u)?;
    if r.len() != u.nrows() {
        return Err(OracleError::LengthMismatch {
            expected: u.nrows(),
            got: r.len(),
        });
    }
    let mut scaled = u.clone();
    for (mut col, &x) in scaled.axis_iter_mut(Axis(1)).zip(r) {
        col.mapv_inplace(|z| -z * x.tanh());
    }
    Ok(scaled.dot(&u.t()))
}

/// Keeps rows and columns `j` and `j + M` of a `2M × 2M` matrix, each
/// repeated `n_j` times.
pub fn reduce_pattern(a: &Array2<C64>, pattern: &PhotonPattern) -> Array2<C64> {
    let m = a.nrows() / 2;
    let rep = pattern.repeated_modes();
    let idx: Vec<usize> = rep
        .iter()
        .copied()
        .chain(rep.iter().map(|&j| j + m))
        .collect();
    a.select(Axis(0), &idx).select(Axis(1), &idx)
}

/// Rows and columns `j` repeated `n_j` times, for the `M × M` pure-state block.
pub fn reduce_pattern_half(b: &Array2<C64>, pattern: &PhotonPattern) -> Array2<C64> {
    let idx = pattern.repeated_modes();
    b.select(Axis(0), &idx).select(Axis(1), &idx)
}

fn check_hafnian_input(a: &Array2<C64>) -> OracleResult<()> {
    let n = a.nrows();
    if n % 2 == 1 || a.ncols() != n {
        return Err(OracleError::OddDimension(n));
    }
    let scale = a.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[[i, j]] - a[[j, i]]).norm());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(OracleError::NotSymmetric(worst));
    }
    Ok(())
}

/// Sum over perfect matchings, enumerated by pairing the first free index.
pub fn hafnian(a: &Array2<C64>) -> OracleResult<C64> {
    check_hafnian_input(a)?;
    fn rec(a: &Array2<C64>, free: &mut Vec<usize>) -> C64 {
        if free.is_empty() {
            return C64::new(1.0, 0.0);
        }
        let first = free.remove(0);
        let mut total = C64::new(0.0, 0.0);
        for k in 0..free.len() {
            let partner = free.remove(k);
            let w = a[[first, partner]];
            if w != C64::new(0.0, 0.0) {
                total += w * rec(a, free);
            }
            free.insert(k, partner);
        }
        free.insert(0, first);
        total
    }
    let mut free: Vec<usize> = (0..a.nrows()).collect();
    Ok(rec(a, &mut free))
}

/// Hafnian by dynamic programming over index subsets: the value on a subset
/// is built bottom-up from subsets two elements smaller.
pub fn hafnian_subset_dp(a: &Array2<C64>) -> OracleResult<C64> {
    check_hafnian_input(a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(C64::new(1.0, 0.0));
    }
    assert!(n <= 24, "subset DP limited to 24 indices");
    let full = (1usize << n) - 1;
    let mut table = vec![C64::new(0.0, 0.0); 1 << n];
    table[0] = C64::new(1.0, 0.0);
    for mask in 1..=full {
        if mask.count_ones() % 2 == 1 {
            continue;
        }
        let hi = usize::BITS - 1 - mask.leading_zeros();
        let hi = hi as usize;
        let rest = mask & !(1 << hi);
        let mut acc = C64::new(0.0, 0.0);
        let mut bits = rest;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            acc += a[[hi, j]] * table[rest & !(1 << j)];
        }
        table[mask] = acc;
    }
    Ok(table[full])
}

/// Photon-count probability from the full `A` matrix.
pub fn gbs_probability(c: &GaussianCovariance, pattern: &PhotonPattern) -> OracleResult<f64> {
    if pattern.counts.len() != c.num_modes {
        return Err(OracleError::LengthMismatch {
            expected: c.num_modes,
            got: pattern.counts.len(),
        });
    }
    let det = c.determinant()?;
    if pattern.total() == 0 {
        return Ok(1.0 / det.sqrt());
    }
    let a = build_a(c)?;
    let haf = hafnian(&reduce_pattern(&a, pattern))?;
    Ok(haf.re / (pattern.factorial() * det.sqrt()))
}

/// Pure-squeezing probability `|Haf(B_n)|² / (n! Π cosh r)`.
pub fn gbs_probability_pure(
    r: &[f64],
    u: &Array2<C64>,
    pattern: &PhotonPattern,
) -> OracleResult<f64> {
    let b = build_b(r, u)?;
    if pattern.counts.len() != b.nrows() {
        return Err(OracleError::LengthMismatch {
            expected: b.nrows(),
            got: pattern.counts.len(),
        });
    }
    if pattern.total() % 2 == 1 {
        return Ok(0.0);
    }
    let norm: f64 = r.iter().map(|x| x.cosh()).product();
    let haf = hafnian(&reduce_pattern_half(&b, pattern))?;
    Ok(haf.norm_sqr() / (pattern.factorial() * norm))
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Pattern probability averaged over independent random input phases.
/// Each draw absorbs the phases into the circuit as `U diag(e^{iθ})`.
pub fn dephased_probability(
    r: &[f64],
    circuit: &LayeredCircuit,
    dist: &PhaseDistribution,
    pattern: &PhotonPattern,
    num_mc: usize,
    seed: u64,
) -> OracleResult<Estimate> {
    let u = compose_circuit(circuit)?;
    let m = u.nrows();
    let mut full_r = r.to_vec();
    if full_r.len() > m {
        return Err(OracleError::LengthMismatch {
            expected: m,
            got: r.len(),
        });
    }
    full_r.resize(m, 0.0);
    if matches!(dist, PhaseDistribution::None) {
        let p = gbs_probability(&covariance_from_circuit(&full_r, &u)?, pattern)?;
        return Ok(Estimate {
            mean: p,
            std_error: 0.0,
            samples: 1,
        });
    }
    if num_mc == 0 {
        return Err(OracleError::NoSamples);
    }
    build_b(&full_r, &u)?;
    let chunks = num_mc.div_ceil(MC_CHUNK);
    let partials: Vec<OracleResult<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(c as u64)));
            let count = MC_CHUNK.min(num_mc - c * MC_CHUNK);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..count {
                let mut ut = u.clone();
                for (j, mut col) in ut.axis_iter_mut(Axis(1)).enumerate() {
                    if full_r[j] != 0.0 {
                        let phase = C64::from_polar(1.0, dist.sample(&mut rng));
                        col.mapv_inplace(|z| z * phase);
                    }
                }
                let p = gbs_probability_pure(&full_r, &ut, pattern)?;
                sum += p;
                sum_sq += p * p;
            }
            Ok((sum, sum_sq))
        })
        .collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for part in partials {
        let (a, b) = part?;
        sum += a;
        sum_sq += b;
    }
    let n = num_mc as f64;
    let mean = sum / n;
    let var = if num_mc > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(Estimate {
        mean,
        std_error: (var / n).sqrt(),
        samples: num_mc,
    })
}

fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::<C64>::zeros((ra * rb, ca * cb));
    for i in 0..ra {
        for j in 0..ca {
            out.slice_mut(s![i * rb..(i + 1) * rb, j * cb..(j + 1) * cb])
                .assign(&b.mapv(|z| z * a[[i, j]]));
        }
    }
    out
}

/// Product of local densities; site 0 is the most significant index.
pub fn dense_product(densities: &[LocalDensity], limit: usize) -> OracleResult<Array2<C64>> {
    let d = densities.first().map_or(1, |r| r.dim());
    let side = d.checked_pow(densities.len() as u32).unwrap_or(usize::MAX);
    if side > limit {
        return Err(OracleError::SizeLimit { side, limit });
    }
    let mut rho = Array2::<C64>::from_elem((1, 1), C64::new(1.0, 0.0));
    for r in densities {
        rho = kron(&rho, r.elements());
    }
    Ok(rho)
}

/// `ρ ↦ G ρ` for a two-site operator `G` on sites `(site, site + 1)`.
fn left_apply(
    rho: &Array2<C64>,
    gate: &Array2<C64>,
    site: usize,
    d: usize,
    m: usize,
) -> Array2<C64> {
    let side = rho.nrows();
    let left = d.pow(site as u32);
    let right = d.pow((m - site - 2) as u32);
    let dd = d * d;
    let view = rho
        .to_shape((left, dd, right * side))
        .expect("row-major dense matrix");
    let mut out = ndarray::Array3::<C64>::zeros((left, dd, right * side));
    for l in 0..left {
        out.index_axis_mut(Axis(0), l)
            .assign(&gate.dot(&view.index_axis(Axis(0), l)));
    }
    out.into_shape_with_order((side, side))
        .expect("shape preserved")
}

fn conjugate_two_site(
    rho: &Array2<C64>,
    gate: &Array2<C64>,
    site: usize,
    d: usize,
    m: usize,
) -> Array2<C64> {
    let once = left_apply(rho, gate, site, d, m);
    let adj = once.t().mapv(|z| z.conj());
    let twice = left_apply(&adj, gate, site, d, m);
    twice.t().mapv(|z| z.conj())
}

fn digits(mut index: usize, d: usize, m: usize) -> Vec<usize> {
    let mut out = vec![0; m];
    for k in (0..m).rev() {
        out[k] = index % d;
        index /= d;
    }
    out
}

/// Dense Fock-space evolution after each layer. Output phases are applied
/// to the final snapshot.
pub fn dense_evolve_history(
    densities: &[LocalDensity],
    circuit: &LayeredCircuit,
    d: usize,
    limit: usize,
) -> OracleResult<Vec<Array2<C64>>> {
    circuit.validate()?;
    let m = circuit.num_modes;
    if densities.len() != m {
        return Err(OracleError::LengthMismatch {
            expected: m,
            got: densities.len(),
        });
    }
    if let Some(bad) = densities.iter().find(|r| r.dim() != d) {
        return Err(OracleError::LengthMismatch {
            expected: d,
            got: bad.dim(),
        });
    }
    let mut rho = dense_product(densities, limit)?;
    let mut history = Vec::with_capacity(circuit.layers.len());
    for layer in &circuit.layers {
        for p in layer {
            let g4 = fock_beamsplitter_gate(p, d);
            let g = g4
                .into_shape_with_order((d * d, d * d))
                .expect("square gate");
            rho = conjugate_two_site(&rho, &g, p.site, d, m);
        }
        history.push(rho.clone());
    }
    if let (Some(phases), Some(last)) = (&circuit.output_phases, history.last_mut()) {
        let side = last.nrows();
        let phase_of: Vec<f64> = (0..side)
            .map(|i| {
                digits(i, d, m)
                    .iter()
                    .zip(phases)
                    .map(|(&n, &phi)| n as f64 * phi)
                    .sum()
            })
            .collect();
        for ((a, b), z) in last.indexed_iter_mut() {
            *z *= C64::from_polar(1.0, phase_of[a] - phase_of[b]);
        }
    }
    Ok(history)
}

/// Final density matrix of [`dense_evolve_history`].
pub fn dense_evolve(
    densities: &[LocalDensity],
    circuit: &LayeredCircuit,
    d: usize,
) -> OracleResult<Array2<C64>> {
    let mut history = dense_evolve_history(densities, circuit, d, DENSE_SIDE_LIMIT)?;
    match history.pop() {
        Some(rho) => Ok(rho),
        None => dense_product(densities, DENSE_SIDE_LIMIT),
    }
}

/// Diagonal element of a dense density matrix at a photon pattern.
pub fn dense_pattern_probability(rho: &Array2<C64>, pattern: &PhotonPattern, d: usize) -> f64 {
    let idx = pattern.counts.iter().fold(0, |acc, &n| acc * d + n);
    rho[[idx, idx]].re
}

/// Single-site marginal of a dense density matrix.
pub fn dense_site_density(rho: &Array2<C64>, site: usize, d: usize, m: usize) -> Array2<C64> {
    let left = d.pow(site as u32);
    let right = d.pow((m - site - 1) as u32);
    let t = rho
        .to_shape((left, d, right, left, d, right))
        .expect("dense layout");
    let mut out = Array2::<C64>::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for l in 0..left {
                for r in 0..right {
                    acc += t[[l, a, r, l, b, r]];
                }
            }
            out[[a, b]] = acc;
        }
    }
    out
}

fn unit_singular_values(mat: Array2<C64>) -> OracleResult<Vec<f64>> {
    let (_, sv, _) = mat.svd(false, false)?;
    let norm = sv.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out: Vec<f64> = sv.iter().map(|x| x / norm).collect();
    out.sort_by(|a, b| b.total_cmp(a));
    Ok(out)
}

/// Operator Schmidt spectrum of `ρ` across the cut after site `cut`.
pub fn dense_operator_schmidt(
    rho: &Array2<C64>,
    cut: usize,
    d: usize,
    m: usize,
) -> OracleResult<Vec<f64>> {
    let dl = d.pow(cut as u32);
    let dr = d.pow((m - cut) as u32);
    let t = rho.to_shape((dl, dr, dl, dr)).expect("dense layout");
    let mat = t
        .permuted_axes([0, 2, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((dl * dl, dr * dr))
        .expect("matricization");
    unit_singular_values(mat)
}

/// Schmidt spectrum of a dense pure state across the cut after site `cut`.
pub fn dense_state_schmidt(psi: &[C64], cut: usize, d: usize, m: usize) -> OracleResult<Vec<f64>> {
    let dl = d.pow(cut as u32);
    let dr = d.pow((m - cut) as u32);
    let mat = Array2::from_shape_vec((dl, dr), psi.to_vec()).map_err(|_| {
        OracleError::LengthMismatch {
            expected: dl * dr,
            got: psi.len(),
        }
    })?;
    unit_singular_values(mat)
}

/// Per-layer operator spectra of a dense evolution, as regression golden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseReference {
    pub num_modes: usize,
    pub local_dim: usize,
    /// `spectra[layer][bond - 1]`.
    pub spectra: Vec<Vec<Vec<f64>>>,
    /// Photon-number distribution per site after the last layer.
    pub site_populations: Vec<Vec<f64>>,
    pub final_trace: f64,
}

impl DenseReference {
    pub fn compute(
        densities: &[LocalDensity],
        circuit: &LayeredCircuit,
        d: usize,
    ) -> OracleResult<Self> {
        let m = circuit.num_modes;
        let history = dense_evolve_history(densities, circuit, d, DENSE_SIDE_LIMIT)?;
        let spectra = history
            .iter()
            .map(|rho| {
                (1..m)
                    .map(|k| dense_operator_schmidt(rho, k, d, m))
                    .collect::<OracleResult<Vec<_>>>()
            })
            .collect::<OracleResult<Vec<_>>>()?;
        let last = match history.last() {
            Some(r) => r.clone(),
            None => dense_product(densities, DENSE_SIDE_LIMIT)?,
        };
        let site_populations = (0..m)
            .map(|j| {
                dense_site_density(&last, j, d, m)
                    .diag()
                    .iter()
                    .map(|z| z.re)
                    .collect()
            })
            .collect();
        let final_trace = last.diag().iter().map(|z| z.re).sum();
        Ok(Self {
            num_modes: m,
            local_dim: d,
            spectra,
            site_populations,
            final_trace,
        })
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{max_entropy, von_neumann_entropy};
    use crate::fock_local::{dephase_local, squeezed_vacuum_amplitudes};
    use crate::interferometer::{sample_haar_layers_seeded, BeamsplitterParams};
    use ndarray_linalg::Eigh;
    use ndarray_linalg::UPLO;
    use rand::Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn random_complex(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<C64> {
        Array2::from_shape_fn((n, m), |_| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Array2<C64> {
        let g = random_complex(rng, n, n);
        &g + &g.t()
    }

    fn random_unitary(rng: &mut ChaCha8Rng, n: usize) -> Array2<C64> {
        let h = random_complex(rng, n, n);
        let herm = &h + &h.t().mapv(|z| z.conj());
        let (_, v) = herm.eigh(UPLO::Lower).unwrap();
        v
    }

    /// Ryser formula with Gray-code-free subset loop.
    fn permanent_ryser(w: &Array2<C64>) -> C64 {
        let n = w.nrows();
        let mut total = C64::new(0.0, 0.0);
        for mask in 1usize..(1 << n) {
            let mut prod = C64::new(1.0, 0.0);
            for i in 0..n {
                let mut row = C64::new(0.0, 0.0);
                for j in 0..n {
                    if mask & (1 << j) != 0 {
                        row += w[[i, j]];
                    }
                }
                prod *= row;
            }
            let sign = if (n - mask.count_ones() as usize) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            total += prod * sign;
        }
        total
    }

    fn bipartite(w: &Array2<C64>) -> Array2<C64> {
        let n = w.nrows();
        let mut a = Array2::<C64>::zeros((2 * n, 2 * n));
        a.slice_mut(s![..n, n..]).assign(w);
        a.slice_mut(s![n.., ..n]).assign(&w.t());
        a
    }

    #[test]
    fn hafnian_trivia() {
        let a = ndarray::arr2(&[[c(1.0), c(2.5)], [c(2.5), c(3.0)]]);
        assert_eq!(hafnian(&a).unwrap(), c(2.5));
        assert_eq!(hafnian(&Array2::zeros((0, 0))).unwrap(), c(1.0));
        assert_eq!(hafnian_subset_dp(&Array2::zeros((0, 0))).unwrap(), c(1.0));
        assert!(matches!(
            hafnian(&Array2::zeros((3, 3))),
            Err(OracleError::OddDimension(3))
        ));
        let asym = ndarray::arr2(&[[c(0.0), c(1.0)], [c(2.0), c(0.0)]]);
        assert!(matches!(hafnian(&asym), Err(OracleError::NotSymmetric(_))));
    }

    #[test]
    fn hafnian_of_bipartite_is_permanent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in [3, 4] {
            for _ in 0..50 {
                let w = random_complex(&mut rng, n, n);
                let perm = permanent_ryser(&w);
                let haf = hafnian(&bipartite(&w)).unwrap();
                assert!((haf - perm).norm() <= 1e-9 * perm.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn hafnian_algorithms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for n in [2, 4, 6, 8] {
            for _ in 0..10 {
                let a = random_symmetric(&mut rng, n);
                let x = hafnian(&a).unwrap();
                let y = hafnian_subset_dp(&a).unwrap();
                assert!((x - y).norm() <= 1e-9 * x.norm().max(1.0));
            }
        }
    }

    #[test]
    fn reduce_pattern_examples() {
        let m = 4;
        let a = Array2::from_shape_fn((2 * m, 2 * m), |(i, j)| c((10 * i + j) as f64));
        let red = reduce_pattern(&a, &PhotonPattern::new(vec![0, 0, 1, 1]));
        let idx = [2, 3, 6, 7];
        assert_eq!(red.dim(), (4, 4));
        for (p, &i) in idx.iter().enumerate() {
            for (q, &j) in idx.iter().enumerate() {
                assert_eq!(red[[p, q]], a[[i, j]]);
            }
        }
        assert_eq!(
            reduce_pattern(&a, &PhotonPattern::new(vec![0; 4])).dim(),
            (0, 0)
        );
        let twice = reduce_pattern(&a, &PhotonPattern::new(vec![2, 0, 0, 0]));
        let idx = [0, 0, 4, 4];
        for (p, &i) in idx.iter().enumerate() {
            for (q, &j) in idx.iter().enumerate() {
                assert_eq!(twice[[p, q]], a[[i, j]]);
            }
        }
    }

    #[test]
    fn vacuum_covariance() {
        let u = Array2::<C64>::eye(3);
        let cov = covariance_from_circuit(&[0.0; 3], &u).unwrap();
        assert_eq!(cov.sigma_q, Array2::<C64>::eye(6));
        assert!(build_a(&cov).unwrap().iter().all(|z| z.norm() < 1e-15));
        assert_eq!(
            gbs_probability(&cov, &PhotonPattern::new(vec![0; 3])).unwrap(),
            1.0
        );
        let bad = Array2::<C64>::eye(3).mapv(|z| z * 1.1);
        assert!(matches!(
            covariance_from_circuit(&[0.0; 3], &bad),
            Err(OracleError::NonUnitary(_))
        ));
    }

    /// Symplectic matrix of `exp((r/2)(a² − a†²))` in `(x, p)` order acting on the vacuum.
    #[test]
    fn single_mode_matches_symplectic_construction() {
        let r = 0.4;
        let cov = covariance_from_circuit(&[r], &Array2::eye(1)).unwrap();
        let s = ndarray::arr2(&[[(-r).exp(), 0.0], [0.0, r.exp()]]);
        let expected = s.dot(&s.t());
        let got = cov.quadrature_covariance();
        for (x, y) in got.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (ev, _) = got.eigh(UPLO::Lower).unwrap();
        assert!((ev[0] - (-0.8f64).exp()).abs() < 1e-12);
        assert!((ev[1] - 0.8f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn mean_photon_number_and_hermiticity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u = random_unitary(&mut rng, 4);
        let r = [0.4, 0.7, 0.0, 0.2];
        let cov = covariance_from_circuit(&r, &u).unwrap();
        let expected: f64 = r.iter().map(|x: &f64| x.sinh().powi(2)).sum();
        assert!((cov.mean_photon_number() - expected).abs() < 1e-10);
        assert!(cov.hermiticity_error() < 1e-12);
        let det = cov.determinant().unwrap();
        let cosh_sq: f64 = r.iter().map(|x: &f64| x.cosh().powi(2)).product();
        assert!((det - cosh_sq).abs() < 1e-10 && det >= 1.0);
    }

    #[test]
    fn a_matrix_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let u = random_unitary(&mut rng, 3);
        let r = [0.4, 0.4, 0.0];
        let cov = covariance_from_circuit(&r, &u).unwrap();
        let a = build_a(&cov).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((a[[i, j]] - a[[j, i]]).norm() < 1e-12);
            }
        }
        let c_block: f64 = a
            .slice(s![..3, 3..])
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(c_block < 1e-12);
        let b = build_b(&r, &u).unwrap();
        for (x, y) in a.slice(s![..3, ..3]).iter().zip(b.iter()) {
            assert!((x - y.conj()).norm() < 1e-12);
        }
        for (x, y) in a.slice(s![3.., 3..]).iter().zip(b.iter()) {
            assert!((x - y).norm() < 1e-12);
        }
        let lossy = build_a(&cov.with_loss(0.5).unwrap()).unwrap();
        let c_lossy: f64 = lossy
            .slice(s![..3, 3..])
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(c_lossy > 1e-3);
    }

    #[test]
    fn single_mode_probabilities_match_fock_amplitudes() {
        let r = 0.4;
        let amps = squeezed_vacuum_amplitudes(r, 40).unwrap();
        let cov = covariance_from_circuit(&[r], &Array2::eye(1)).unwrap();
        let mut total = 0.0;
        for n in 0..=8 {
            let p = gbs_probability(&cov, &PhotonPattern::new(vec![n])).unwrap();
            assert!((p - amps[n].norm_sqr()).abs() < 1e-10, "n = {n}");
            total += p;
        }
        assert!(1.0 - total < 1e-4 && total <= 1.0 + 1e-12);
        let p0 = gbs_probability(&cov, &PhotonPattern::new(vec![0])).unwrap();
        assert_eq!(p0, 1.0 / cov.determinant().unwrap().sqrt());
    }

    #[test]
    fn full_and_pure_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for m in 1..=3 {
            let u = random_unitary(&mut rng, m);
            let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..0.8)).collect();
            let cov = covariance_from_circuit(&r, &u).unwrap();
            let mut counts = vec![0; m];
            loop {
                if counts.iter().sum::<usize>() <= 4 {
                    let pat = PhotonPattern::new(counts.clone());
                    let p3 = gbs_probability(&cov, &pat).unwrap();
                    let p6 = gbs_probability_pure(&r, &u, &pat).unwrap();
                    assert!((p3 - p6).abs() < 1e-10, "{counts:?}");
                }
                let mut k = 0;
                while k < m {
                    counts[k] += 1;
                    if counts[k] <= 4 {
                        break;
                    }
                    counts[k] = 0;
                    k += 1;
                }
                if k == m {
                    break;
                }
            }
        }
    }

    #[test]
    fn lossy_probability_matches_dense_channel() {
        let r = 0.5;
        let eta = 0.6;
        let d = 30;
        let cov = covariance_from_circuit(&[r], &Array2::eye(1))
            .unwrap()
            .with_loss(eta)
            .unwrap();
        let rho = LocalDensity::squeezed(r, d)
            .unwrap()
            .with_loss(eta)
            .unwrap();
        for n in 0..5 {
            let p = gbs_probability(&cov, &PhotonPattern::new(vec![n])).unwrap();
            assert!((p - rho.elements()[[n, n]].re).abs() < 1e-10);
        }
    }

    fn two_mode_circuit() -> LayeredCircuit {
        LayeredCircuit {
            num_modes: 2,
            layers: vec![
                vec![BeamsplitterParams {
                    theta: 0.7,
                    phi: 0.3,
                    site: 0,
                }],
                vec![],
            ],
            output_phases: Some(vec![0.2, -1.1]),
        }
    }

    #[test]
    fn undephased_equals_gbs_probability() {
        let circuit = two_mode_circuit();
        let u = compose_circuit(&circuit).unwrap();
        let pat = PhotonPattern::new(vec![1, 1]);
        let est =
            dephased_probability(&[0.4, 0.4], &circuit, &PhaseDistribution::None, &pat, 10, 1)
                .unwrap();
        let exact =
            gbs_probability(&covariance_from_circuit(&[0.4, 0.4], &u).unwrap(), &pat).unwrap();
        assert_eq!(est.mean, exact);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn dephased_single_mode_is_phase_blind() {
        let circuit = LayeredCircuit {
            num_modes: 1,
            layers: vec![vec![]],
            output_phases: None,
        };
        let pat = PhotonPattern::new(vec![2]);
        let est =
            dephased_probability(&[0.4], &circuit, &PhaseDistribution::Uniform, &pat, 2000, 5)
                .unwrap();
        let rho = dephase_local(
            &LocalDensity::squeezed(0.4, 30).unwrap(),
            &PhaseDistribution::Uniform,
        );
        assert!((est.mean - rho.elements()[[2, 2]].re).abs() <= 3.0 * est.std_error + 1e-12);
    }

    #[test]
    fn dephased_matches_dense_channel_pipeline() {
        let circuit = two_mode_circuit();
        let d = 12;
        let dist = PhaseDistribution::wrapped(0.5).unwrap();
        let inputs: Vec<LocalDensity> = (0..2)
            .map(|_| dephase_local(&LocalDensity::squeezed(0.4, d).unwrap(), &dist))
            .collect();
        let rho = dense_evolve(&inputs, &circuit, d).unwrap();
        for counts in [vec![1, 1], vec![2, 0], vec![2, 2], vec![3, 1]] {
            let pat = PhotonPattern::new(counts);
            let est = dephased_probability(&[0.4, 0.4], &circuit, &dist, &pat, 20_000, 9).unwrap();
            let dense = dense_pattern_probability(&rho, &pat, d);
            assert!(
                (est.mean - dense).abs() <= 3.0 * est.std_error,
                "{pat:?}: {} vs {dense}",
                est.mean
            );
        }
    }

    #[test]
    fn dephased_is_deterministic_per_seed() {
        let circuit = two_mode_circuit();
        let dist = PhaseDistribution::wrapped(0.9).unwrap();
        let pat = PhotonPattern::new(vec![1, 1]);
        let a = dephased_probability(&[0.4, 0.4], &circuit, &dist, &pat, 5000, 3).unwrap();
        let b = dephased_probability(&[0.4, 0.4], &circuit, &dist, &pat, 5000, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn broad_wrapped_noise_approaches_uniform() {
        let circuit = two_mode_circuit();
        let pat = PhotonPattern::new(vec![1, 1]);
        let wide = dephased_probability(
            &[0.4, 0.4],
            &circuit,
            &PhaseDistribution::wrapped(20.0).unwrap(),
            &pat,
            20_000,
            4,
        )
        .unwrap();
        let flat = dephased_probability(
            &[0.4, 0.4],
            &circuit,
            &PhaseDistribution::Uniform,
            &pat,
            20_000,
            5,
        )
        .unwrap();
        let se = (wide.std_error.powi(2) + flat.std_error.powi(2)).sqrt();
        assert!((wide.mean - flat.mean).abs() <= 3.0 * se);
    }

    #[test]
    fn dense_evolution_basics() {
        let d = 4;
        let inputs: Vec<LocalDensity> = (0..3)
            .map(|j| {
                if j < 2 {
                    LocalDensity::squeezed(0.4, d).unwrap()
                } else {
                    LocalDensity::vacuum(d).unwrap()
                }
            })
            .collect();
        let identity = LayeredCircuit {
            num_modes: 3,
            layers: vec![vec![], vec![], vec![]],
            output_phases: None,
        };
        let rho0 = dense_product(&inputs, DENSE_SIDE_LIMIT).unwrap();
        assert_eq!(dense_evolve(&inputs, &identity, d).unwrap(), rho0);

        let circuit = sample_haar_layers_seeded(3, 17).unwrap();
        let rho = dense_evolve(&inputs, &circuit, d).unwrap();
        let purity = rho.dot(&rho).diag().iter().map(|z| z.re).sum::<f64>();
        let tr = rho.diag().iter().map(|z| z.re).sum::<f64>();
        assert!(tr <= rho0.diag().iter().map(|z| z.re).sum::<f64>() + 1e-12);
        // Truncation only removes weight; the state stays rank one.
        assert!((purity - tr * tr).abs() < 1e-10);

        let big: Vec<LocalDensity> = (0..7).map(|_| LocalDensity::vacuum(4).unwrap()).collect();
        let circuit7 = sample_haar_layers_seeded(7, 1).unwrap();
        assert!(matches!(
            dense_evolve(&big, &circuit7, 4),
            Err(OracleError::SizeLimit { .. })
        ));
    }

    #[test]
    fn unitary_pure_input_keeps_purity() {
        // Only the one-photon sector is populated, so the cutoff never bites.
        let d = 3;
        let mut one = Array2::<C64>::zeros((d, d));
        one[[1, 1]] = c(1.0);
        let inputs = vec![
            LocalDensity::from_matrix(one).unwrap(),
            LocalDensity::vacuum(d).unwrap(),
            LocalDensity::vacuum(d).unwrap(),
        ];
        let circuit = sample_haar_layers_seeded(3, 4).unwrap();
        let rho = dense_evolve(&inputs, &circuit, d).unwrap();
        let purity = rho.dot(&rho).diag().iter().map(|z| z.re).sum::<f64>();
        assert!((purity - 1.0).abs() < 1e-10);
    }

    #[test]
    fn operator_schmidt_of_product_and_pure_states() {
        let d = 3;
        let a = LocalDensity::squeezed(0.3, d).unwrap();
        let b = LocalDensity::vacuum(d).unwrap();
        let prod = dense_product(&[a, b], DENSE_SIDE_LIMIT).unwrap();
        let spectrum = dense_operator_schmidt(&prod, 1, d, 2).unwrap();
        assert!((spectrum[0] - 1.0).abs() < 1e-12 && spectrum[1..].iter().all(|&x| x < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let raw = random_complex(&mut rng, d * d, 1);
        let norm = raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let psi: Vec<C64> = raw.iter().map(|z| z / norm).collect();
        let rho = Array2::from_shape_fn((d * d, d * d), |(i, j)| psi[i] * psi[j].conj());
        let state = dense_state_schmidt(&psi, 1, d, 2).unwrap();
        let op = dense_operator_schmidt(&rho, 1, d, 2).unwrap();
        assert!((von_neumann_entropy(&op) - 2.0 * von_neumann_entropy(&state)).abs() < 1e-10);
    }

    #[test]
    fn reference_round_trips_and_has_layer_structure() {
        let d = 3;
        let inputs = vec![
            LocalDensity::squeezed(0.4, d).unwrap(),
            LocalDensity::squeezed(0.4, d).unwrap(),
            LocalDensity::vacuum(d).unwrap(),
        ];
        let circuit = sample_haar_layers_seeded(3, 8).unwrap();
        let reference = DenseReference::compute(&inputs, &circuit, d).unwrap();
        assert_eq!(reference.spectra.len(), 3);
        assert!(reference.spectra.iter().all(|l| l.len() == 2));
        let back = DenseReference::from_json(&reference.to_json().unwrap()).unwrap();
        assert_eq!(back, reference);
        let (s, layer, bond) = max_entropy(&reference.spectra, 1.0).unwrap();
        assert!(s > 0.0 && layer >= 1 && bond >= 1);
    }
}
