//! Single-mode objects in the truncated Fock basis.
//!
//! Conventions used throughout the crate:
//!
//! - The squeezed vacuum with real parameter `r ≥ 0` has number-basis
//!   amplitudes `c_{2n} = (−tanh r)^n √((2n)!) / (2^n n! √cosh r)` and zero odd
//!   amplitudes. This is the state `exp((r/2)(a² − a†²))|0⟩`.
//! - A phase rotation by `θ` is `exp(−iθ n̂)`; averaging it over a phase
//!   distribution multiplies `ρ_{mn}` by `∫ P(θ) e^{−iθ(m−n)} dθ`.
//! - A truncated state is never renormalized here: the missing weight is the
//!   cutoff leakage.

use std::f64::consts::PI;

use ndarray::Array2;
use ndarray_linalg::{Eigh, UPLO};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::binomial;
use crate::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FockError {
    #[error("wrapped-Gaussian density requested for a `{0}` phase distribution")]
    WrongKind(&'static str),
    #[error("invalid phase width sigma = {0}")]
    InvalidSigma(f64),
    #[error("local cutoff must be at least 1")]
    ZeroCutoff,
    #[error("invalid squeezing parameter r = {0}")]
    InvalidSqueezing(f64),
    #[error("density matrix must be square and non-empty, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("transmissivity {0} outside [0, 1]")]
    InvalidTransmissivity(f64),
}

pub type FockResult<T> = Result<T, FockError>;

/// Distribution of the random phase applied independently to every input.
///
/// The mean phase is fixed to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseDistribution {
    /// No phase noise (a point mass at zero).
    None,
    /// A normal distribution with standard deviation `sigma` (radians)
    /// wrapped onto `[−π, π)`.
    WrappedGaussian { sigma: f64 },
    /// The flat distribution `1/(2π)`; complete dephasing.
    Uniform,
}

impl PhaseDistribution {
    pub fn wrapped(sigma: f64) -> FockResult<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(FockError::InvalidSigma(sigma));
        }
        Ok(Self::WrappedGaussian { sigma })
    }

    /// Short label used in CSV output: `none`, `wrapped` or `uniform`.
    pub fn label(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::WrappedGaussian { .. } => "wrapped",
            Self::Uniform => "uniform",
        }
    }

    /// Width of the unwrapped Gaussian, if any.
    pub fn sigma(&self) -> Option<f64> {
        match *self {
            Self::WrappedGaussian { sigma } => Some(sigma),
            _ => None,
        }
    }

    /// Factor multiplying `ρ_{mn}` under the dephasing channel.
    pub fn decoherence_factor(&self, m: usize, n: usize) -> f64 {
        if m == n {
            return 1.0;
        }
        match *self {
            Self::None => 1.0,
            Self::WrappedGaussian { sigma } => {
                let k = m.abs_diff(n) as f64;
                (-0.5 * sigma * sigma * k * k).exp()
            }
            Self::Uniform => 0.0,
        }
    }

    /// Circular variance `1 − |E[e^{iθ}]|`.
    pub fn circular_variance(&self) -> f64 {
        1.0 - self.decoherence_factor(0, 1)
    }

    /// Draws one phase in `[−π, π)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::WrappedGaussian { sigma } => {
                if sigma == 0.0 {
                    return 0.0;
                }
                let normal = Normal::new(0.0, sigma).expect("sigma validated on construction");
                wrap_phase(normal.sample(rng))
            }
            Self::Uniform => rng.random_range(-PI..PI),
        }
    }
}

/// Maps an angle onto `[−π, π)`.
pub fn wrap_phase(theta: f64) -> f64 {
    theta - 2.0 * PI * ((theta + PI) / (2.0 * PI)).floor()
}

/// Density of the wrapped Gaussian at `theta`.
///
/// The wrap sum runs over `|k| ≤ ceil(8σ/(2π)) + 2`, which leaves a tail far
/// below `1e-12` for every width.
pub fn wrapped_gaussian_pdf(theta: f64, dist: &PhaseDistribution) -> FockResult<f64> {
    let sigma = match *dist {
        PhaseDistribution::WrappedGaussian { sigma } => sigma,
        other => return Err(FockError::WrongKind(other.label())),
    };
    if sigma <= 0.0 || !sigma.is_finite() {
        // A zero-width wrapped Gaussian is a point mass, which has no density.
        return Err(FockError::InvalidSigma(sigma));
    }
    let kmax = (8.0 * sigma / (2.0 * PI)).ceil() as i64 + 2;
    let norm = 1.0 / (2.0 * PI * sigma * sigma).sqrt();
    let sum: f64 = (-kmax..=kmax)
        .map(|k| {
            let x = theta + 2.0 * PI * k as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(norm * sum)
}

/// Number-basis amplitudes of the single-mode squeezed vacuum, truncated to
/// `d` levels (not renormalized).
pub fn squeezed_vacuum_amplitudes(r: f64, d: usize) -> FockResult<Vec<C64>> {
    if d == 0 {
        return Err(FockError::ZeroCutoff);
    }
    if !r.is_finite() || r < 0.0 {
        return Err(FockError::InvalidSqueezing(r));
    }
    let t = r.tanh();
    let mut amps = vec![C64::new(0.0, 0.0); d];
    let mut c = 1.0 / r.cosh().sqrt();
    let mut n = 0;
    while 2 * n < d {
        amps[2 * n] = C64::new(c, 0.0);
        // c_{2n+2} / c_{2n} = −tanh r · √((2n+1)(2n+2)) / (2(n+1))
        let (a, b) = ((2 * n + 1) as f64, (2 * n + 2) as f64);
        c *= -t * (a * b).sqrt() / (2.0 * (n + 1) as f64);
        n += 1;
    }
    Ok(amps)
}

/// Weight of a squeezed vacuum lost by truncating to `d` levels.
pub fn cutoff_leakage(r: f64, d: usize) -> FockResult<f64> {
    let amps = squeezed_vacuum_amplitudes(r, d)?;
    Ok((1.0 - amps.iter().map(|c| c.norm_sqr()).sum::<f64>()).max(0.0))
}

/// Smallest cutoff whose squeezed-vacuum leakage is below `max_leakage`
/// (use `1e-4` unless the trace budget says otherwise).
pub fn suggest_cutoff(r: f64, max_leakage: f64) -> FockResult<usize> {
    let mut d = 1;
    while cutoff_leakage(r, d)? >= max_leakage {
        d += 1;
        if d > 512 {
            return Err(FockError::InvalidSqueezing(r));
        }
    }
    Ok(d)
}

/// A single-mode density matrix in the truncated Fock basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDensity {
    elements: Array2<C64>,
}

impl LocalDensity {
    pub fn from_matrix(elements: Array2<C64>) -> FockResult<Self> {
        let (r, c) = elements.dim();
        if r != c || r == 0 {
            return Err(FockError::NotSquare(r, c));
        }
        Ok(Self { elements })
    }

    /// `|ψ⟩⟨ψ|` for an (unnormalized) amplitude vector.
    pub fn pure(amplitudes: &[C64]) -> FockResult<Self> {
        let d = amplitudes.len();
        if d == 0 {
            return Err(FockError::ZeroCutoff);
        }
        let elements = Array2::from_shape_fn((d, d), |(m, n)| amplitudes[m] * amplitudes[n].conj());
        Ok(Self { elements })
    }

    pub fn vacuum(d: usize) -> FockResult<Self> {
        let mut amps = vec![C64::new(0.0, 0.0); d.max(1)];
        if d == 0 {
            return Err(FockError::ZeroCutoff);
        }
        amps[0] = C64::new(1.0, 0.0);
        Self::pure(&amps)
    }

    pub fn squeezed(r: f64, d: usize) -> FockResult<Self> {
        Self::pure(&squeezed_vacuum_amplitudes(r, d)?)
    }

    pub fn dim(&self) -> usize {
        self.elements.nrows()
    }

    pub fn elements(&self) -> &Array2<C64> {
        &self.elements
    }

    pub fn into_elements(self) -> Array2<C64> {
        self.elements
    }

    pub fn trace(&self) -> f64 {
        self.elements.diag().iter().map(|z| z.re).sum()
    }

    /// Copy rescaled to unit trace.
    pub fn normalized(&self) -> Self {
        let t = self.trace();
        Self {
            elements: self.elements.mapv(|z| z / t),
        }
    }

    pub fn photon_distribution(&self) -> Vec<f64> {
        self.elements.diag().iter().map(|z| z.re).collect()
    }

    pub fn mean_photon_number(&self) -> f64 {
        self.photon_distribution()
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0_f64;
        for m in 0..d {
            for n in 0..d {
                worst = worst.max((self.elements[[m, n]] - self.elements[[n, m]].conj()).norm());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.elements + &self.elements.t().mapv(|z| z.conj())).mapv(|z| z * 0.5);
        let (vals, _) = herm
            .eigh(UPLO::Lower)
            .expect("Hermitian eigendecomposition");
        vals.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Applies the pure-loss channel with transmissivity `eta`.
    pub fn with_loss(&self, eta: f64) -> FockResult<Self> {
        let kraus = loss_kraus(eta, self.dim())?;
        let mut out = Array2::zeros(self.elements.raw_dim());
        for k in &kraus {
            out = out + k.dot(&self.elements).dot(&k.t().mapv(|z| z.conj()));
        }
        Ok(Self { elements: out })
    }
}

/// Applies the phase-averaging channel: `ρ_{mn} ↦ f(m, n) ρ_{mn}`.
pub fn dephase_local(rho: &LocalDensity, dist: &PhaseDistribution) -> LocalDensity {
    let elements = Array2::from_shape_fn(rho.elements.raw_dim(), |(m, n)| {
        rho.elements[[m, n]] * dist.decoherence_factor(m, n)
    });
    LocalDensity { elements }
}

/// Kraus operators `K_0..K_{d−1}` of the pure-loss channel on `d` levels:
/// `K_k |n⟩ = √C(n,k) η^{(n−k)/2} (1−η)^{k/2} |n−k⟩`.
pub fn loss_kraus(eta: f64, d: usize) -> FockResult<Vec<Array2<C64>>> {
    if d == 0 {
        return Err(FockError::ZeroCutoff);
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(FockError::InvalidTransmissivity(eta));
    }
    Ok((0..d)
        .map(|k| {
            let mut op = Array2::zeros((d, d));
            for n in k..d {
                let amp = binomial(n, k).sqrt()
                    * eta.powf((n - k) as f64 / 2.0)
                    * (1.0 - eta).powf(k as f64 / 2.0);
                op[[n - k, n]] = C64::new(amp, 0.0);
            }
            op
        })
        .collect())
}
