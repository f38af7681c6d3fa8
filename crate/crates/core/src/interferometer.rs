//! Haar-random interferometers as brickwork layers of beamsplitters.
//!
//! Mode-matrix convention: the interferometer `Û` acts on creation operators
//! as `Û a_j† Û† = Σ_i U_ij a_i†`, so `U_ij` is the amplitude for a photon
//! entering mode `j` to leave in mode `i`.
//!
//! Random circuits are drawn directly in layered form. The gate order is the
//! one produced by the alternating-nulling (Clements) factorization of a
//! Haar unitary; under the Haar measure each mixing angle is independent
//! with `sin²θ ~ Beta(α, 1)`, where `α` depends only on the gate's position
//! in the elimination order, and each phase is uniform. Scheduling the gates
//! as early as possible yields `M` brickwork layers.

use std::f64::consts::PI;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{binomial, factorial};
use crate::C64;

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("interferometer needs at least one mode")]
    NoModes,
    #[error("beamsplitter at site {site} does not fit in {modes} modes")]
    SiteOutOfRange { site: usize, modes: usize },
    #[error("layer {0} uses a mode twice")]
    OverlappingGates(usize),
    #[error("beamsplitter angles out of range: theta = {theta}, phi = {phi}")]
    BadAngles { theta: f64, phi: f64 },
    #[error("expected {expected} output phases, got {got}")]
    PhaseCount { expected: usize, got: usize },
}

/// A beamsplitter on modes `site` and `site + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamsplitterParams {
    /// Mixing angle in `[0, π/2]`.
    pub theta: f64,
    /// Relative phase in `[0, 2π)`.
    pub phi: f64,
    pub site: usize,
}

impl BeamsplitterParams {
    pub fn validate(&self) -> Result<(), CircuitError> {
        let ok = (0.0..=PI / 2.0).contains(&self.theta) && (0.0..2.0 * PI).contains(&self.phi);
        if ok {
            Ok(())
        } else {
            Err(CircuitError::BadAngles {
                theta: self.theta,
                phi: self.phi,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayeredCircuit {
    pub num_modes: usize,
    /// Applied first to last; gates inside a layer act on disjoint pairs.
    pub layers: Vec<Vec<BeamsplitterParams>>,
    /// Phases `e^{iφ_j}` applied to every output mode after the last layer.
    #[serde(default)]
    pub output_phases: Option<Vec<f64>>,
}

impl LayeredCircuit {
    pub fn validate(&self) -> Result<(), CircuitError> {
        if self.num_modes == 0 {
            return Err(CircuitError::NoModes);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let mut used = vec![false; self.num_modes];
            for g in layer {
                g.validate()?;
                if g.site + 1 >= self.num_modes {
                    return Err(CircuitError::SiteOutOfRange {
                        site: g.site,
                        modes: self.num_modes,
                    });
                }
                if used[g.site] || used[g.site + 1] {
                    return Err(CircuitError::OverlappingGates(l));
                }
                used[g.site] = true;
                used[g.site + 1] = true;
            }
        }
        if let Some(p) = &self.output_phases {
            if p.len() != self.num_modes {
                return Err(CircuitError::PhaseCount {
                    expected: self.num_modes,
                    got: p.len(),
                });
            }
        }
        Ok(())
    }

    pub fn num_gates(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Shape parameter of the `sin²θ` law for gate `p` in elimination round `k`.
fn angle_exponent(p: usize, k: usize) -> usize {
    if p < k.div_ceil(2) {
        2 * p + 1
    } else {
        2 * (k - p)
    }
}

/// Samples an `M`-mode interferometer distributed by the Haar measure.
///
/// The result always has exactly `M` layers; for `M ≤ 2` trailing layers are
/// empty.
pub fn sample_haar_layers<R: Rng + ?Sized>(
    num_modes: usize,
    rng: &mut R,
) -> Result<LayeredCircuit, CircuitError> {
    let m = num_modes;
    if m == 0 {
        return Err(CircuitError::NoModes);
    }
    let mut right = Vec::new();
    let mut left = Vec::new();
    for i in 0..m.saturating_sub(1) {
        let k = i + 1;
        for p in 0..k {
            let alpha = angle_exponent(p, k) as f64;
            let xi: f64 = rng.random();
            let theta = xi.powf(1.0 / (2.0 * alpha)).asin();
            let phi = rng.random_range(0.0..2.0 * PI);
            if i % 2 == 0 {
                right.push(BeamsplitterParams {
                    theta,
                    phi,
                    site: i - p,
                });
            } else {
                left.push(BeamsplitterParams {
                    theta,
                    phi,
                    site: m - 2 - i + p,
                });
            }
        }
    }
    let phases: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut layers = vec![Vec::new(); m];
    let mut depth = vec![0usize; m];
    for g in right.into_iter().chain(left.into_iter().rev()) {
        let l = depth[g.site].max(depth[g.site + 1]);
        depth[g.site] = l + 1;
        depth[g.site + 1] = l + 1;
        layers[l].push(g);
    }
    for layer in &mut layers {
        layer.sort_by_key(|g| g.site);
    }
    Ok(LayeredCircuit {
        num_modes: m,
        layers,
        output_phases: Some(phases),
    })
}

/// [`sample_haar_layers`] driven by a seeded ChaCha8 stream.
pub fn sample_haar_layers_seeded(
    num_modes: usize,
    seed: u64,
) -> Result<LayeredCircuit, CircuitError> {
    sample_haar_layers(num_modes, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `[[cosθ, −e^{−iφ} sinθ], [e^{iφ} sinθ, cosθ]]`
pub fn beamsplitter_unitary(p: &BeamsplitterParams) -> Array2<C64> {
    let (s, c) = p.theta.sin_cos();
    Array2::from_shape_vec(
        (2, 2),
        vec![
            C64::new(c, 0.0),
            -C64::from_polar(s, -p.phi),
            C64::from_polar(s, p.phi),
            C64::new(c, 0.0),
        ],
    )
    .expect("2x2")
}

/// Product of all layer matrices and output phases, in application order.
pub fn compose_circuit(c: &LayeredCircuit) -> Result<Array2<C64>, CircuitError> {
    c.validate()?;
    let m = c.num_modes;
    let mut u = Array2::<C64>::eye(m);
    for layer in &c.layers {
        for g in layer {
            let b = beamsplitter_unitary(g);
            let (r0, r1) = (u.row(g.site).to_owned(), u.row(g.site + 1).to_owned());
            for j in 0..m {
                u[[g.site, j]] = b[[0, 0]] * r0[j] + b[[0, 1]] * r1[j];
                u[[g.site + 1, j]] = b[[1, 0]] * r0[j] + b[[1, 1]] * r1[j];
            }
        }
    }
    if let Some(phases) = &c.output_phases {
        for (i, &ph) in phases.iter().enumerate() {
            let f = C64::from_polar(1.0, ph);
            u.row_mut(i).mapv_inplace(|z| z * f);
        }
    }
    Ok(u)
}

/// Two-mode Fock matrix elements `gate[[m1, m2, n1, n2]] = ⟨m1, m2|Û|n1, n2⟩`
/// on `d` levels per mode. Amplitudes leaving the cutoff are dropped.
pub fn fock_beamsplitter_gate(p: &BeamsplitterParams, d: usize) -> Array4<C64> {
    let b = beamsplitter_unitary(p);
    let pow = |z: C64, e: usize| z.powu(e as u32);
    let mut gate = Array4::<C64>::zeros((d, d, d, d));
    for n1 in 0..d {
        for n2 in 0..d {
            let total = n1 + n2;
            for k in 0..=n1 {
                for l in 0..=n2 {
                    let out1 = k + l;
                    let out2 = total - out1;
                    if out1 >= d || out2 >= d {
                        continue;
                    }
                    let amp = pow(b[[0, 0]], k)
                        * pow(b[[1, 0]], n1 - k)
                        * pow(b[[0, 1]], l)
                        * pow(b[[1, 1]], n2 - l);
                    let weight = binomial(n1, k)
                        * binomial(n2, l)
                        * (factorial(out1) * factorial(out2) / (factorial(n1) * factorial(n2)))
                            .sqrt();
                    gate[[out1, out2, n1, n2]] += amp * weight;
                }
            }
        }
    }
    gate
}

/// Diagonal of the single-mode phase gate `|n⟩ ↦ e^{iφn}|n⟩`.
pub fn fock_phase_gate(phi: f64, d: usize) -> Vec<C64> {
    (0..d)
        .map(|n| C64::from_polar(1.0, phi * n as f64))
        .collect()
}
