//! Entanglement entropies of Schmidt spectra, in nats.
//!
//! A spectrum `λ` is turned into probabilities `p_k = λ_k² / Σ λ²`; for a
//! vectorized density operator this makes the operator entropy of a pure
//! state exactly twice its state entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("Renyi order must be positive and different from 1, got {0}")]
    InvalidAlpha(f64),
    #[error("no snapshots to maximize over")]
    EmptyHistory,
}

pub type EntropyResult<T> = Result<T, EntropyError>;

/// Entropy at one bond after one layer. `alpha == 1` denotes von Neumann.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub layer: usize,
    pub bond: usize,
    pub alpha: f64,
    pub value: f64,
    pub trace_error: f64,
}

fn probabilities(lambda: &[f64]) -> Vec<f64> {
    let total: f64 = lambda.iter().map(|x| x * x).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    lambda
        .iter()
        .map(|x| x * x / total)
        .filter(|&p| p > 0.0)
        .collect()
}

pub fn renyi_entropy(lambda: &[f64], alpha: f64) -> EntropyResult<f64> {
    if !(alpha > 0.0) || alpha == 1.0 || !alpha.is_finite() {
        return Err(EntropyError::InvalidAlpha(alpha));
    }
    let p = probabilities(lambda);
    if p.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = p.iter().map(|&x| x.powf(alpha)).sum();
    Ok((sum.ln() / (1.0 - alpha)).max(0.0))
}

pub fn von_neumann_entropy(lambda: &[f64]) -> f64 {
    let s: f64 = probabilities(lambda).iter().map(|&p| -p * p.ln()).sum();
    s.max(0.0)
}

/// Dispatches on `alpha`: exactly 1 gives von Neumann, anything else Renyi.
pub fn entropy(lambda: &[f64], alpha: f64) -> EntropyResult<f64> {
    if alpha == 1.0 {
        Ok(von_neumann_entropy(lambda))
    } else {
        renyi_entropy(lambda, alpha)
    }
}

/// Per-bond entropies for one snapshot; `spectra[b]` belongs to bond `b + 1`.
pub fn bond_entropies(spectra: &[Vec<f64>], alpha: f64) -> EntropyResult<Vec<f64>> {
    spectra.iter().map(|s| entropy(s, alpha)).collect()
}

/// Maximum over a history of snapshots. `history[l][b]` is the spectrum at
/// bond `b + 1` after layer `l + 1`. Returns `(value, layer, bond)` with
/// 1-based indices; ties keep the earliest layer, then the lowest bond.
pub fn max_entropy(history: &[Vec<Vec<f64>>], alpha: f64) -> EntropyResult<(f64, usize, usize)> {
    if history.is_empty() {
        return Err(EntropyError::EmptyHistory);
    }
    let mut best = (f64::NEG_INFINITY, 1, 1);
    for (l, snapshot) in history.iter().enumerate() {
        for (b, spectrum) in snapshot.iter().enumerate() {
            let s = entropy(spectrum, alpha)?;
            if s > best.0 {
                best = (s, l + 1, b + 1);
            }
        }
    }
    if best.0 == f64::NEG_INFINITY {
        best.0 = 0.0;
    }
    Ok(best)
}
