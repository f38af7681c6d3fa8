//! Tensor-network simulation of Gaussian boson sampling with phase-noisy
//! squeezed-vacuum inputs.
//!
//! The crate tracks how the operator entanglement entropy of the output state
//! of an *M*-mode Haar-random interferometer scales with the number of
//! squeezed inputs *N* when every input suffers independent phase noise
//! (dephasing) and, optionally, uniform photon loss.
//!
//! Module map:
//!
//! - [`fock_local`]: single-mode Fock-space objects (squeezed vacuum,
//!   phase distributions, the dephasing channel, pure-loss Kraus operators).
//! - [`block_tensor`]: abelian charge-sectored dense tensors with contraction
//!   and globally truncated SVD.
//! - [`interferometer`]: Haar-random interferometers sampled directly as *M*
//!   brickwork layers of beamsplitters, plus Fock-space beamsplitter gates.
//! - [`tn_engine`]: the MPS (pure) / vectorized MPO (mixed) chain in Vidal
//!   form and its evolution.
//! - [`entropy`]: Rényi / von Neumann entropies of Schmidt spectra.
//! - [`exact_oracle`]: brute-force ground truth (dense density matrices,
//!   hafnians, Gaussian photon-pattern probabilities).
//! - [`harness`]: experiment configuration, seeded sweeps and CSV/JSON output.
//!
//! All entropies are reported in nats.

pub mod block_tensor;
pub mod entropy;
pub mod exact_oracle;
pub mod fock_local;
pub mod harness;
pub mod interferometer;
pub mod tn_engine;
mod util;

pub use num_complex::Complex64 as C64;
