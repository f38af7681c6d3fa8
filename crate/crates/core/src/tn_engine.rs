//! Matrix-product state (pure) and vectorized matrix-product operator
//! (mixed) chains in Vidal form, `scale · λ⁰ Γ⁰ λ¹ Γ¹ ⋯ Γᴹ⁻¹ λᴹ`.
//!
//! Each `Γʲ` has legs `(left bond, physical, right bond)`. The physical index
//! is the Fock number `n` for a pure state and `n·d + n'` for the vectorized
//! density `|ρ⟫ = Σ ρ_{nn'} |n⟩|n'⟩`. All bond vectors are kept at unit
//! norm; the overall magnitude lives in `scale`, so the trace decays
//! honestly under truncation and cutoff leakage and is never renormalized.
//!
//! Tensors carry abelian charges. A site label `(n, n')` (or `(n, 0)` for a
//! pure state) is mapped into `Z²/L`, where `L` is spanned by the label
//! differences present within each initial site state, and by `(1, 1)` when
//! loss channels will be applied. Beamsplitters and phases conserve the
//! label sum and loss shifts it by multiples of `(1, 1)`, so every reachable
//! state has a definite total charge and each bond splits into sectors.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block_tensor::{
    BlockError, BlockTensor, BondVector, Charge, ChargeMap, Direction, Leg, LegBasis, Truncation,
};
use crate::fock_local::{loss_kraus, FockError, LocalDensity};
use crate::interferometer::{fock_beamsplitter_gate, fock_phase_gate, BeamsplitterParams};
use crate::C64;

/// Version tag written into checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bond weights at or below this value are treated as zero when dividing.
pub const LAMBDA_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum TnError {
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error("chain needs at least one mode")]
    NoModes,
    #[error("{inputs} inputs do not fit in {modes} modes")]
    TooManyInputs { inputs: usize, modes: usize },
    #[error("site {site} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        site: usize,
        expected: usize,
        got: usize,
    },
    #[error("site {0} starts in the zero state")]
    ZeroSite(usize),
    #[error("site {site} out of range for {modes} modes")]
    SiteOutOfRange { site: usize, modes: usize },
    #[error("gates in one layer overlap at site {0}")]
    OverlappingGates(usize),
    #[error("loss channels need a vectorized mixed state")]
    NotMixed,
    #[error("loss applied to a chain whose charges were not set up for loss")]
    LossNotExpected,
    #[error("checkpoint version {0} is not supported")]
    CheckpointVersion(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

pub type TnResult<T> = Result<T, TnError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    PureMps,
    VectorizedMpo,
}

/// Whether tensors are split into charge sectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryMode {
    /// Use the charge group detected from the initial state.
    #[default]
    Detect,
    /// One dense block per tensor.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TnConfig {
    /// Bond dimension limit; `None` is unbounded.
    pub chi_max: Option<usize>,
    /// Relative singular-value weight below which values are dropped.
    pub svd_cutoff: f64,
    /// Largest tolerated `1 − trace` before the state is flagged.
    pub trace_budget: f64,
    pub symmetry: SymmetryMode,
    /// Reserve room in the charge group for loss channels.
    pub expect_loss: bool,
}

impl Default for TnConfig {
    fn default() -> Self {
        Self {
            chi_max: None,
            svd_cutoff: 0.0,
            trace_budget: 0.01,
            symmetry: SymmetryMode::Detect,
            expect_loss: false,
        }
    }
}

impl TnConfig {
    pub fn truncation(&self) -> Truncation {
        Truncation {
            chi_max: self.chi_max,
            cutoff: self.svd_cutoff,
        }
    }
}

/// A two-site gate ready to apply: the dense Fock gate lifted to the
/// chain's physical legs and charges.
#[derive(Clone, Debug)]
pub struct PreparedGate {
    site: usize,
    tensor: BlockTensor,
}

struct Update {
    left: BlockTensor,
    bond: BondVector,
    right: BlockTensor,
    norm: f64,
    discarded: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TnState {
    representation: Representation,
    local_dim: usize,
    config: TnConfig,
    charges: ChargeMap,
    phys_leg: Leg,
    phys_basis: LegBasis,
    sites: Vec<BlockTensor>,
    bonds: Vec<BondVector>,
    scale: f64,
    cumulative_discarded_weight: f64,
    flagged: bool,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    state: TnState,
}

fn inverse_or_zero(x: f64) -> f64 {
    if x > LAMBDA_FLOOR {
        1.0 / x
    } else {
        0.0
    }
}

fn identity(x: f64) -> f64 {
    x
}

fn phys_labels(rep: Representation, d: usize) -> Vec<[i64; 2]> {
    match rep {
        Representation::PureMps => (0..d).map(|n| [n as i64, 0]).collect(),
        Representation::VectorizedMpo => (0..d * d)
            .map(|k| [(k / d) as i64, (k % d) as i64])
            .collect(),
    }
}

fn unit_leg(dir: Direction, q: Charge) -> Leg {
    Leg::new(dir, BTreeMap::from([(q, 1)]))
}

type Env = BTreeMap<Charge, Array1<C64>>;

impl TnState {
    /// Product pure state: `amplitudes[j]` on mode `j`, vacuum on the rest.
    pub fn init_pure(
        amplitudes: &[Vec<C64>],
        num_modes: usize,
        config: TnConfig,
    ) -> TnResult<Self> {
        let d = amplitudes.first().map_or(1, Vec::len);
        let vectors = Self::fill_vacuum(amplitudes.to_vec(), num_modes, d, d)?;
        Self::from_product(Representation::PureMps, d, vectors, config)
    }

    /// Product mixed state: `densities[j]` on mode `j`, vacuum on the rest.
    pub fn init_mixed(
        densities: &[LocalDensity],
        num_modes: usize,
        config: TnConfig,
    ) -> TnResult<Self> {
        let d = densities.first().map_or(1, LocalDensity::dim);
        let vecs: Vec<Vec<C64>> = densities
            .iter()
            .map(|r| r.elements().iter().copied().collect())
            .collect();
        let vectors = Self::fill_vacuum(vecs, num_modes, d, d * d)?;
        Self::from_product(Representation::VectorizedMpo, d, vectors, config)
    }

    fn fill_vacuum(
        mut vectors: Vec<Vec<C64>>,
        modes: usize,
        d: usize,
        len: usize,
    ) -> TnResult<Vec<Vec<C64>>> {
        if modes == 0 {
            return Err(TnError::NoModes);
        }
        if vectors.len() > modes {
            return Err(TnError::TooManyInputs {
                inputs: vectors.len(),
                modes,
            });
        }
        if d == 0 {
            return Err(FockError::ZeroCutoff.into());
        }
        for (site, v) in vectors.iter().enumerate() {
            if v.len() != len {
                return Err(TnError::DimensionMismatch {
                    site,
                    expected: len,
                    got: v.len(),
                });
            }
        }
        while vectors.len() < modes {
            let mut v = vec![C64::new(0.0, 0.0); len];
            v[0] = C64::new(1.0, 0.0);
            vectors.push(v);
        }
        Ok(vectors)
    }

    fn from_product(
        rep: Representation,
        d: usize,
        vectors: Vec<Vec<C64>>,
        config: TnConfig,
    ) -> TnResult<Self> {
        let labels = phys_labels(rep, d);
        let mut generators = Vec::new();
        let mut first_support = Vec::with_capacity(vectors.len());
        for (site, v) in vectors.iter().enumerate() {
            let support: Vec<usize> = (0..v.len())
                .filter(|&i| v[i] != C64::new(0.0, 0.0))
                .collect();
            let &first = support.first().ok_or(TnError::ZeroSite(site))?;
            for &i in &support[1..] {
                generators.push([
                    labels[i][0] - labels[first][0],
                    labels[i][1] - labels[first][1],
                ]);
            }
            first_support.push(first);
        }
        match rep {
            Representation::PureMps => generators.push([0, 1]),
            Representation::VectorizedMpo if config.expect_loss => generators.push([1, 1]),
            Representation::VectorizedMpo => {}
        }
        let charges = match config.symmetry {
            SymmetryMode::Detect => ChargeMap::from_generators(&generators),
            SymmetryMode::Off => ChargeMap::trivial(),
        };
        let group = charges.group;
        let index_charges: Vec<Charge> = labels.iter().map(|&l| charges.charge(l)).collect();
        let (phys_leg, phys_basis) = Leg::from_index_charges(Direction::In, &index_charges);

        let mut q_left = Charge::ZERO;
        let mut bonds = vec![BondVector::unit(q_left)];
        let mut sites = Vec::with_capacity(vectors.len());
        let mut scale = 1.0;
        for (v, &first) in vectors.iter().zip(&first_support) {
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            scale *= norm;
            let q_right = group.add(q_left, index_charges[first]);
            let legs = vec![
                unit_leg(Direction::In, q_left),
                phys_leg.clone(),
                unit_leg(Direction::Out, q_right),
            ];
            let bases = vec![vec![(q_left, 0)], phys_basis.clone(), vec![(q_right, 0)]];
            let entries = v
                .iter()
                .enumerate()
                .map(|(i, &z)| (vec![0, i, 0], z / norm));
            sites.push(BlockTensor::from_entries(
                group, legs, &bases, entries, 0.0,
            )?);
            bonds.push(BondVector::unit(q_right));
            q_left = q_right;
        }
        Ok(Self {
            representation: rep,
            local_dim: d,
            config,
            charges,
            phys_leg,
            phys_basis,
            sites,
            bonds,
            scale,
            cumulative_discarded_weight: 0.0,
            flagged: false,
        })
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn num_modes(&self) -> usize {
        self.sites.len()
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn config(&self) -> &TnConfig {
        &self.config
    }

    pub fn charge_map(&self) -> &ChargeMap {
        &self.charges
    }

    pub fn site(&self, j: usize) -> &BlockTensor {
        &self.sites[j]
    }

    /// Bond vector between sites `k − 1` and `k`; `0` and `M` are the
    /// one-dimensional boundaries.
    pub fn bond(&self, k: usize) -> &BondVector {
        &self.bonds[k]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Sum over all truncations of the dropped fraction of the squared norm.
    pub fn cumulative_discarded_weight(&self) -> f64 {
        self.cumulative_discarded_weight
    }

    /// Set once `1 − trace` has exceeded the configured budget.
    pub fn flagged(&self) -> bool {
        self.flagged
    }

    pub fn bond_dimensions(&self) -> Vec<usize> {
        self.bonds.iter().map(BondVector::dim).collect()
    }

    pub fn max_bond_dimension(&self) -> usize {
        self.bond_dimensions().into_iter().max().unwrap_or(1)
    }

    /// Dense physical indices of every `(sector, offset)`.
    fn phys_index(&self) -> BTreeMap<Charge, Vec<usize>> {
        let mut out: BTreeMap<Charge, Vec<usize>> = BTreeMap::new();
        for (i, &(c, o)) in self.phys_basis.iter().enumerate() {
            let v = out.entry(c).or_default();
            if v.len() <= o {
                v.resize(o + 1, 0);
            }
            v[o] = i;
        }
        out
    }

    fn check_site(&self, site: usize) -> TnResult<()> {
        if site < self.num_modes() {
            Ok(())
        } else {
            Err(TnError::SiteOutOfRange {
                site,
                modes: self.num_modes(),
            })
        }
    }

    /// Lifts a Fock gate `gate[[m1, m2, n1, n2]]` onto sites `site, site + 1`;
    /// mixed chains receive `U ⊗ conj(U)`.
    pub fn prepare_gate(&self, site: usize, gate: &Array4<C64>) -> TnResult<PreparedGate> {
        self.check_site(site + 1)?;
        let d = self.local_dim;
        if gate.shape() != [d, d, d, d] {
            return Err(TnError::DimensionMismatch {
                site,
                expected: d,
                got: gate.shape()[0],
            });
        }
        let nonzero: Vec<([usize; 4], C64)> = gate
            .indexed_iter()
            .filter(|(_, v)| **v != C64::new(0.0, 0.0))
            .map(|((a, b, c, e), &v)| ([a, b, c, e], v))
            .collect();
        let entries: Vec<(Vec<usize>, C64)> = match self.representation {
            Representation::PureMps => nonzero.iter().map(|(i, v)| (i.to_vec(), *v)).collect(),
            Representation::VectorizedMpo => nonzero
                .iter()
                .flat_map(|(i, v)| {
                    nonzero.iter().map(move |(j, w)| {
                        ((0..4).map(|a| i[a] * d + j[a]).collect(), v * w.conj())
                    })
                })
                .collect(),
        };
        let p = &self.phys_leg;
        let legs = vec![p.clone(), p.clone(), p.flipped(), p.flipped()];
        let bases = vec![self.phys_basis.clone(); 4];
        let tensor = BlockTensor::from_entries(self.charges.group, legs, &bases, entries, 1e-13)?;
        Ok(PreparedGate { site, tensor })
    }

    pub fn prepare_beamsplitter(&self, params: &BeamsplitterParams) -> TnResult<PreparedGate> {
        self.prepare_gate(params.site, &fock_beamsplitter_gate(params, self.local_dim))
    }

    fn two_site_update(&self, gate: &PreparedGate) -> TnResult<Update> {
        let k = gate.site;
        let mut a = self.sites[k].clone();
        a.scale_leg(0, &self.bonds[k], identity)?;
        a.scale_leg(2, &self.bonds[k + 1], identity)?;
        let mut b = self.sites[k + 1].clone();
        b.scale_leg(2, &self.bonds[k + 2], identity)?;
        let theta = a.contract(&[2], &b, &[0])?;
        let theta = gate
            .tensor
            .contract(&[2, 3], &theta, &[1, 2])?
            .permute(&[2, 0, 1, 3])?;
        let svd = theta.truncated_svd(&[0, 1], &[2, 3], self.config.truncation())?;
        let norm = svd.singular_values.norm();
        let mut left = svd.left;
        left.scale_leg(0, &self.bonds[k], inverse_or_zero)?;
        let mut right = svd.right;
        right.scale_leg(2, &self.bonds[k + 2], inverse_or_zero)?;
        Ok(Update {
            left,
            bond: svd.singular_values.scaled(1.0 / norm),
            right,
            norm,
            discarded: svd.discarded_weight / svd.total_weight,
        })
    }

    fn commit(&mut self, site: usize, u: Update) {
        self.sites[site] = u.left;
        self.bonds[site + 1] = u.bond;
        self.sites[site + 1] = u.right;
        self.scale *= u.norm;
        self.cumulative_discarded_weight += u.discarded;
    }

    /// Applies a Fock gate on `(site, site + 1)`, truncates, and checks the trace.
    pub fn apply_two_site_gate(&mut self, site: usize, gate: &Array4<C64>) -> TnResult<()> {
        let prepared = self.prepare_gate(site, gate)?;
        let update = self.two_site_update(&prepared)?;
        self.commit(site, update);
        self.check_trace();
        Ok(())
    }

    /// Applies gates on disjoint pairs, then checks the trace once.
    ///
    /// Each update only reads bonds it does not write, so the parallel path
    /// computes exactly the same numbers as the serial one and commits them
    /// in the same order.
    pub fn apply_layer(&mut self, gates: &[PreparedGate], parallel: bool) -> TnResult<()> {
        let mut used = vec![false; self.num_modes()];
        for g in gates {
            self.check_site(g.site + 1)?;
            if used[g.site] || used[g.site + 1] {
                return Err(TnError::OverlappingGates(g.site));
            }
            used[g.site] = true;
            used[g.site + 1] = true;
        }
        let updates: Vec<Update> = if parallel {
            gates
                .par_iter()
                .map(|g| self.two_site_update(g))
                .collect::<TnResult<_>>()?
        } else {
            gates
                .iter()
                .map(|g| self.two_site_update(g))
                .collect::<TnResult<_>>()?
        };
        for (g, u) in gates.iter().zip(updates) {
            self.commit(g.site, u);
        }
        self.check_trace();
        Ok(())
    }

    /// Convenience wrapper building the Fock gates of a circuit layer.
    pub fn apply_beamsplitter_layer(
        &mut self,
        layer: &[BeamsplitterParams],
        parallel: bool,
    ) -> TnResult<()> {
        let gates: Vec<PreparedGate> = layer
            .iter()
            .map(|p| self.prepare_beamsplitter(p))
            .collect::<TnResult<_>>()?;
        self.apply_layer(&gates, parallel)
    }

    /// Applies the diagonal single-mode unitary `|n⟩ ↦ diag[n] |n⟩`.
    pub fn apply_single_site_diagonal(&mut self, site: usize, diag: &[C64]) -> TnResult<()> {
        self.check_site(site)?;
        let d = self.local_dim;
        if diag.len() != d {
            return Err(TnError::DimensionMismatch {
                site,
                expected: d,
                got: diag.len(),
            });
        }
        let index = self.phys_index();
        let factor = |c: Charge, o: usize| -> C64 {
            let k = index[&c][o];
            match self.representation {
                Representation::PureMps => diag[k],
                Representation::VectorizedMpo => diag[k / d] * diag[k % d].conj(),
            }
        };
        let mut t = self.sites[site].clone();
        t.scale_axis_by(1, factor)?;
        self.sites[site] = t;
        Ok(())
    }

    pub fn apply_output_phase(&mut self, site: usize, phi: f64) -> TnResult<()> {
        self.apply_single_site_diagonal(site, &fock_phase_gate(phi, self.local_dim))
    }

    /// Pure-loss channel with transmissivity `eta` on one mode, followed by
    /// re-canonicalization of the chain.
    pub fn apply_loss_channel(&mut self, site: usize, eta: f64) -> TnResult<()> {
        if self.representation != Representation::VectorizedMpo {
            return Err(TnError::NotMixed);
        }
        let kraus = loss_kraus(eta, self.local_dim)?;
        if !self.config.expect_loss {
            return Err(TnError::LossNotExpected);
        }
        self.check_site(site)?;
        let d = self.local_dim;
        let mut entries = Vec::new();
        for k in &kraus {
            let nz: Vec<((usize, usize), C64)> = k
                .indexed_iter()
                .filter(|(_, v)| **v != C64::new(0.0, 0.0))
                .map(|(i, &v)| (i, v))
                .collect();
            for &((m, n), a) in &nz {
                for &((mp, np), b) in &nz {
                    entries.push((vec![m * d + mp, n * d + np], a * b.conj()));
                }
            }
        }
        let legs = vec![self.phys_leg.clone(), self.phys_leg.flipped()];
        let bases = vec![self.phys_basis.clone(), self.phys_basis.clone()];
        let channel = BlockTensor::from_entries(self.charges.group, legs, &bases, entries, 1e-13)?;
        self.sites[site] = channel
            .contract(&[1], &self.sites[site], &[1])?
            .permute(&[1, 0, 2])?;
        self.canonicalize()?;
        self.check_trace();
        Ok(())
    }

    /// Restores Vidal canonical form with two exact SVD sweeps. Bond vectors
    /// afterwards are the true Schmidt coefficients of the represented
    /// vector.
    pub fn canonicalize(&mut self) -> TnResult<()> {
        let m = self.num_modes();
        let exact = Truncation::exact();
        let mut a: Vec<BlockTensor> = Vec::with_capacity(m);
        for j in 0..m {
            let mut t = self.sites[j].clone();
            t.scale_leg(2, &self.bonds[j + 1], identity)?;
            if j == 0 {
                t.scale_leg(0, &self.bonds[0], identity)?;
            }
            a.push(t);
        }
        for j in (1..m).rev() {
            let svd = a[j].truncated_svd(&[0], &[1, 2], exact)?;
            let mut us = svd.left;
            us.scale_leg(1, &svd.singular_values, identity)?;
            a[j] = svd.right;
            a[j - 1] = a[j - 1].contract(&[2], &us, &[0])?;
        }
        let mut factor = 1.0;
        let mut bonds = vec![self.bonds[0].clone()];
        let mut sites = Vec::with_capacity(m);
        let mut carry = a[0].clone();
        for j in 0..m - 1 {
            let svd = carry.truncated_svd(&[0, 1], &[2], exact)?;
            let n = svd.singular_values.norm();
            factor *= n;
            let lambda = svd.singular_values.scaled(1.0 / n);
            let mut gamma = svd.left;
            gamma.scale_leg(0, &bonds[j], inverse_or_zero)?;
            sites.push(gamma);
            let mut rest = svd.right;
            rest.scale_leg(0, &lambda, identity)?;
            carry = rest.contract(&[1], &a[j + 1], &[0])?;
            bonds.push(lambda);
        }
        let n = carry.norm();
        if n == 0.0 {
            return Err(BlockError::EmptySpectrum.into());
        }
        factor *= n;
        carry.scale(C64::new(1.0 / n, 0.0));
        carry.scale_leg(0, &bonds[m - 1], inverse_or_zero)?;
        sites.push(carry);
        bonds.push(self.bonds[m].clone());
        self.sites = sites;
        self.bonds = bonds;
        self.scale *= factor;
        Ok(())
    }

    /// `λʲ Γʲ` as a standalone tensor.
    fn absorbed(&self, j: usize) -> TnResult<BlockTensor> {
        let mut t = self.sites[j].clone();
        t.scale_leg(0, &self.bonds[j], identity)?;
        Ok(t)
    }

    /// Left identity environments of the vectorized chain, one per bond.
    fn mpo_left_envs(&self) -> TnResult<Vec<Env>> {
        let diag = self.diagonal_offsets();
        let mut envs = vec![Env::from([(
            Charge::ZERO,
            Array1::from_elem(1, C64::new(1.0, 0.0)),
        )])];
        for j in 0..self.num_modes() {
            let a = self.absorbed(j)?;
            let prev = &envs[j];
            let mut next = Env::new();
            for (key, block) in a.blocks() {
                let (Some(e), Some(offsets)) = (prev.get(&key[0]), diag.get(&key[1])) else {
                    continue;
                };
                let acc = next
                    .entry(key[2])
                    .or_insert_with(|| Array1::zeros(block.shape()[2]));
                for &o in offsets {
                    let slice = block.index_axis(Axis(1), o);
                    let slice = slice
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("rank-3 site");
                    *acc += &e.dot(&slice);
                }
            }
            envs.push(next);
        }
        Ok(envs)
    }

    fn mpo_right_envs(&self) -> TnResult<Vec<Env>> {
        let m = self.num_modes();
        let diag = self.diagonal_offsets();
        let q_total = *self.bonds[m].sectors.keys().next().expect("boundary bond");
        let mut envs = vec![Env::new(); m + 1];
        envs[m] = Env::from([(q_total, Array1::from_elem(1, C64::new(1.0, 0.0)))]);
        for j in (0..m).rev() {
            let a = self.absorbed(j)?;
            let mut next = Env::new();
            for (key, block) in a.blocks() {
                let (Some(e), Some(offsets)) = (envs[j + 1].get(&key[2]), diag.get(&key[1])) else {
                    continue;
                };
                let acc = next
                    .entry(key[0])
                    .or_insert_with(|| Array1::zeros(block.shape()[0]));
                for &o in offsets {
                    let slice = block.index_axis(Axis(1), o);
                    let slice = slice
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("rank-3 site");
                    *acc += &slice.dot(e);
                }
            }
            envs[j] = next;
        }
        Ok(envs)
    }

    /// Offsets of diagonal labels `(n, n)` inside each physical sector.
    fn diagonal_offsets(&self) -> BTreeMap<Charge, Vec<usize>> {
        let d = self.local_dim;
        let mut out: BTreeMap<Charge, Vec<usize>> = BTreeMap::new();
        for (k, &(c, o)) in self.phys_basis.iter().enumerate() {
            if k / d == k % d {
                out.entry(c).or_default().push(o);
            }
        }
        out
    }

    fn pure_left_envs(&self) -> TnResult<Vec<BlockTensor>> {
        let group = self.charges.group;
        let q0 = Charge::ZERO;
        let mut e = BlockTensor::new(
            group,
            vec![unit_leg(Direction::Out, q0), unit_leg(Direction::In, q0)],
        );
        e.insert_block(
            vec![q0, q0],
            ArrayD::from_elem(IxDyn(&[1, 1]), C64::new(1.0, 0.0)),
        )?;
        let mut envs = vec![e];
        for j in 0..self.num_modes() {
            let a = self.absorbed(j)?;
            let x = envs[j].contract(&[0], &a, &[0])?;
            envs.push(x.contract(&[0, 1], &a.conj(), &[0, 1])?);
        }
        Ok(envs)
    }

    fn pure_right_envs(&self) -> TnResult<Vec<BlockTensor>> {
        let m = self.num_modes();
        let group = self.charges.group;
        let q = *self.bonds[m].sectors.keys().next().expect("boundary bond");
        let mut f = BlockTensor::new(
            group,
            vec![unit_leg(Direction::In, q), unit_leg(Direction::Out, q)],
        );
        f.insert_block(
            vec![q, q],
            ArrayD::from_elem(IxDyn(&[1, 1]), C64::new(1.0, 0.0)),
        )?;
        let mut envs = vec![f; m + 1];
        for j in (0..m).rev() {
            let a = self.absorbed(j)?;
            let x = a.contract(&[2], &envs[j + 1], &[0])?;
            envs[j] = x.contract(&[1, 2], &a.conj(), &[1, 2])?;
        }
        Ok(envs)
    }

    fn scalar(t: &BlockTensor) -> C64 {
        t.blocks()
            .map(|(_, b)| b.iter().copied().sum::<C64>())
            .sum()
    }

    /// Squared norm (pure) or `Tr ρ` (mixed).
    pub fn trace(&self) -> f64 {
        self.try_trace().expect("consistent chain")
    }

    fn try_trace(&self) -> TnResult<f64> {
        Ok(match self.representation {
            Representation::PureMps => {
                let envs = self.pure_left_envs()?;
                Self::scalar(&envs[self.num_modes()]).re * self.scale * self.scale
            }
            Representation::VectorizedMpo => {
                let envs = self.mpo_left_envs()?;
                let total: C64 = envs[self.num_modes()].values().map(|v| v.sum()).sum();
                total.re * self.scale
            }
        })
    }

    /// Recomputes the trace and flags the state if it fell below budget.
    pub fn check_trace(&mut self) -> f64 {
        let t = self.trace();
        if !(1.0 - t <= self.config.trace_budget) {
            self.flagged = true;
        }
        t
    }

    /// Unnormalized single-mode density `Tr_{others} ρ` as a `d × d` matrix.
    pub fn reduced_site_density(&self, site: usize) -> TnResult<Array2<C64>> {
        self.check_site(site)?;
        let d = self.local_dim;
        let a = self.absorbed(site)?;
        match self.representation {
            Representation::PureMps => {
                let left = self.pure_left_envs()?;
                let right = self.pure_right_envs()?;
                let x = left[site].contract(&[0], &a, &[0])?;
                let x = x.contract(&[2], &right[site + 1], &[0])?;
                let rho = x.contract(&[0, 2], &a.conj(), &[0, 2])?;
                let dense = rho.to_dense(&[self.phys_basis.clone(), self.phys_basis.clone()]);
                let s2 = self.scale * self.scale;
                Ok(Array2::from_shape_fn((d, d), |(i, j)| dense[[i, j]] * s2))
            }
            Representation::VectorizedMpo => {
                let left = self.mpo_left_envs()?;
                let right = self.mpo_right_envs()?;
                let index = self.phys_index();
                let mut rho = Array2::<C64>::zeros((d, d));
                for (key, block) in a.blocks() {
                    let (Some(l), Some(r)) =
                        (left[site].get(&key[0]), right[site + 1].get(&key[2]))
                    else {
                        continue;
                    };
                    for (o, slice) in block.axis_iter(Axis(1)).enumerate() {
                        let slice = slice
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("rank-3 site");
                        let k = index[&key[1]][o];
                        rho[[k / d, k % d]] += l.dot(&slice.dot(r)) * self.scale;
                    }
                }
                Ok(rho)
            }
        }
    }

    /// `Σ_j Tr(n̂_j ρ)`, unnormalized.
    pub fn mean_photon_number(&self) -> TnResult<f64> {
        let mut total = 0.0;
        for j in 0..self.num_modes() {
            let rho = self.reduced_site_density(j)?;
            total += rho
                .diag()
                .iter()
                .enumerate()
                .map(|(n, z)| n as f64 * z.re)
                .sum::<f64>();
        }
        Ok(total)
    }

    /// Bond `k` weights merged over sectors, sorted and at unit norm.
    pub fn schmidt_spectrum(&self, k: usize) -> Vec<f64> {
        let s = self.bonds[k].merged_sorted();
        let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        s.into_iter().map(|x| x / n).collect()
    }

    /// Spectra of the internal bonds `1..M`.
    pub fn all_spectra(&self) -> Vec<Vec<f64>> {
        (1..self.num_modes())
            .map(|k| self.schmidt_spectrum(k))
            .collect()
    }

    pub fn to_checkpoint(&self) -> TnResult<String> {
        let cp = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            state: self.clone(),
        };
        Ok(serde_json::to_string(&cp)?)
    }

    pub fn from_checkpoint(json: &str) -> TnResult<Self> {
        let cp: Checkpoint = serde_json::from_str(json)?;
        if cp.format_version != CHECKPOINT_VERSION {
            return Err(TnError::CheckpointVersion(cp.format_version));
        }
        Ok(cp.state)
    }
}
