//! Dense tensors split into blocks labelled by abelian charges.
//!
//! Every leg carries a direction and a set of charge sectors. A block is
//! stored only when the directed sum of its leg charges vanishes in the
//! charge group, so symmetric operations (contraction, SVD) act block by
//! block. With the trivial group every leg has a single sector and the tensor
//! is simply dense.
//!
//! Charges live in `Z/m0 × Z/m1` where a modulus of zero means the integers.
//! [`ChargeMap`] builds that group as the quotient of `Z²` by the lattice of
//! label differences that the dynamics is allowed to generate.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, ArrayD, Axis, Dimension, IxDyn};
use ndarray_linalg::{JobSvd, SVD, SVDDC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::C64;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("axis {0} out of range for a rank-{1} tensor")]
    AxisOutOfRange(usize, usize),
    #[error("axes do not form a partition of the tensor legs")]
    BadPartition,
    #[error("contracted legs {0} and {1} point the same way")]
    DirectionMismatch(usize, usize),
    #[error("sector {charge:?} has extent {left} on one leg and {right} on the other")]
    SectorMismatch {
        charge: Charge,
        left: usize,
        right: usize,
    },
    #[error("tensors use different charge groups")]
    GroupMismatch,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("entry {value:e} at {index:?} violates charge conservation")]
    ChargeViolation { index: Vec<usize>, value: f64 },
    #[error("sector {0:?} missing from bond vector")]
    MissingSector(Charge),
    #[error("nothing left after truncation")]
    EmptySpectrum,
    #[error("bond dimension limit must be at least 1")]
    InvalidChi,
    #[error("linear algebra failure: {0}")]
    Linalg(String),
}

pub type BlockResult<T> = Result<T, BlockError>;

/// A two-component charge, already reduced into its group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Charge(pub [i32; 2]);

impl Charge {
    pub const ZERO: Charge = Charge([0, 0]);
}

/// `Z/m0 × Z/m1`, with modulus zero standing for `Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeGroup {
    pub moduli: [i32; 2],
}

impl ChargeGroup {
    /// The one-element group: no symmetry, every tensor is a single block.
    pub fn trivial() -> Self {
        Self { moduli: [1, 1] }
    }

    pub fn reduce(&self, c: [i64; 2]) -> Charge {
        let mut out = [0i32; 2];
        for i in 0..2 {
            let m = self.moduli[i] as i64;
            out[i] = if m == 0 {
                c[i] as i32
            } else {
                c[i].rem_euclid(m) as i32
            };
        }
        Charge(out)
    }

    pub fn add(&self, a: Charge, b: Charge) -> Charge {
        self.reduce([a.0[0] as i64 + b.0[0] as i64, a.0[1] as i64 + b.0[1] as i64])
    }

    pub fn neg(&self, a: Charge) -> Charge {
        self.reduce([-(a.0[0] as i64), -(a.0[1] as i64)])
    }

    /// `dir · a` for a leg direction.
    pub fn directed(&self, dir: Direction, a: Charge) -> Charge {
        match dir {
            Direction::In => a,
            Direction::Out => self.neg(a),
        }
    }

    /// Directed sum over a set of legs.
    pub fn fuse<'a>(&self, items: impl IntoIterator<Item = (Direction, &'a Charge)>) -> Charge {
        items.into_iter().fold(Charge::ZERO, |acc, (d, c)| {
            self.add(acc, self.directed(d, *c))
        })
    }

    /// Number of elements, `None` when infinite.
    pub fn order(&self) -> Option<u64> {
        if self.moduli.contains(&0) {
            None
        } else {
            Some(self.moduli[0] as u64 * self.moduli[1] as u64)
        }
    }
}

/// Homomorphism from integer labels in `Z²` onto `Z²/L` for a lattice `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeMap {
    pub group: ChargeGroup,
    transform: [[i64; 2]; 2],
}

impl ChargeMap {
    /// Map to the trivial group.
    pub fn trivial() -> Self {
        Self {
            group: ChargeGroup::trivial(),
            transform: [[1, 0], [0, 1]],
        }
    }

    /// Quotient by the lattice spanned by `generators`, via a Smith normal
    /// form `P G Q = diag(d0, d1)` of the 2×k generator matrix.
    pub fn from_generators(generators: &[[i64; 2]]) -> Self {
        let k = generators.len();
        let mut a: [Vec<i64>; 2] = [
            generators.iter().map(|g| g[0]).collect(),
            generators.iter().map(|g| g[1]).collect(),
        ];
        let mut p = [[1i64, 0], [0, 1]];
        let mut diag = [0i64; 2];
        for t in 0..2 {
            loop {
                let mut pivot: Option<(usize, usize)> = None;
                for (i, row) in a.iter().enumerate().skip(t) {
                    for (j, &v) in row.iter().enumerate().skip(t) {
                        if v != 0 && pivot.is_none_or(|(pi, pj)| v.abs() < a[pi][pj].abs()) {
                            pivot = Some((i, j));
                        }
                    }
                }
                let Some((pi, pj)) = pivot else { break };
                if pi != t {
                    a.swap(pi, t);
                    p.swap(pi, t);
                }
                if pj != t {
                    for row in a.iter_mut() {
                        row.swap(pj, t);
                    }
                }
                let piv = a[t][t];
                let mut clean = true;
                for i in t + 1..2 {
                    let q = a[i][t] / piv;
                    for j in 0..k {
                        a[i][j] -= q * a[t][j];
                    }
                    for j in 0..2 {
                        p[i][j] -= q * p[t][j];
                    }
                    clean &= a[i][t] == 0;
                }
                for j in t + 1..k {
                    let q = a[t][j] / piv;
                    for row in a.iter_mut() {
                        row[j] -= q * row[t];
                    }
                    clean &= a[t][j] == 0;
                }
                if clean {
                    break;
                }
            }
            if t < k && a[t][t] != 0 {
                if a[t][t] < 0 {
                    a[t].iter_mut().for_each(|v| *v = -*v);
                    p[t].iter_mut().for_each(|v| *v = -*v);
                }
                diag[t] = a[t][t];
            }
        }
        Self {
            group: ChargeGroup {
                moduli: [diag[0] as i32, diag[1] as i32],
            },
            transform: p,
        }
    }

    pub fn charge(&self, label: [i64; 2]) -> Charge {
        let t = &self.transform;
        self.group.reduce([
            t[0][0] * label[0] + t[0][1] * label[1],
            t[1][0] * label[0] + t[1][1] * label[1],
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Self::In => Self::Out,
            Self::Out => Self::In,
        }
    }
}

/// Position of a dense index inside the block structure of a leg.
pub type SectorIndex = (Charge, usize);

/// Per-leg map from dense index to `(sector, offset)`.
pub type LegBasis = Vec<SectorIndex>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "LegRepr", from = "LegRepr")]
pub struct Leg {
    pub dir: Direction,
    pub sectors: BTreeMap<Charge, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct LegRepr {
    dir: Direction,
    sectors: Vec<(Charge, usize)>,
}

impl From<Leg> for LegRepr {
    fn from(l: Leg) -> Self {
        Self {
            dir: l.dir,
            sectors: l.sectors.into_iter().collect(),
        }
    }
}

impl From<LegRepr> for Leg {
    fn from(l: LegRepr) -> Self {
        Self {
            dir: l.dir,
            sectors: l.sectors.into_iter().collect(),
        }
    }
}

impl Leg {
    pub fn new(dir: Direction, sectors: BTreeMap<Charge, usize>) -> Self {
        Self { dir, sectors }
    }

    /// Builds a leg from the charge of each dense index; offsets inside a
    /// sector follow the dense order.
    pub fn from_index_charges(dir: Direction, charges: &[Charge]) -> (Self, LegBasis) {
        let mut sectors = BTreeMap::new();
        let basis = charges
            .iter()
            .map(|&c| {
                let e = sectors.entry(c).or_insert(0usize);
                *e += 1;
                (c, *e - 1)
            })
            .collect();
        (Self { dir, sectors }, basis)
    }

    /// Dense order that lists sectors by increasing charge.
    pub fn sorted_basis(&self) -> LegBasis {
        self.sectors
            .iter()
            .flat_map(|(&c, &n)| (0..n).map(move |i| (c, i)))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.sectors.values().sum()
    }

    pub fn extent(&self, c: &Charge) -> usize {
        self.sectors.get(c).copied().unwrap_or(0)
    }

    pub fn flipped(&self) -> Self {
        Self {
            dir: self.dir.flip(),
            sectors: self.sectors.clone(),
        }
    }
}

/// Non-negative diagonal weights on a bond, one vector per sector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "BondRepr", from = "BondRepr")]
pub struct BondVector {
    pub sectors: BTreeMap<Charge, Vec<f64>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct BondRepr {
    sectors: Vec<(Charge, Vec<f64>)>,
}

impl From<BondVector> for BondRepr {
    fn from(b: BondVector) -> Self {
        Self {
            sectors: b.sectors.into_iter().collect(),
        }
    }
}

impl From<BondRepr> for BondVector {
    fn from(b: BondRepr) -> Self {
        Self {
            sectors: b.sectors.into_iter().collect(),
        }
    }
}

impl BondVector {
    /// The one-dimensional bond `{charge: [1]}`.
    pub fn unit(charge: Charge) -> Self {
        Self {
            sectors: BTreeMap::from([(charge, vec![1.0])]),
        }
    }

    pub fn dim(&self) -> usize {
        self.sectors.values().map(Vec::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sectors
            .values()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// All weights, largest first.
    pub fn merged_sorted(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.sectors.values().flatten().copied().collect();
        all.sort_by(|a, b| b.total_cmp(a));
        all
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            sectors: self
                .sectors
                .iter()
                .map(|(&c, v)| (c, v.iter().map(|x| x * factor).collect()))
                .collect(),
        }
    }

    pub fn leg(&self, dir: Direction) -> Leg {
        Leg::new(
            dir,
            self.sectors.iter().map(|(&c, v)| (c, v.len())).collect(),
        )
    }
}

/// Truncation rule for [`BlockTensor::truncated_svd`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncation {
    /// Largest number of singular values kept; `None` keeps all.
    pub chi_max: Option<usize>,
    /// Values with `s² < cutoff · Σ s²` are dropped.
    pub cutoff: f64,
}

impl Truncation {
    pub fn exact() -> Self {
        Self {
            chi_max: None,
            cutoff: 0.0,
        }
    }
}

/// Singular values below this fraction of the largest are always dropped.
pub const RELATIVE_ZERO: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Row legs followed by the new bond (pointing out).
    pub left: BlockTensor,
    pub singular_values: BondVector,
    /// New bond (pointing in) followed by the column legs.
    pub right: BlockTensor,
    /// Sum of squares of the dropped singular values.
    pub discarded_weight: f64,
    /// Sum of squares of all singular values before truncation.
    pub total_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TensorRepr", try_from = "TensorRepr")]
pub struct BlockTensor {
    group: ChargeGroup,
    legs: Vec<Leg>,
    blocks: BTreeMap<Vec<Charge>, ArrayD<C64>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct TensorRepr {
    group: ChargeGroup,
    legs: Vec<Leg>,
    blocks: Vec<(Vec<Charge>, ArrayD<C64>)>,
}

impl From<BlockTensor> for TensorRepr {
    fn from(t: BlockTensor) -> Self {
        Self {
            group: t.group,
            legs: t.legs,
            blocks: t.blocks.into_iter().collect(),
        }
    }
}

impl TryFrom<TensorRepr> for BlockTensor {
    type Error = BlockError;
    fn try_from(r: TensorRepr) -> BlockResult<Self> {
        let mut t = BlockTensor::new(r.group, r.legs);
        for (key, block) in r.blocks {
            t.insert_block(key, block)?;
        }
        Ok(t)
    }
}

fn to_matrix(block: &ArrayD<C64>, order: &[usize], rows: usize, cols: usize) -> Array2<C64> {
    let permuted = block.view().permuted_axes(IxDyn(order));
    permuted
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("block size matches its sectors")
}

fn from_matrix(m: Array2<C64>, shape: &[usize]) -> ArrayD<C64> {
    m.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("matrix size matches shape")
}

fn svd(m: &Array2<C64>) -> BlockResult<(Array2<C64>, Vec<f64>, Array2<C64>)> {
    if let Ok((Some(u), s, Some(vt))) = m.svddc(JobSvd::Some) {
        if s.iter().all(|x| x.is_finite()) {
            return Ok((u, s.to_vec(), vt));
        }
    }
    let (u, s, vt) = m
        .svd(true, true)
        .map_err(|e| BlockError::Linalg(e.to_string()))?;
    let (u, vt) = (u.expect("requested U"), vt.expect("requested Vt"));
    let k = s.len();
    Ok((
        u.slice(s![.., ..k]).to_owned(),
        s.to_vec(),
        vt.slice(s![..k, ..]).to_owned(),
    ))
}

impl BlockTensor {
    /// Tensor with no stored blocks (identically zero).
    pub fn new(group: ChargeGroup, legs: Vec<Leg>) -> Self {
        Self {
            group,
            legs,
            blocks: BTreeMap::new(),
        }
    }

    pub fn group(&self) -> ChargeGroup {
        self.group
    }

    pub fn legs(&self) -> &[Leg] {
        &self.legs
    }

    pub fn leg(&self, axis: usize) -> &Leg {
        &self.legs[axis]
    }

    pub fn rank(&self) -> usize {
        self.legs.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.legs.iter().map(Leg::dim).collect()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&Vec<Charge>, &ArrayD<C64>)> {
        self.blocks.iter()
    }

    pub fn block(&self, key: &[Charge]) -> Option<&ArrayD<C64>> {
        self.blocks.get(key)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn block_shape(&self, key: &[Charge]) -> Vec<usize> {
        key.iter()
            .zip(&self.legs)
            .map(|(c, l)| l.extent(c))
            .collect()
    }

    pub fn is_conserving(&self, key: &[Charge]) -> bool {
        self.group.fuse(self.legs.iter().map(|l| l.dir).zip(key)) == Charge::ZERO
    }

    /// Stores a block, checking its key and shape.
    pub fn insert_block(&mut self, key: Vec<Charge>, block: ArrayD<C64>) -> BlockResult<()> {
        if key.len() != self.rank() || !self.is_conserving(&key) {
            return Err(BlockError::ChargeViolation {
                index: vec![],
                value: f64::NAN,
            });
        }
        let expected = self.block_shape(&key);
        if block.shape() != expected.as_slice() || expected.contains(&0) {
            return Err(BlockError::ShapeMismatch {
                expected,
                got: block.shape().to_vec(),
            });
        }
        self.blocks.insert(key, block);
        Ok(())
    }

    /// Splits a dense array into blocks. Entries breaking conservation must
    /// be no larger than `tol` in modulus; they are dropped.
    pub fn from_dense(
        group: ChargeGroup,
        legs: Vec<Leg>,
        bases: &[LegBasis],
        dense: &ArrayD<C64>,
        tol: f64,
    ) -> BlockResult<Self> {
        let expected: Vec<usize> = bases.iter().map(Vec::len).collect();
        if dense.shape() != expected.as_slice() {
            return Err(BlockError::ShapeMismatch {
                expected,
                got: dense.shape().to_vec(),
            });
        }
        Self::from_entries(
            group,
            legs,
            bases,
            dense.indexed_iter().map(|(i, &v)| (i.slice().to_vec(), v)),
            tol,
        )
    }

    /// Like [`BlockTensor::from_dense`] but from `(dense index, value)`
    /// pairs; repeated indices are summed.
    pub fn from_entries(
        group: ChargeGroup,
        legs: Vec<Leg>,
        bases: &[LegBasis],
        entries: impl IntoIterator<Item = (Vec<usize>, C64)>,
        tol: f64,
    ) -> BlockResult<Self> {
        if legs.len() != bases.len() {
            return Err(BlockError::BadPartition);
        }
        let mut t = Self::new(group, legs);
        let mut rejected: Option<(Vec<usize>, f64)> = None;
        for (idx, v) in entries {
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            if idx.len() != bases.len() || idx.iter().zip(bases).any(|(&i, b)| i >= b.len()) {
                return Err(BlockError::ShapeMismatch {
                    expected: bases.iter().map(Vec::len).collect(),
                    got: idx,
                });
            }
            let key: Vec<Charge> = idx.iter().zip(bases).map(|(&i, b)| b[i].0).collect();
            if !t.is_conserving(&key) {
                if v.norm() > tol && rejected.is_none() {
                    rejected = Some((idx, v.norm()));
                }
                continue;
            }
            let shape = t.block_shape(&key);
            let offsets: Vec<usize> = idx.iter().zip(bases).map(|(&i, b)| b[i].1).collect();
            let block = t
                .blocks
                .entry(key)
                .or_insert_with(|| ArrayD::zeros(IxDyn(&shape)));
            block[IxDyn(&offsets)] += v;
        }
        match rejected {
            Some((index, value)) => Err(BlockError::ChargeViolation { index, value }),
            None => Ok(t),
        }
    }

    pub fn to_dense(&self, bases: &[LegBasis]) -> ArrayD<C64> {
        let shape: Vec<usize> = bases.iter().map(Vec::len).collect();
        let lookup: Vec<HashMap<SectorIndex, usize>> = bases
            .iter()
            .map(|b| b.iter().enumerate().map(|(i, &si)| (si, i)).collect())
            .collect();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (key, block) in &self.blocks {
            for (idx, &v) in block.indexed_iter() {
                let dense: Vec<usize> = (0..key.len())
                    .map(|a| lookup[a][&(key[a], idx[a])])
                    .collect();
                out[IxDyn(&dense)] = v;
            }
        }
        out
    }

    /// Dense array with every leg in sorted-sector order.
    pub fn to_dense_sorted(&self) -> ArrayD<C64> {
        let bases: Vec<LegBasis> = self.legs.iter().map(Leg::sorted_basis).collect();
        self.to_dense(&bases)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.blocks
            .values()
            .flat_map(|b| b.iter())
            .map(|z| z.norm_sqr())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn scale(&mut self, factor: C64) {
        for b in self.blocks.values_mut() {
            b.mapv_inplace(|z| z * factor);
        }
    }

    /// Complex conjugate; leg directions flip so conservation still holds.
    pub fn conj(&self) -> Self {
        Self {
            group: self.group,
            legs: self.legs.iter().map(Leg::flipped).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|(k, b)| (k.clone(), b.mapv(|z| z.conj())))
                .collect(),
        }
    }

    pub fn permute(&self, perm: &[usize]) -> BlockResult<Self> {
        let mut seen = vec![false; self.rank()];
        if perm.len() != self.rank() {
            return Err(BlockError::BadPartition);
        }
        for &p in perm {
            if p >= self.rank() || std::mem::replace(&mut seen[p], true) {
                return Err(BlockError::BadPartition);
            }
        }
        Ok(Self {
            group: self.group,
            legs: perm.iter().map(|&p| self.legs[p].clone()).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|(k, b)| {
                    let key = perm.iter().map(|&p| k[p]).collect();
                    let arr = b
                        .view()
                        .permuted_axes(IxDyn(perm))
                        .as_standard_layout()
                        .into_owned();
                    (key, arr)
                })
                .collect(),
        })
    }

    /// Multiplies slice `i` of sector `c` along `axis` by `f(weights[c][i])`.
    pub fn scale_leg(
        &mut self,
        axis: usize,
        weights: &BondVector,
        f: impl Fn(f64) -> f64,
    ) -> BlockResult<()> {
        if axis >= self.rank() {
            return Err(BlockError::AxisOutOfRange(axis, self.rank()));
        }
        for (key, block) in self.blocks.iter_mut() {
            let w = weights
                .sectors
                .get(&key[axis])
                .ok_or(BlockError::MissingSector(key[axis]))?;
            if w.len() != block.shape()[axis] {
                return Err(BlockError::SectorMismatch {
                    charge: key[axis],
                    left: w.len(),
                    right: block.shape()[axis],
                });
            }
            for (i, mut lane) in block.axis_iter_mut(Axis(axis)).enumerate() {
                let factor = f(w[i]);
                lane.mapv_inplace(|z| z * factor);
            }
        }
        Ok(())
    }

    /// Multiplies the slice at `(sector, offset)` along `axis` by `f(sector, offset)`.
    pub fn scale_axis_by(
        &mut self,
        axis: usize,
        f: impl Fn(Charge, usize) -> C64,
    ) -> BlockResult<()> {
        if axis >= self.rank() {
            return Err(BlockError::AxisOutOfRange(axis, self.rank()));
        }
        for (key, block) in self.blocks.iter_mut() {
            for (i, mut lane) in block.axis_iter_mut(Axis(axis)).enumerate() {
                let factor = f(key[axis], i);
                lane.mapv_inplace(|z| z * factor);
            }
        }
        Ok(())
    }

    /// Sums over pairs of legs `(self[axes_a[i]], other[axes_b[i]])`. The
    /// result carries the free legs of `self` followed by those of `other`.
    pub fn contract(
        &self,
        axes_a: &[usize],
        other: &BlockTensor,
        axes_b: &[usize],
    ) -> BlockResult<Self> {
        if self.group != other.group {
            return Err(BlockError::GroupMismatch);
        }
        if axes_a.len() != axes_b.len() {
            return Err(BlockError::BadPartition);
        }
        for (&i, &j) in axes_a.iter().zip(axes_b) {
            if i >= self.rank() {
                return Err(BlockError::AxisOutOfRange(i, self.rank()));
            }
            if j >= other.rank() {
                return Err(BlockError::AxisOutOfRange(j, other.rank()));
            }
            let (la, lb) = (&self.legs[i], &other.legs[j]);
            if la.dir == lb.dir {
                return Err(BlockError::DirectionMismatch(i, j));
            }
            for (c, &n) in &la.sectors {
                if let Some(&m) = lb.sectors.get(c) {
                    if m != n {
                        return Err(BlockError::SectorMismatch {
                            charge: *c,
                            left: n,
                            right: m,
                        });
                    }
                }
            }
        }
        let free_a: Vec<usize> = (0..self.rank()).filter(|a| !axes_a.contains(a)).collect();
        let free_b: Vec<usize> = (0..other.rank()).filter(|a| !axes_b.contains(a)).collect();
        let order_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
        let order_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();

        let mut legs: Vec<Leg> = free_a.iter().map(|&a| self.legs[a].clone()).collect();
        legs.extend(free_b.iter().map(|&b| other.legs[b].clone()));
        let mut out = Self::new(self.group, legs);

        let mut by_inner: HashMap<Vec<Charge>, Vec<(Vec<Charge>, Array2<C64>)>> = HashMap::new();
        for (key, block) in &other.blocks {
            let inner: Vec<Charge> = axes_b.iter().map(|&b| key[b]).collect();
            let outer: Vec<Charge> = free_b.iter().map(|&b| key[b]).collect();
            let rows: usize = axes_b.iter().map(|&b| block.shape()[b]).product();
            let cols: usize = free_b.iter().map(|&b| block.shape()[b]).product();
            by_inner
                .entry(inner)
                .or_default()
                .push((outer, to_matrix(block, &order_b, rows, cols)));
        }
        for (key, block) in &self.blocks {
            let inner: Vec<Charge> = axes_a.iter().map(|&a| key[a]).collect();
            let Some(partners) = by_inner.get(&inner) else {
                continue;
            };
            let rows: usize = free_a.iter().map(|&a| block.shape()[a]).product();
            let cols: usize = axes_a.iter().map(|&a| block.shape()[a]).product();
            let mat = to_matrix(block, &order_a, rows, cols);
            let outer_a: Vec<Charge> = free_a.iter().map(|&a| key[a]).collect();
            for (outer_b, bmat) in partners {
                let new_key: Vec<Charge> = outer_a.iter().chain(outer_b).copied().collect();
                let shape = out.block_shape(&new_key);
                let prod = from_matrix(mat.dot(bmat), &shape);
                match out.blocks.get_mut(&new_key) {
                    Some(acc) => *acc += &prod,
                    None => {
                        out.blocks.insert(new_key, prod);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Singular value decomposition across the `rows | cols` bipartition,
    /// truncated globally over all sectors.
    ///
    /// Singular values are ranked by size; ties go to the lower charge and
    /// then the lower index. Up to `chi_max` are kept, values with
    /// `s² < cutoff · Σ s²` are dropped, as is anything below
    /// [`RELATIVE_ZERO`] times the largest value.
    pub fn truncated_svd(
        &self,
        rows: &[usize],
        cols: &[usize],
        trunc: Truncation,
    ) -> BlockResult<SvdResult> {
        if trunc.chi_max == Some(0) {
            return Err(BlockError::InvalidChi);
        }
        let rank = self.rank();
        let mut seen = vec![false; rank];
        for &a in rows.iter().chain(cols) {
            if a >= rank || std::mem::replace(&mut seen[a], true) {
                return Err(BlockError::BadPartition);
            }
        }
        if seen.contains(&false) || rows.is_empty() || cols.is_empty() {
            return Err(BlockError::BadPartition);
        }
        let order: Vec<usize> = rows.iter().chain(cols).copied().collect();
        let extent = |keys: &[usize], key: &[Charge]| -> Vec<usize> {
            keys.iter()
                .zip(key)
                .map(|(&a, c)| self.legs[a].extent(c))
                .collect()
        };

        struct Sector {
            row_keys: BTreeMap<Vec<Charge>, usize>,
            col_keys: BTreeMap<Vec<Charge>, usize>,
            nrows: usize,
            ncols: usize,
        }
        let mut sectors: BTreeMap<Charge, Sector> = BTreeMap::new();
        for key in self.blocks.keys() {
            let rk: Vec<Charge> = rows.iter().map(|&a| key[a]).collect();
            let ck: Vec<Charge> = cols.iter().map(|&a| key[a]).collect();
            let q = self
                .group
                .fuse(rows.iter().map(|&a| self.legs[a].dir).zip(&rk));
            let sec = sectors.entry(q).or_insert_with(|| Sector {
                row_keys: BTreeMap::new(),
                col_keys: BTreeMap::new(),
                nrows: 0,
                ncols: 0,
            });
            if !sec.row_keys.contains_key(&rk) {
                let n: usize = extent(rows, &rk).iter().product();
                sec.row_keys.insert(rk, sec.nrows);
                sec.nrows += n;
            }
            if !sec.col_keys.contains_key(&ck) {
                let n: usize = extent(cols, &ck).iter().product();
                sec.col_keys.insert(ck, sec.ncols);
                sec.ncols += n;
            }
        }

        let mut decomposed: BTreeMap<Charge, (Array2<C64>, Vec<f64>, Array2<C64>)> =
            BTreeMap::new();
        for (&q, sec) in &sectors {
            let mut m = Array2::<C64>::zeros((sec.nrows, sec.ncols));
            for (key, block) in &self.blocks {
                let rk: Vec<Charge> = rows.iter().map(|&a| key[a]).collect();
                let Some(&r0) = sec.row_keys.get(&rk) else {
                    continue;
                };
                let ck: Vec<Charge> = cols.iter().map(|&a| key[a]).collect();
                let c0 = sec.col_keys[&ck];
                let nr: usize = extent(rows, &rk).iter().product();
                let nc: usize = extent(cols, &ck).iter().product();
                m.slice_mut(s![r0..r0 + nr, c0..c0 + nc])
                    .assign(&to_matrix(block, &order, nr, nc));
            }
            decomposed.insert(q, svd(&m)?);
        }

        let mut ranked: Vec<(f64, Charge, usize)> = decomposed
            .iter()
            .flat_map(|(&q, (_, s, _))| s.iter().enumerate().map(move |(i, &v)| (v, q, i)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let total: f64 = ranked.iter().map(|r| r.0 * r.0).sum();
        let largest = ranked.first().map_or(0.0, |r| r.0);
        if !(largest > 0.0) {
            return Err(BlockError::EmptySpectrum);
        }
        let limit = trunc.chi_max.unwrap_or(usize::MAX);
        let keep = ranked
            .iter()
            .take(limit)
            .take_while(|r| r.0 * r.0 >= trunc.cutoff * total && r.0 >= RELATIVE_ZERO * largest)
            .count()
            .max(1);
        let dropped: f64 = ranked[keep..].iter().map(|r| r.0 * r.0).sum();
        let mut kept: BTreeMap<Charge, usize> = BTreeMap::new();
        for r in &ranked[..keep] {
            *kept.entry(r.1).or_default() += 1;
        }

        let bond = BondVector {
            sectors: kept
                .iter()
                .map(|(&q, &n)| (q, decomposed[&q].1[..n].to_vec()))
                .collect(),
        };
        let mut left_legs: Vec<Leg> = rows.iter().map(|&a| self.legs[a].clone()).collect();
        left_legs.push(bond.leg(Direction::Out));
        let mut right_legs = vec![bond.leg(Direction::In)];
        right_legs.extend(cols.iter().map(|&a| self.legs[a].clone()));
        let mut left = Self::new(self.group, left_legs);
        let mut right = Self::new(self.group, right_legs);
        for (&q, &n) in &kept {
            let (u, _, vt) = &decomposed[&q];
            let sec = &sectors[&q];
            for (rk, &r0) in &sec.row_keys {
                let mut shape = extent(rows, rk);
                let nr: usize = shape.iter().product();
                shape.push(n);
                let block = from_matrix(u.slice(s![r0..r0 + nr, ..n]).to_owned(), &shape);
                let mut key = rk.clone();
                key.push(q);
                left.blocks.insert(key, block);
            }
            for (ck, &c0) in &sec.col_keys {
                let ext = extent(cols, ck);
                let nc: usize = ext.iter().product();
                let mut shape = vec![n];
                shape.extend(ext);
                let block = from_matrix(vt.slice(s![..n, c0..c0 + nc]).to_owned(), &shape);
                let mut key = vec![q];
                key.extend(ck.iter().copied());
                right.blocks.insert(key, block);
            }
        }
        Ok(SvdResult {
            left,
            singular_values: bond,
            right,
            discarded_weight: dropped,
            total_weight: total,
        })
    }
}
