//! Core problem model: dimensions, flat index maps and the matrix containers
//! shared by the solver and the perturbation engine.
//!
//! The estimation problem is posed over `M` datasets of `K` sources observed
//! for `T` samples. A demixing set holds one `K x K` matrix per dataset; a
//! target set holds one `K x K` target matrix `Q_k^(m1,m2)` per source index
//! `k` and ordered dataset pair `(m1, m2)`, with the symmetry
//! `Q_k^(m2,m1) = Q_k^(m1,m2)'` maintained exactly.
//!
//! Index conventions (documented once, used everywhere): multi-indices
//! `m, k, i, j, p, q` in the public API are 1-based, matching the usual
//! mathematical notation; flat vector positions are 0-based. The flat layout
//! of a demixing set stacks entries as `p + (q-1)K + (m-1)K^2 - 1`, i.e.
//! column-major within each dataset block, datasets in order.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Problem dimensions: `m` datasets, `k` sources per dataset, `t` samples,
/// and FIR length `l` (autocorrelation support `|tau| <= l-1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProblemDims {
    pub m: usize,
    pub k: usize,
    pub t: usize,
    pub l: usize,
}

impl ProblemDims {
    pub fn new(m: usize, k: usize, t: usize, l: usize) -> Result<Self> {
        if m == 0 || k == 0 || t == 0 || l == 0 {
            return Err(Error::Dimension(
                "all of M, K, T, L must be positive".into(),
            ));
        }
        if l > t {
            return Err(Error::Dimension(format!(
                "filter length L={l} exceeds sample count T={t}"
            )));
        }
        Ok(Self { m, k, t, l })
    }

    /// Number of free demixing parameters `M * K^2`.
    pub fn n_b(&self) -> usize {
        self.m * self.k * self.k
    }

    /// Number of independent target-matrix elements,
    /// `M K^2 (1 + M K) / 2`.
    pub fn m_q(&self) -> usize {
        self.m * self.k * self.k * (1 + self.m * self.k) / 2
    }
}

/// Flat position of demixing entry `B^(m)[p, q]` (1-based `m, p, q`):
/// `p + (q-1)K + (m-1)K^2 - 1`.
pub fn b_index(dims: &ProblemDims, m: usize, p: usize, q: usize) -> usize {
    debug_assert!(m >= 1 && m <= dims.m && p >= 1 && p <= dims.k && q >= 1 && q <= dims.k);
    (p - 1) + (q - 1) * dims.k + (m - 1) * dims.k * dims.k
}

/// One independent target-matrix element `Q_k^(m1,m2)[i, j]` in canonical
/// form: `m1 <= m2`, and `i >= j` whenever `m1 == m2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QElem {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub m1: usize,
    pub m2: usize,
}

impl QElem {
    /// Canonical representative of the symmetry class
    /// `{ Q_k^(m1,m2)[i,j], Q_k^(m2,m1)[j,i] }`.
    pub fn canonical(k: usize, i: usize, j: usize, m1: usize, m2: usize) -> Self {
        if m1 > m2 || (m1 == m2 && i < j) {
            QElem { k, i: j, j: i, m1: m2, m2: m1 }
        } else {
            QElem { k, i, j, m1, m2 }
        }
    }
}

/// Enumeration of the independent target elements and the inverse lookup.
///
/// The enumeration order is frozen for reproducibility: `m2` slowest, then
/// `m1 = 1..=m2`, then `k`, then column `j`, then row `i` (restricted to the
/// lower triangle `i >= j` when `m1 == m2`).
#[derive(Clone, Debug)]
pub struct QIndexer {
    elems: Vec<QElem>,
    pos: HashMap<QElem, usize>,
}

impl QIndexer {
    pub fn new(dims: &ProblemDims) -> Self {
        let (m, k) = (dims.m, dims.k);
        let mut elems = Vec::with_capacity(dims.m_q());
        for m2 in 1..=m {
            for m1 in 1..=m2 {
                for kk in 1..=k {
                    for j in 1..=k {
                        let i0 = if m1 == m2 { j } else { 1 };
                        for i in i0..=k {
                            elems.push(QElem { k: kk, i, j, m1, m2 });
                        }
                    }
                }
            }
        }
        debug_assert_eq!(elems.len(), dims.m_q());
        let pos = elems
            .iter()
            .enumerate()
            .map(|(r, e)| (*e, r))
            .collect::<HashMap<_, _>>();
        QIndexer { elems, pos }
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    /// Canonical elements in enumeration order.
    pub fn elems(&self) -> &[QElem] {
        &self.elems
    }

    pub fn elem(&self, r: usize) -> QElem {
        self.elems[r]
    }

    /// Flat position of `Q_k^(m1,m2)[i, j]`; symmetric duplicates map to the
    /// same position.
    pub fn index(&self, k: usize, i: usize, j: usize, m1: usize, m2: usize) -> Result<usize> {
        self.pos
            .get(&QElem::canonical(k, i, j, m1, m2))
            .copied()
            .ok_or_else(|| {
                Error::IndexOutOfRange(format!(
                    "target element (k={k}, i={i}, j={j}, m1={m1}, m2={m2})"
                ))
            })
    }
}

/// One demixing matrix per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DemixingSet {
    mats: Vec<DMatrix<f64>>,
    k: usize,
}

impl DemixingSet {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = mats
            .first()
            .map(|b| b.nrows())
            .ok_or_else(|| Error::Dimension("empty demixing set".into()))?;
        for b in &mats {
            if b.nrows() != k || b.ncols() != k {
                return Err(Error::Dimension("demixing matrices must share a square shape".into()));
            }
        }
        Ok(Self { mats, k })
    }

    pub fn identity(dims: &ProblemDims) -> Self {
        Self {
            mats: (0..dims.m).map(|_| DMatrix::identity(dims.k, dims.k)).collect(),
            k: dims.k,
        }
    }

    pub fn n_datasets(&self) -> usize {
        self.mats.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Dataset `m` (1-based).
    pub fn mat(&self, m: usize) -> &DMatrix<f64> {
        &self.mats[m - 1]
    }

    pub fn mat_mut(&mut self, m: usize) -> &mut DMatrix<f64> {
        &mut self.mats[m - 1]
    }

    pub fn mats(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    /// Flattens into the canonical parameter layout (column-major blocks).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.mats.len() * self.k * self.k);
        for b in &self.mats {
            v.extend_from_slice(b.as_slice());
        }
        v
    }

    pub fn from_flat(dims: &ProblemDims, v: &[f64]) -> Result<Self> {
        if v.len() != dims.n_b() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has length {}, expected {}",
                v.len(),
                dims.n_b()
            )));
        }
        let kk = dims.k * dims.k;
        let mats = (0..dims.m)
            .map(|m| DMatrix::from_column_slice(dims.k, dims.k, &v[m * kk..(m + 1) * kk]))
            .collect();
        Ok(Self { mats, k: dims.k })
    }
}

/// Target matrices `Q_k^(m1,m2)`, stored for every ordered dataset pair with
/// the transpose symmetry materialized exactly.
#[derive(Clone, Debug)]
pub struct TargetSet {
    blocks: Vec<DMatrix<f64>>, // [(k-1)*M*M + (m1-1)*M + (m2-1)]
    m: usize,
    k: usize,
}

impl TargetSet {
    /// Builds from the blocks with `m1 <= m2`; the remaining blocks are the
    /// exact transposes. `upper[(k-1)*P + pair_index(m1,m2)]` with pairs
    /// enumerated `(1,1), (1,2), ..., (1,M), (2,2), ..., (M,M)`.
    pub fn from_upper_blocks(m: usize, k: usize, upper: Vec<DMatrix<f64>>) -> Result<Self> {
        let pairs = m * (m + 1) / 2;
        if upper.len() != k * pairs {
            return Err(Error::Dimension(format!(
                "expected {} upper blocks, got {}",
                k * pairs,
                upper.len()
            )));
        }
        let mut blocks = vec![DMatrix::zeros(k, k); k * m * m];
        let mut it = upper.into_iter();
        for kk in 0..k {
            for m1 in 0..m {
                for m2 in m1..m {
                    let b = it.next().unwrap();
                    if b.nrows() != k || b.ncols() != k {
                        return Err(Error::Dimension("target blocks must be K x K".into()));
                    }
                    blocks[(kk * m + m2) * m + m1] = b.transpose();
                    blocks[(kk * m + m1) * m + m2] = b;
                }
            }
        }
        Ok(Self { blocks, m, k })
    }

    pub fn zeros(m: usize, k: usize) -> Self {
        Self { blocks: vec![DMatrix::zeros(k, k); k * m * m], m, k }
    }

    /// Diagonal target set from entries `d[(k, i, m1<=m2)]`, the layout
    /// produced by the expected-target computation.
    pub fn from_diagonal<F>(m: usize, k: usize, mut entry: F) -> Self
    where
        F: FnMut(usize, usize, usize, usize) -> f64, // (k, i, m1, m2) 1-based
    {
        let mut ts = Self::zeros(m, k);
        for kk in 1..=k {
            for m1 in 1..=m {
                for m2 in m1..=m {
                    for i in 1..=k {
                        let v = entry(kk, i, m1, m2);
                        ts.block_mut(kk, m1, m2)[(i - 1, i - 1)] = v;
                        if m1 != m2 {
                            ts.block_mut(kk, m2, m1)[(i - 1, i - 1)] = v;
                        }
                    }
                }
            }
        }
        ts
    }

    pub fn n_datasets(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Block `Q_k^(m1,m2)` (all indices 1-based).
    pub fn block(&self, k: usize, m1: usize, m2: usize) -> &DMatrix<f64> {
        &self.blocks[((k - 1) * self.m + m1 - 1) * self.m + m2 - 1]
    }

    pub fn block_mut(&mut self, k: usize, m1: usize, m2: usize) -> &mut DMatrix<f64> {
        &mut self.blocks[((k - 1) * self.m + m1 - 1) * self.m + m2 - 1]
    }

    /// True when every block is diagonal (within `tol` on off-diagonals).
    pub fn is_diagonal(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| {
            (0..b.nrows()).all(|r| (0..b.ncols()).all(|c| r == c || b[(r, c)].abs() <= tol))
        })
    }

    /// Adds `delta` to the independent element `Q_k^(m1,m2)[i, j]`; symmetric
    /// duplicates move together, so the stored transpose copy (and the
    /// mirrored entry inside a symmetric block) shift by the same amount.
    pub fn perturb(&mut self, e: &QElem, delta: f64) {
        let (k, i, j, m1, m2) = (e.k, e.i, e.j, e.m1, e.m2);
        self.block_mut(k, m1, m2)[(i - 1, j - 1)] += delta;
        if m1 != m2 {
            self.block_mut(k, m2, m1)[(j - 1, i - 1)] += delta;
        } else if i != j {
            self.block_mut(k, m1, m1)[(j - 1, i - 1)] += delta;
        }
    }

    /// Congruence transform by per-dataset diagonal scales:
    /// `Q_k^(m1,m2) <- D^(m1) Q_k^(m1,m2) D^(m2)` with
    /// `D^(m) = diag(scales[m-1])`.
    pub fn scale_congruence(&self, scales: &[Vec<f64>]) -> TargetSet {
        let mut out = self.clone();
        for kk in 1..=self.k {
            for m1 in 1..=self.m {
                for m2 in 1..=self.m {
                    let b = out.block_mut(kk, m1, m2);
                    for r in 0..self.k {
                        for c in 0..self.k {
                            b[(r, c)] *= scales[m1 - 1][r] * scales[m2 - 1][c];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Interference-to-source ratios, one entry per dataset and ordered source
/// pair `(i, j)` with `i != j`: the residual presence of source `j` in the
/// estimate of source `i` within dataset `m`.
#[derive(Clone, Debug)]
pub struct IsrTable {
    m: usize,
    k: usize,
    vals: Vec<f64>, // [(m-1)*K*K + (i-1)*K + (j-1)], diagonal slots unused
}

impl IsrTable {
    pub fn zeros(m: usize, k: usize) -> Self {
        Self { m, k, vals: vec![0.0; m * k * k] }
    }

    pub fn n_datasets(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, m: usize, i: usize, j: usize) -> f64 {
        self.vals[(m - 1) * self.k * self.k + (i - 1) * self.k + (j - 1)]
    }

    pub fn set(&mut self, m: usize, i: usize, j: usize, v: f64) {
        self.vals[(m - 1) * self.k * self.k + (i - 1) * self.k + (j - 1)] = v;
    }

    /// Mean over the `M * K(K-1)` off-diagonal cells (linear scale).
    pub fn total_normalized(&self) -> f64 {
        let mut s = 0.0;
        for m in 1..=self.m {
            for i in 1..=self.k {
                for j in 1..=self.k {
                    if i != j {
                        s += self.get(m, i, j);
                    }
                }
            }
        }
        s / (self.m * self.k * (self.k - 1)) as f64
    }

    pub fn total_db(&self) -> f64 {
        10.0 * self.total_normalized().log10()
    }

    pub fn get_db(&self, m: usize, i: usize, j: usize) -> f64 {
        10.0 * self.get(m, i, j).log10()
    }

    /// Off-diagonal cells in a fixed order: `(m, i, j)` with `m` slowest.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let (m, k) = (self.m, self.k);
        (1..=m).flat_map(move |mm| {
            (1..=k).flat_map(move |i| {
                (1..=k)
                    .filter(move |&j| j != i)
                    .map(move |j| (mm, i, j, self.get(mm, i, j)))
            })
        })
    }
}
