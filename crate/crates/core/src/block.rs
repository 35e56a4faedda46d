//! Block-matrix algebra for operators `A(theta)` acting on the circle.
//!
//! An operator is stored as its angle Fourier coefficients `A(l)`, each a dense
//! matrix in the mode basis `j in [-J, J]`. The block `A^{[i]}_{[j]}(l)` is the
//! restriction to `E_i <- E_j` with `E_n = span(e^{inx}, e^{-inx})`, ordered
//! `(+n, -n)`, and `E_0` one-dimensional.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dense::{gemm_acc, CMat};
use crate::error::{Error, Result};
use crate::spectral::{bracket, ell_norm, FrequencyPoint, StateVector, Truncation, C64, ONE, ZERO};

pub fn block_dim(i: usize) -> usize {
    if i == 0 {
        1
    } else {
        2
    }
}

/// Modes spanning `E_i`, in block order.
pub fn block_modes(i: usize) -> ([i64; 2], usize) {
    if i == 0 {
        ([0, 0], 1)
    } else {
        ([i as i64, -(i as i64)], 2)
    }
}

#[inline]
fn times_i(v: C64) -> C64 {
    C64::new(-v.im, v.re)
}

/// A 1x1, 1x2, 2x1 or 2x2 complex matrix, stored row-major in a 2x2 array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub rows: usize,
    pub cols: usize,
    pub a: [C64; 4],
}

impl Block {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Block {
            rows,
            cols,
            a: [ZERO; 4],
        }
    }

    pub fn for_pair(i: usize, j: usize) -> Self {
        Self::zeros(block_dim(i), block_dim(j))
    }

    pub fn identity(i: usize) -> Self {
        let mut b = Self::for_pair(i, i);
        for r in 0..b.rows {
            b.a[r * 2 + r] = ONE;
        }
        b
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.a[r * 2 + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.a[r * 2 + c] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().all(|v| *v == ZERO)
    }

    pub fn adjoint(&self) -> Block {
        let mut out = Block::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c).conj());
            }
        }
        out
    }

    pub fn frobenius_sqr(&self) -> f64 {
        self.a.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Largest singular value in closed form.
    pub fn spectral_norm(&self) -> f64 {
        match (self.rows, self.cols) {
            (1, 1) => self.a[0].norm(),
            (2, 2) => {
                let f = self.frobenius_sqr();
                let det = self.a[0] * self.a[3] - self.a[1] * self.a[2];
                let disc = (f * f - 4.0 * det.norm_sqr()).max(0.0);
                (0.5 * (f + disc.sqrt())).sqrt()
            }
            _ => self.frobenius_sqr().sqrt(),
        }
    }

    pub fn matmul(&self, other: &Block) -> Block {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Block::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for c in 0..other.cols {
                let mut acc = ZERO;
                for k in 0..self.cols {
                    acc += self.get(r, k) * other.get(k, c);
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    pub fn add(&self, other: &Block) -> Block {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = *self;
        for (a, b) in out.a.iter_mut().zip(&other.a) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Block) -> Block {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = *self;
        for (a, b) in out.a.iter_mut().zip(&other.a) {
            *a -= b;
        }
        out
    }

    /// Eigenvalues (ascending) and orthonormal eigenvectors (as columns) of
    /// a Hermitian 1x1 or 2x2 block, each eigenvector phase-fixed so that its
    /// first nonzero component is real and positive.
    pub fn hermitian_eigen(&self) -> ([f64; 2], Block) {
        debug_assert_eq!(self.rows, self.cols);
        if self.rows == 1 {
            let mut u = Block::zeros(1, 1);
            u.a[0] = ONE;
            return ([self.a[0].re, f64::NAN], u);
        }
        let a = self.get(0, 0).re;
        let d = self.get(1, 1).re;
        // average the two off-diagonal entries to stay Hermitian
        let b = (self.get(0, 1) + self.get(1, 0).conj()) * 0.5;
        let mut u = Block::zeros(2, 2);
        if b == ZERO {
            let (lo, hi, first_low) = if a <= d { (a, d, true) } else { (d, a, false) };
            if first_low {
                u.set(0, 0, ONE);
                u.set(1, 1, ONE);
            } else {
                u.set(1, 0, ONE);
                u.set(0, 1, ONE);
            }
            return ([lo, hi], u);
        }
        let mean = 0.5 * (a + d);
        let h = 0.5 * (a - d);
        let r = h.hypot(b.norm());
        // stable eigenvector choices, see (A - lambda) v = 0 row by row
        let (v_lo, v_hi) = if h >= 0.0 {
            ([b, C64::new(-(h + r), 0.0)], [C64::new(r + h, 0.0), b.conj()])
        } else {
            ([C64::new(r - h, 0.0), -b.conj()], [b, C64::new(r - h, 0.0)])
        };
        for (col, v) in [v_lo, v_hi].iter().enumerate() {
            // squaring would underflow for off-diagonals near 1e-160
            let nrm = v[0].norm().hypot(v[1].norm());
            let lead = if v[0] != ZERO { v[0] } else { v[1] };
            let phase = lead.conj() / lead.norm();
            u.set(0, col, v[0] * phase / nrm);
            u.set(1, col, v[1] * phase / nrm);
        }
        ([mean - r, mean + r], u)
    }

    pub fn scale(&self, c: C64) -> Block {
        let mut out = *self;
        for a in &mut out.a {
            *a *= c;
        }
        out
    }
}

/// Weights of a decay norm `|A|^s_{s+m_left, s+m_right}`, i.e. entries are
/// weighted by `<l,h>^s <i>^{m_right} <j>^{-m_left}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub s: f64,
    pub m_left: f64,
    pub m_right: f64,
}

impl NormSpec {
    pub fn plain(s: f64) -> Self {
        NormSpec {
            s,
            m_left: 0.0,
            m_right: 0.0,
        }
    }

    /// `|A|^s_{s-m, s+m}`.
    pub fn weighted(s: f64, m: f64) -> Self {
        NormSpec {
            s,
            m_left: -m,
            m_right: m,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockOperator {
    trunc: Truncation,
    slices: Vec<Option<CMat>>,
}

impl PartialEq for BlockOperator {
    /// Absent slices compare equal to explicit zero slices.
    fn eq(&self, other: &Self) -> bool {
        if self.trunc != other.trunc {
            return false;
        }
        self.slices
            .iter()
            .zip(&other.slices)
            .all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(x), None) | (None, Some(x)) => x.is_zero(),
                (Some(x), Some(y)) => x == y,
            })
    }
}

impl BlockOperator {
    pub fn zeros(trunc: Truncation) -> Self {
        BlockOperator {
            trunc,
            slices: vec![None; trunc.n_ell()],
        }
    }

    pub fn identity(trunc: Truncation) -> Self {
        Self::multiplier(trunc, |_| 1.0)
    }

    /// Time-independent Fourier multiplier `e^{ijx} -> f(j) e^{ijx}`.
    pub fn multiplier(trunc: Truncation, f: impl Fn(i64) -> f64) -> Self {
        let mut op = Self::zeros(trunc);
        let n = trunc.n_modes();
        let mut m = CMat::zeros(n, n);
        for p in 0..n {
            m.set(p, p, C64::new(f(trunc.mode_at(p)), 0.0));
        }
        op.slices[trunc.ell_center()] = Some(m);
        op
    }

    pub fn trunc(&self) -> &Truncation {
        &self.trunc
    }

    pub fn slices(&self) -> &[Option<CMat>] {
        &self.slices
    }

    pub fn slice(&self, idx: usize) -> Option<&CMat> {
        self.slices[idx].as_ref()
    }

    /// Mutable slice, materialized as zeros if absent.
    pub fn slice_mut(&mut self, idx: usize) -> &mut CMat {
        let n = self.trunc.n_modes();
        self.slices[idx].get_or_insert_with(|| CMat::zeros(n, n))
    }

    pub fn set_slice(&mut self, idx: usize, slice: Option<CMat>) {
        if let Some(s) = &slice {
            assert_eq!((s.rows, s.cols), (self.trunc.n_modes(), self.trunc.n_modes()));
        }
        self.slices[idx] = slice;
    }

    pub fn entry(&self, idx: usize, n: i64, m: i64) -> C64 {
        let t = &self.trunc;
        match &self.slices[idx] {
            None => ZERO,
            Some(s) => s.get(
                (n + t.j_max as i64) as usize,
                (m + t.j_max as i64) as usize,
            ),
        }
    }

    pub fn set_entry(&mut self, idx: usize, n: i64, m: i64, v: C64) {
        let jm = self.trunc.j_max as i64;
        self.slice_mut(idx)
            .set((n + jm) as usize, (m + jm) as usize, v);
    }

    pub fn block(&self, idx: usize, i: usize, j: usize) -> Block {
        let mut b = Block::for_pair(i, j);
        if let Some(s) = &self.slices[idx] {
            read_block(s, self.trunc.j_max, i, j, &mut b);
        }
        b
    }

    pub fn set_block(&mut self, idx: usize, i: usize, j: usize, b: &Block) {
        assert_eq!((b.rows, b.cols), (block_dim(i), block_dim(j)));
        let jm = self.trunc.j_max;
        let s = self.slice_mut(idx);
        write_block(s, jm, i, j, b);
    }

    pub fn is_zero(&self) -> bool {
        self.slices.iter().flatten().all(|s| s.is_zero())
    }

    /// Drops slices that are identically zero.
    pub fn prune(&mut self) {
        for s in &mut self.slices {
            if s.as_ref().is_some_and(|m| m.is_zero()) {
                *s = None;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices
            .iter()
            .flatten()
            .fold(0.0, |m, s| m.max(s.max_abs()))
    }

    /// Sum of squared moduli of all entries over all angle modes.
    pub fn frobenius_sqr(&self) -> f64 {
        self.slices
            .iter()
            .flatten()
            .map(|s| s.data.iter().map(|v| v.norm_sqr()).sum::<f64>())
            .sum()
    }

    /// `(A^*)(l) = A(-l)^H`.
    pub fn adjoint(&self) -> Self {
        let t = self.trunc;
        let slices = (0..t.n_ell())
            .map(|idx| self.slices[t.ell_neg(idx)].as_ref().map(|s| s.adjoint()))
            .collect();
        BlockOperator { trunc: t, slices }
    }

    /// Max entrywise deviation of `A` from `A^*`.
    pub fn hermitian_deviation(&self) -> f64 {
        let t = self.trunc;
        let n = t.n_modes();
        let mut dev: f64 = 0.0;
        for idx in 0..t.n_ell() {
            let neg = t.ell_neg(idx);
            match (&self.slices[idx], &self.slices[neg]) {
                (None, None) => {}
                (Some(a), None) | (None, Some(a)) => dev = dev.max(a.max_abs()),
                (Some(a), Some(b)) => {
                    for r in 0..n {
                        for c in 0..n {
                            dev = dev.max((a.get(r, c) - b.get(c, r).conj()).norm());
                        }
                    }
                }
            }
        }
        dev
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian_deviation() == 0.0
    }

    /// `(A + A^*)/2`, exactly Hermitian.
    pub fn hermitian_symmetrize(&self) -> Self {
        let t = self.trunc;
        let n = t.n_modes();
        let slices = (0..t.n_ell())
            .map(|idx| {
                let neg = t.ell_neg(idx);
                if self.slices[idx].is_none() && self.slices[neg].is_none() {
                    return None;
                }
                let mut out = CMat::zeros(n, n);
                for r in 0..n {
                    for c in 0..n {
                        let a = self.slices[idx].as_ref().map_or(ZERO, |s| s.get(r, c));
                        let b = self.slices[neg].as_ref().map_or(ZERO, |s| s.get(c, r));
                        out.set(r, c, (a + b.conj()) * 0.5);
                    }
                }
                Some(out)
            })
            .collect();
        BlockOperator { trunc: t, slices }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: C64, other: &BlockOperator) {
        assert_eq!(self.trunc, other.trunc, "truncation mismatch");
        for (idx, s) in other.slices.iter().enumerate() {
            if let Some(s) = s {
                self.slice_mut(idx).axpy(alpha, s);
            }
        }
    }

    pub fn add(&self, other: &BlockOperator) -> Self {
        let mut out = self.clone();
        out.axpy(ONE, other);
        out
    }

    pub fn sub(&self, other: &BlockOperator) -> Self {
        let mut out = self.clone();
        out.axpy(-ONE, other);
        out
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut out = self.clone();
        for s in out.slices.iter_mut().flatten() {
            s.scale(c);
        }
        out
    }

    /// Operator product with the angle convolution
    /// `(AB)(l) = sum_{l'} A(l - l') B(l')`; modes outside `[-L, L]^d` dropped.
    pub fn product(&self, other: &BlockOperator) -> Self {
        assert_eq!(self.trunc, other.trunc, "truncation mismatch");
        let t = self.trunc;
        let n = t.n_modes();
        let pairs = convolution_pairs(&t);
        let slices: Vec<Option<CMat>> = pairs
            .par_iter()
            .map(|list| {
                let mut out: Option<CMat> = None;
                for &(ia, ib) in list {
                    if let (Some(a), Some(b)) = (&self.slices[ia], &other.slices[ib]) {
                        let acc = out.get_or_insert_with(|| CMat::zeros(n, n));
                        gemm_acc(acc, ONE, a, b);
                    }
                }
                out
            })
            .collect();
        BlockOperator { trunc: t, slices }
    }

    /// `i[A, B]`.
    pub fn commutator_i(&self, other: &BlockOperator) -> Self {
        let ab = self.product(other);
        let ba = other.product(self);
        let mut out = ab.sub(&ba);
        for s in out.slices.iter_mut().flatten() {
            for v in &mut s.data {
                *v = times_i(*v);
            }
        }
        out
    }

    /// `i[G, X]` for Hermitian `G` and `X`, as `i(GX - (GX)^*)`; one product
    /// and an exactly Hermitian result.
    pub fn commutator_i_hermitian(&self, other: &BlockOperator) -> Self {
        let p = self.product(other);
        let t = self.trunc;
        let n = t.n_modes();
        let slices = (0..t.n_ell())
            .map(|idx| {
                let neg = t.ell_neg(idx);
                let (a, b) = (&p.slices[idx], &p.slices[neg]);
                if a.is_none() && b.is_none() {
                    return None;
                }
                let mut out = CMat::zeros(n, n);
                for r in 0..n {
                    for c in 0..n {
                        let x = a.as_ref().map_or(ZERO, |s| s.get(r, c));
                        let y = b.as_ref().map_or(ZERO, |s| s.get(c, r)).conj();
                        out.set(r, c, times_i(x - y));
                    }
                }
                Some(out)
            })
            .collect();
        BlockOperator { trunc: t, slices }
    }

    /// `omega . d_theta`: multiplies slice `l` by `i omega.l`.
    pub fn omega_derivative(&self, omega: &FrequencyPoint) -> Self {
        let t = self.trunc;
        let mut out = self.clone();
        for (idx, s) in out.slices.iter_mut().enumerate() {
            if let Some(s) = s {
                let f = omega.dot(&t.ell_of(idx));
                s.scale(C64::new(0.0, f));
            }
        }
        out
    }

    /// Splits into `|i - j| < N, |l| < N` and the remainder.
    pub fn cutoff(&self, big_n: usize) -> (Self, Self) {
        let t = self.trunc;
        let mut head = Self::zeros(t);
        let mut tail = Self::zeros(t);
        for (idx, s) in self.slices.iter().enumerate() {
            let Some(s) = s else { continue };
            if ell_norm(&t.ell_of(idx)) >= big_n {
                tail.slices[idx] = Some(s.clone());
                continue;
            }
            let mut h = s.clone();
            let mut tl = CMat::zeros(s.rows, s.cols);
            let jm = t.j_max as i64;
            for r in 0..s.rows {
                for c in 0..s.cols {
                    let bi = (r as i64 - jm).unsigned_abs() as usize;
                    let bj = (c as i64 - jm).unsigned_abs() as usize;
                    if bi.abs_diff(bj) >= big_n {
                        tl.set(r, c, s.get(r, c));
                        h.set(r, c, ZERO);
                    }
                }
            }
            head.slices[idx] = Some(h);
            tail.slices[idx] = Some(tl);
        }
        (head, tail)
    }

    /// Angle average of the diagonal blocks: entries with `l = 0` and
    /// `|n| = |m|`.
    pub fn block_diagonal_average(&self) -> Self {
        let t = self.trunc;
        let mut out = Self::zeros(t);
        let c = t.ell_center();
        if let Some(s) = &self.slices[c] {
            let mut d = CMat::zeros(s.rows, s.cols);
            let jm = t.j_max as i64;
            for r in 0..s.rows {
                for q in 0..s.cols {
                    if (r as i64 - jm).abs() == (q as i64 - jm).abs() {
                        d.set(r, q, s.get(r, q));
                    }
                }
            }
            out.slices[c] = Some(d);
        }
        out
    }

    /// True when the only nonzero entries sit at `l = 0`, `|n| = |m|`.
    pub fn is_time_independent_block_diagonal(&self) -> bool {
        let t = self.trunc;
        let jm = t.j_max as i64;
        self.slices.iter().enumerate().all(|(idx, s)| match s {
            None => true,
            Some(s) if idx != t.ell_center() => s.is_zero(),
            Some(s) => (0..s.rows).all(|r| {
                (0..s.cols).all(|q| {
                    (r as i64 - jm).abs() == (q as i64 - jm).abs() || s.get(r, q) == ZERO
                })
            }),
        })
    }

    /// Weighted s-decay norm
    /// `(sum_{l,h} <l,h>^{2s} sup_{|i-j|=h} <i>^{2 m_right} |A_ij(l)|^2 <j>^{-2 m_left})^{1/2}`.
    pub fn decay_norm(&self, spec: &NormSpec) -> f64 {
        let t = self.trunc;
        let nb = t.n_blocks();
        let wr: Vec<f64> = (0..nb)
            .map(|i| bracket(i as i64).powf(2.0 * spec.m_right))
            .collect();
        let wl: Vec<f64> = (0..nb)
            .map(|j| bracket(j as i64).powf(-2.0 * spec.m_left))
            .collect();
        let mut total = 0.0;
        let mut sup = vec![0.0f64; nb];
        let mut b = Block::zeros(2, 2);
        for (idx, s) in self.slices.iter().enumerate() {
            let Some(s) = s else { continue };
            sup.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..nb {
                for j in 0..nb {
                    b.rows = block_dim(i);
                    b.cols = block_dim(j);
                    read_block(s, t.j_max, i, j, &mut b);
                    let nrm = b.spectral_norm();
                    if nrm == 0.0 {
                        continue;
                    }
                    let w = wr[i] * nrm * nrm * wl[j];
                    let h = i.abs_diff(j);
                    if w > sup[h] {
                        sup[h] = w;
                    }
                }
            }
            let lnorm = ell_norm(&t.ell_of(idx));
            for (h, v) in sup.iter().enumerate() {
                if *v > 0.0 {
                    let br = lnorm.max(h).max(1) as f64;
                    total += br.powf(2.0 * spec.s) * v;
                }
            }
        }
        total.sqrt()
    }

    /// `A(theta) = sum_l A(l) e^{i l.theta}` as a dense matrix.
    pub fn eval_at(&self, theta: &[f64]) -> CMat {
        let t = self.trunc;
        let n = t.n_modes();
        let mut out = CMat::zeros(n, n);
        for (idx, s) in self.slices.iter().enumerate() {
            if let Some(s) = s {
                let phase = C64::from_polar(1.0, crate::spectral::dot(theta, &t.ell_of(idx)));
                out.axpy(phase, s);
            }
        }
        out
    }

    pub fn apply(&self, u: &StateVector, theta: &[f64]) -> Result<StateVector> {
        if u.j_max != self.trunc.j_max {
            return Err(Error::TruncationMismatch(format!(
                "state J = {} vs operator J = {}",
                u.j_max, self.trunc.j_max
            )));
        }
        if theta.len() != self.trunc.d {
            return Err(Error::TruncationMismatch(format!(
                "angle of dimension {} vs d = {}",
                theta.len(),
                self.trunc.d
            )));
        }
        Ok(StateVector {
            j_max: u.j_max,
            coeffs: self.eval_at(theta).matvec(&u.coeffs),
        })
    }

    pub fn to_checkpoint(&self) -> BlockCheckpoint {
        let t = self.trunc;
        let mut blocks = Vec::new();
        for (idx, s) in self.slices.iter().enumerate() {
            let Some(s) = s else { continue };
            let ell = t.ell_of(idx);
            let mut b = Block::zeros(2, 2);
            for i in 0..t.n_blocks() {
                for j in 0..t.n_blocks() {
                    b.rows = block_dim(i);
                    b.cols = block_dim(j);
                    read_block(s, t.j_max, i, j, &mut b);
                    if b.is_zero() {
                        continue;
                    }
                    let mut flat = Vec::with_capacity(b.rows * b.cols);
                    for r in 0..b.rows {
                        for c in 0..b.cols {
                            let v = b.get(r, c);
                            flat.push([v.re, v.im]);
                        }
                    }
                    blocks.push(BlockTriplet {
                        ell: ell.clone(),
                        i,
                        j,
                        block: flat,
                    });
                }
            }
        }
        BlockCheckpoint {
            d: t.d,
            j_max: t.j_max,
            l_max: t.l_max,
            blocks,
        }
    }

    pub fn from_checkpoint(cp: &BlockCheckpoint) -> Result<Self> {
        let t = Truncation::new(cp.d, cp.j_max, cp.l_max)?;
        let mut op = Self::zeros(t);
        for tr in &cp.blocks {
            let idx = t.ell_index(&tr.ell).ok_or_else(|| {
                Error::OutOfTruncation(format!("angle mode {:?}", tr.ell))
            })?;
            if tr.i > t.j_max || tr.j > t.j_max {
                return Err(Error::OutOfTruncation(format!("block ({}, {})", tr.i, tr.j)));
            }
            let (rows, cols) = (block_dim(tr.i), block_dim(tr.j));
            if tr.block.len() != rows * cols {
                return Err(Error::TruncationMismatch(format!(
                    "block ({}, {}) has {} entries, expected {}",
                    tr.i,
                    tr.j,
                    tr.block.len(),
                    rows * cols
                )));
            }
            let mut b = Block::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let [re, im] = tr.block[r * cols + c];
                    b.set(r, c, C64::new(re, im));
                }
            }
            op.set_block(idx, tr.i, tr.j, &b);
        }
        Ok(op)
    }
}

fn read_block(s: &CMat, j_max: usize, i: usize, j: usize, b: &mut Block) {
    let jm = j_max as i64;
    let (mi, ni) = block_modes(i);
    let (mj, nj) = block_modes(j);
    // unused slots must be zero, the 1x2 and 2x1 norms read all four
    *b = Block::zeros(ni, nj);
    for r in 0..ni {
        for c in 0..nj {
            b.set(
                r,
                c,
                s.get((mi[r] + jm) as usize, (mj[c] + jm) as usize),
            );
        }
    }
}

fn write_block(s: &mut CMat, j_max: usize, i: usize, j: usize, b: &Block) {
    let jm = j_max as i64;
    let (mi, ni) = block_modes(i);
    let (mj, nj) = block_modes(j);
    for r in 0..ni {
        for c in 0..nj {
            s.set((mi[r] + jm) as usize, (mj[c] + jm) as usize, b.get(r, c));
        }
    }
}

/// For every output angle index, the input pairs `(l1, l2)` with
/// `l1 + l2 = l`, ordered by `l1`.
pub fn convolution_pairs(t: &Truncation) -> Vec<Vec<(usize, usize)>> {
    let ells = t.all_ells();
    let mut pairs = vec![Vec::new(); t.n_ell()];
    let mut sum = vec![0i32; t.d];
    for (ia, la) in ells.iter().enumerate() {
        for (ib, lb) in ells.iter().enumerate() {
            for r in 0..t.d {
                sum[r] = la[r] + lb[r];
            }
            if let Some(out) = t.ell_index(&sum) {
                pairs[out].push((ia, ib));
            }
        }
    }
    pairs
}

/// Sparse block triplet exchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheckpoint {
    pub d: usize,
    #[serde(rename = "J")]
    pub j_max: usize,
    #[serde(rename = "L")]
    pub l_max: usize,
    pub blocks: Vec<BlockTriplet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTriplet {
    pub ell: Vec<i32>,
    pub i: usize,
    pub j: usize,
    pub block: Vec<[f64; 2]>,
}

impl Serialize for BlockOperator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_checkpoint().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BlockOperator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let cp = BlockCheckpoint::deserialize(d)?;
        BlockOperator::from_checkpoint(&cp).map_err(serde::de::Error::custom)
    }
}

/// Decay norm sup over the samples plus the largest difference quotient
/// between pairs of samples.
pub fn lipschitz_decay_norm(samples: &[(FrequencyPoint, &BlockOperator)], spec: &NormSpec) -> (f64, f64) {
    let sup = samples
        .iter()
        .map(|(_, a)| a.decay_norm(spec))
        .fold(0.0, f64::max);
    let mut lip: f64 = 0.0;
    for (p, (w1, a1)) in samples.iter().enumerate() {
        for (w2, a2) in &samples[p + 1..] {
            let dist = frequency_distance(w1, w2);
            if dist > 0.0 {
                lip = lip.max(a1.sub(a2).decay_norm(spec) / dist);
            }
        }
    }
    (sup, lip)
}

/// Euclidean distance between frequency points, including the torus speed.
pub fn frequency_distance(a: &FrequencyPoint, b: &FrequencyPoint) -> f64 {
    let mut acc: f64 = a
        .omega
        .iter()
        .zip(&b.omega)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    if let (Some(x), Some(y)) = (a.v, b.v) {
        acc += (x - y) * (x - y);
    }
    acc.sqrt()
}

#[derive(Clone, Debug)]
pub struct LieOutcome {
    pub op: BlockOperator,
    /// Max-abs entry of the last retained (coefficient-scaled) term.
    pub remainder: f64,
    pub terms: usize,
}

/// `sum_{p=1}^{order} ad_{iG}^p(X) / (p + shift)!`, stopping early once terms
/// fall below double precision relative to the partial sum.
pub fn lie_series(g: &BlockOperator, x: &BlockOperator, order: usize, shift: usize) -> Result<LieOutcome> {
    g.trunc().ensure_same(x.trunc())?;
    if order < 4 {
        return Err(Error::config("lie_order", format!("{order} is below 4")));
    }
    let hermitian = g.is_hermitian() && x.is_hermitian();
    let mut acc = BlockOperator::zeros(*g.trunc());
    let mut term = x.clone();
    let mut fact: f64 = (1..=shift).map(|v| v as f64).product();
    let mut first = 0.0;
    let mut last = 0.0;
    let mut terms = 0;
    if g.is_zero() || x.is_zero() {
        return Ok(LieOutcome { op: acc, remainder: 0.0, terms: 0 });
    }
    for p in 1..=order {
        term = if hermitian {
            g.commutator_i_hermitian(&term)
        } else {
            g.commutator_i(&term)
        };
        fact *= (p + shift) as f64;
        let size = term.max_abs() / fact;
        if p == 1 {
            first = size;
        } else if p == 2 && size >= 0.5 * first {
            return Err(Error::LieDivergence(format!(
                "second term {size:.3e} is not below half the first {first:.3e}"
            )));
        } else if p == order / 2 && size >= first {
            return Err(Error::LieDivergence(format!(
                "term {p} of size {size:.3e} has not decreased from {first:.3e}"
            )));
        }
        if size == 0.0 {
            break;
        }
        acc.axpy(C64::new(1.0 / fact, 0.0), &term);
        last = size;
        terms = p;
        if size <= 1e-17 * acc.max_abs() {
            break;
        }
    }
    Ok(LieOutcome { op: acc, remainder: last, terms })
}

/// `e^{iG} H e^{-iG}` through the truncated commutator series.
pub fn exp_conjugate(g: &BlockOperator, h: &BlockOperator, order: usize) -> Result<LieOutcome> {
    let mut out = lie_series(g, h, order, 0)?;
    out.op.axpy(ONE, h);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_operator;

    fn tr(j: usize, l: usize) -> Truncation {
        Truncation::new(1, j, l).unwrap()
    }

    #[test]
    fn closed_form_block_norms() {
        let mut b = Block::zeros(2, 2);
        b.set(0, 0, C64::new(3.0, 0.0));
        b.set(1, 1, C64::new(0.0, -4.0));
        assert!((b.spectral_norm() - 4.0).abs() < 1e-15);
        b.set(0, 1, C64::new(1.0, 1.0));
        let dense = CMat {
            rows: 2,
            cols: 2,
            data: b.a.to_vec(),
        };
        assert!((b.spectral_norm() - dense.spectral_norm()).abs() < 1e-13);
        let mut row = Block::zeros(1, 2);
        row.set(0, 0, C64::new(3.0, 0.0));
        row.set(0, 1, C64::new(0.0, 4.0));
        assert_eq!(row.spectral_norm(), 5.0);
    }

    #[test]
    fn hermitian_eigen_reconstructs() {
        let cases = [
            (2.0, 2.0, C64::new(0.0, 0.0)),
            (3.0, 1.0, C64::new(0.0, 0.0)),
            (1.0, 1.0, C64::new(0.3, -0.4)),
            (5.0, 5.0 + 1e-9, C64::new(1e-12, 2e-12)),
            (-1.0, 4.0, C64::new(0.0, 2.0)),
            (4.0, -1.0, C64::new(-2.0, 0.5)),
            (1.5, 1.5, C64::new(3e-170, -1e-170)),
        ];
        for (a, d, b) in cases {
            let mut m = Block::zeros(2, 2);
            m.set(0, 0, C64::new(a, 0.0));
            m.set(1, 1, C64::new(d, 0.0));
            m.set(0, 1, b);
            m.set(1, 0, b.conj());
            let (lam, u) = m.hermitian_eigen();
            assert!(lam[0] <= lam[1]);
            let mut dmat = Block::zeros(2, 2);
            dmat.set(0, 0, C64::new(lam[0], 0.0));
            dmat.set(1, 1, C64::new(lam[1], 0.0));
            let back = u.matmul(&dmat).matmul(&u.adjoint());
            assert!(back.sub(&m).spectral_norm() < 1e-14 * (1.0 + m.spectral_norm()));
            let uu = u.adjoint().matmul(&u);
            assert!(uu.sub(&Block::identity(1)).spectral_norm() < 1e-15);
            for c in 0..2 {
                let lead = if u.get(0, c) != ZERO { u.get(0, c) } else { u.get(1, c) };
                assert!(lead.im == 0.0 && lead.re > 0.0);
            }
        }
    }

    #[test]
    fn identity_norm_is_one() {
        let id = BlockOperator::identity(tr(6, 2));
        for s in [1.0, 2.0, 7.5] {
            assert_eq!(id.decay_norm(&NormSpec::plain(s)), 1.0);
        }
    }

    #[test]
    fn single_block_norm() {
        let t = tr(6, 2);
        let mut a = BlockOperator::zeros(t);
        let idx = t.ell_index(&[-2]).unwrap();
        let mut b = Block::for_pair(4, 1);
        b.set(0, 0, C64::new(0.0, 2.0));
        a.set_block(idx, 4, 1, &b);
        let spec = NormSpec {
            s: 2.0,
            m_left: 1.5,
            m_right: 0.5,
        };
        let want = 3f64.powf(2.0) * 4f64.powf(0.5) * 1f64.powf(-1.5) * 2.0;
        assert!((a.decay_norm(&spec) - want).abs() < 1e-13 * want);
    }

    #[test]
    fn cutoff_examples() {
        let t = tr(5, 3);
        let a = random_operator(t, 7, 0.0, None);
        let (h, tl) = a.cutoff(1);
        assert_eq!(h.add(&tl), a);
        for idx in 0..t.n_ell() {
            for i in 0..=5 {
                for j in 0..=5 {
                    let keep = idx == t.ell_center() && i == j;
                    assert_eq!(h.block(idx, i, j).is_zero(), !keep || a.block(idx, i, j).is_zero());
                }
            }
        }
        let (h, tl) = a.cutoff(11);
        assert_eq!(h, a);
        assert!(tl.is_zero());
    }

    #[test]
    fn omega_derivative_scales_slices() {
        let t = tr(4, 2);
        let a = random_operator(t, 3, 1.0, None);
        let om = FrequencyPoint::new(vec![1.3], None).unwrap();
        let da = a.omega_derivative(&om);
        assert!(da.slice(t.ell_center()).unwrap().is_zero());
        let idx = t.ell_index(&[2]).unwrap();
        let want = a.slice(idx).unwrap().get(3, 5) * C64::new(0.0, 2.6);
        assert!((da.slice(idx).unwrap().get(3, 5) - want).norm() < 1e-15);
        let b = random_operator(t, 4, 1.0, None);
        let lhs = a.add(&b.scaled(C64::new(2.0, -1.0))).omega_derivative(&om);
        let rhs = da.add(&b.omega_derivative(&om).scaled(C64::new(2.0, -1.0)));
        assert!(lhs.sub(&rhs).max_abs() < 1e-14);
    }

    #[test]
    fn decay_norm_matches_blockwise_definition() {
        let t = tr(6, 2);
        let a = random_operator(t, 4, 1.0, None);
        let spec = NormSpec { s: 1.5, m_left: -0.5, m_right: 1.0 };
        let mut total = 0.0;
        for idx in 0..t.n_ell() {
            let ln = ell_norm(&t.ell_of(idx));
            let mut sup = [0.0f64; 7];
            for i in 0..7 {
                for j in 0..7 {
                    let w = bracket(i as i64).powf(spec.m_right) * a.block(idx, i, j).spectral_norm()
                        * bracket(j as i64).powf(-spec.m_left);
                    let h = i.abs_diff(j);
                    sup[h] = sup[h].max(w * w);
                }
            }
            for (h, v) in sup.iter().enumerate() {
                total += (ln.max(h).max(1) as f64).powf(2.0 * spec.s) * v;
            }
        }
        let got = a.decay_norm(&spec);
        assert!((got - total.sqrt()).abs() <= 1e-13 * got, "{got} vs {}", total.sqrt());
    }

    #[test]
    fn product_with_identity() {
        let t = tr(5, 2);
        let a = random_operator(t, 11, 1.0, None);
        let id = BlockOperator::identity(t);
        assert_eq!(a.product(&id), a);
        assert_eq!(id.product(&a), a);
        let m1 = BlockOperator::multiplier(t, |j| j as f64);
        let m2 = BlockOperator::multiplier(t, |j| (j * j) as f64 + 0.5);
        assert_eq!(m1.product(&m2), BlockOperator::multiplier(t, |j| j as f64 * ((j * j) as f64 + 0.5)));
    }

    #[test]
    fn hermitian_symmetrize_properties() {
        let t = tr(4, 2);
        let a = random_operator(t, 5, 1.0, None);
        let h = a.hermitian_symmetrize();
        assert_eq!(h.hermitian_deviation(), 0.0);
        assert_eq!(h.hermitian_symmetrize(), h);
        let anti = a.sub(&a.adjoint());
        assert!(anti.hermitian_symmetrize().is_zero());
    }

    #[test]
    fn commutator_fast_path_agrees() {
        let t = tr(5, 2);
        let g = random_operator(t, 1, 1.0, None).hermitian_symmetrize();
        let x = random_operator(t, 2, 1.0, None).hermitian_symmetrize();
        let slow = g.commutator_i(&x);
        let fast = g.commutator_i_hermitian(&x);
        assert!(slow.sub(&fast).max_abs() < 1e-13);
        assert_eq!(fast.hermitian_deviation(), 0.0);
    }

    #[test]
    fn lie_series_trivial_cases() {
        let t = tr(4, 2);
        let h = random_operator(t, 9, 1.0, None).hermitian_symmetrize();
        let out = exp_conjugate(&BlockOperator::zeros(t), &h, 12).unwrap();
        assert_eq!(out.op, h);
        let m1 = BlockOperator::multiplier(t, |j| j as f64 * 0.01);
        let m2 = BlockOperator::multiplier(t, |j| (j * j) as f64);
        let out = exp_conjugate(&m1, &m2, 12).unwrap();
        assert_eq!(out.op, m2);
        assert!(exp_conjugate(&m1, &m2, 3).is_err());
    }

    #[test]
    fn lie_series_guard_trips_on_large_generator() {
        let t = tr(4, 2);
        let g = random_operator(t, 1, 1.0, None).hermitian_symmetrize().scaled(C64::new(50.0, 0.0));
        let x = random_operator(t, 2, 1.0, None).hermitian_symmetrize();
        assert!(matches!(exp_conjugate(&g, &x, 12), Err(Error::LieDivergence(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let t = Truncation::new(2, 3, 1).unwrap();
        let mut a = random_operator(t, 21, 1.0, Some(2));
        a.set_entry(0, 1, 1, C64::new(1.0 / 3.0, -1e-300));
        let text = serde_json::to_string(&a).unwrap();
        let back: BlockOperator = serde_json::from_str(&text).unwrap();
        assert_eq!(back, a);
        for (x, y) in a.slices().iter().zip(back.slices()) {
            if let (Some(x), Some(y)) = (x, y) {
                for (p, q) in x.data.iter().zip(&y.data) {
                    assert_eq!(p.re.to_bits(), q.re.to_bits());
                    assert_eq!(p.im.to_bits(), q.im.to_bits());
                }
            }
        }
        let bad = text.replace("\"J\":3", "\"J\":1");
        assert!(serde_json::from_str::<BlockOperator>(&bad).is_err());
    }
}
