//! Small dense complex matrices: the per-angle slices of a block operator and
//! the evaluated operators used by the dynamics.

use matrixmultiply::CGemmOption;
use nalgebra::DMatrix;

use crate::spectral::{C64, ONE, ZERO};

/// Row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for p in 0..n {
            m.data[p * n + p] = ONE;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (p, &v) in diag.iter().enumerate() {
            m.data[p * n + p] = C64::new(v, 0.0);
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn adjoint(&self) -> CMat {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c].conj();
            }
        }
        out
    }

    pub fn scale(&mut self, alpha: C64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: C64, other: &CMat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == ZERO)
    }

    pub fn matmul(&self, other: &CMat) -> CMat {
        let mut out = CMat::zeros(self.rows, other.cols);
        gemm_acc(&mut out, ONE, self, other);
        out
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).fold(ZERO, |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    pub fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<C64>) -> CMat {
        let mut out = CMat::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.data[r * m.ncols() + c] = m[(r, c)];
            }
        }
        out
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        let sv = self.to_nalgebra().singular_values();
        sv.iter().fold(0.0, |m, v| m.max(*v))
    }

    /// Max deviation of `self` from `self^H`.
    pub fn hermitian_deviation(&self) -> f64 {
        let mut dev: f64 = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                dev = dev.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        dev
    }
}

/// `c += alpha * a * b`.
pub fn gemm_acc(c: &mut CMat, alpha: C64, a: &CMat, b: &CMat) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    if a.rows == 0 || b.cols == 0 || a.cols == 0 {
        return;
    }
    // SAFETY: Complex<f64> is repr(C) with layout [re, im]; all three buffers
    // are exactly rows*cols long with the row strides passed here.
    unsafe {
        matrixmultiply::zgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            a.rows,
            a.cols,
            b.cols,
            [alpha.re, alpha.im],
            a.data.as_ptr() as *const [f64; 2],
            a.cols as isize,
            1,
            b.data.as_ptr() as *const [f64; 2],
            b.cols as isize,
            1,
            [1.0, 0.0],
            c.data.as_mut_ptr() as *mut [f64; 2],
            c.cols as isize,
            1,
        );
    }
}

/// `exp(-i t h)` for Hermitian `h`, through its eigendecomposition.
pub fn expm_hermitian(h: &CMat, t: f64) -> CMat {
    let n = h.rows;
    let mut sym = h.clone();
    for r in 0..n {
        for c in 0..n {
            sym.data[r * n + c] = (h.get(r, c) + h.get(c, r).conj()) * 0.5;
        }
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(sym.to_nalgebra());
    let v = CMat::from_nalgebra(&eig.eigenvectors);
    let mut vd = v.clone();
    for c in 0..n {
        let phase = C64::from_polar(1.0, -t * eig.eigenvalues[c]);
        for r in 0..n {
            vd.data[r * n + c] *= phase;
        }
    }
    vd.matmul(&v.adjoint())
}

/// `exp(-i h) x` for Hermitian `h` with `|h| <= 1/2`, by Taylor summation of
/// the action until the terms drop below double precision.
pub fn expm_action(h: &CMat, x: &[C64]) -> Vec<C64> {
    let scale = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let mut out = x.to_vec();
    if scale == 0.0 {
        return out;
    }
    let mut term = x.to_vec();
    for p in 1..=60 {
        let hx = h.matvec(&term);
        let coef = C64::new(0.0, -1.0 / p as f64);
        for (t, v) in term.iter_mut().zip(hx) {
            *t = coef * v;
        }
        let mut size = 0.0;
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
            size += t.norm_sqr();
        }
        if size.sqrt() <= 1e-18 * scale {
            break;
        }
    }
    out
}
