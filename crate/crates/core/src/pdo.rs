//! Symbols `a(theta, x, j)`, their seminorms, the operators they quantize to
//! and their composition.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::block::BlockOperator;
use crate::error::{Error, Result};
use crate::spectral::{bracket, FrequencyPoint, StateVector, Truncation, C64, ZERO};

/// Truncated Fourier tensor `w_{l,k}(j)`: `l` indexes the angle modes, `k`
/// the spatial frequency in `[-K_x, K_x]`, `j` the mode in `[-J, J]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Symbol {
    pub order: f64,
    pub trunc: Truncation,
    pub k_x: usize,
    coeffs: Vec<C64>,
}

impl Symbol {
    pub fn zeros(trunc: Truncation, k_x: usize, order: f64) -> Self {
        let len = trunc.n_ell() * (2 * k_x + 1) * trunc.n_modes();
        Symbol {
            order,
            trunc,
            k_x,
            coeffs: vec![ZERO; len],
        }
    }

    /// `x`-independent, angle-independent symbol `f(j)`.
    pub fn multiplier(trunc: Truncation, order: f64, f: impl Fn(i64) -> C64) -> Self {
        let mut s = Self::zeros(trunc, 0, order);
        let c = trunc.ell_center();
        for p in 0..trunc.n_modes() {
            let j = trunc.mode_at(p);
            s.set(c, 0, j, f(j));
        }
        s
    }

    fn offset(&self, ell_idx: usize, k: i64, j: i64) -> usize {
        let nk = 2 * self.k_x + 1;
        let kk = (k + self.k_x as i64) as usize;
        let jj = (j + self.trunc.j_max as i64) as usize;
        (ell_idx * nk + kk) * self.trunc.n_modes() + jj
    }

    fn in_range(&self, k: i64, j: i64) -> bool {
        k.unsigned_abs() as usize <= self.k_x && j.unsigned_abs() as usize <= self.trunc.j_max
    }

    /// Coefficient, zero outside the stored range.
    pub fn get(&self, ell_idx: usize, k: i64, j: i64) -> C64 {
        if !self.in_range(k, j) {
            return ZERO;
        }
        self.coeffs[self.offset(ell_idx, k, j)]
    }

    pub fn set(&mut self, ell_idx: usize, k: i64, j: i64, v: C64) {
        assert!(self.in_range(k, j), "symbol index (k={k}, j={j}) out of range");
        let o = self.offset(ell_idx, k, j);
        self.coeffs[o] = v;
    }

    pub fn add_to(&mut self, ell_idx: usize, k: i64, j: i64, v: C64) {
        assert!(self.in_range(k, j), "symbol index (k={k}, j={j}) out of range");
        let o = self.offset(ell_idx, k, j);
        self.coeffs[o] += v;
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn sub(&self, other: &Symbol) -> Result<Self> {
        self.trunc.ensure_same(&other.trunc)?;
        let k_x = self.k_x.max(other.k_x);
        let mut out = Symbol::zeros(self.trunc, k_x, self.order.max(other.order));
        let jm = self.trunc.j_max as i64;
        for idx in 0..self.trunc.n_ell() {
            for k in -(k_x as i64)..=k_x as i64 {
                for j in -jm..=jm {
                    out.set(idx, k, j, self.get(idx, k, j) - other.get(idx, k, j));
                }
            }
        }
        Ok(out)
    }

    /// `a(x, j)` of the angle slice `ell_idx`.
    pub fn eval_x(&self, ell_idx: usize, x: f64, j: i64) -> C64 {
        let mut acc = ZERO;
        for k in -(self.k_x as i64)..=self.k_x as i64 {
            acc += self.get(ell_idx, k, j) * C64::from_polar(1.0, k as f64 * x);
        }
        acc
    }

    pub fn to_file(&self) -> SymbolFile {
        let mut entries = Vec::new();
        let jm = self.trunc.j_max as i64;
        for idx in 0..self.trunc.n_ell() {
            let ell = self.trunc.ell_of(idx);
            for k in -(self.k_x as i64)..=self.k_x as i64 {
                for j in -jm..=jm {
                    let v = self.get(idx, k, j);
                    if v != ZERO {
                        entries.push(SymbolEntry(ell.clone(), k, j, v.re, v.im));
                    }
                }
            }
        }
        SymbolFile {
            order: self.order,
            d: self.trunc.d,
            l_max: self.trunc.l_max,
            k_x: self.k_x,
            j_max: self.trunc.j_max,
            entries,
        }
    }

    pub fn from_file(f: &SymbolFile) -> Result<Self> {
        let t = Truncation::new(f.d, f.j_max, f.l_max)?;
        let mut s = Symbol::zeros(t, f.k_x, f.order);
        for SymbolEntry(ell, k, j, re, im) in &f.entries {
            let idx = t
                .ell_index(ell)
                .ok_or_else(|| Error::OutOfTruncation(format!("symbol angle mode {ell:?}")))?;
            if !s.in_range(*k, *j) {
                return Err(Error::OutOfTruncation(format!("symbol entry k={k}, j={j}")));
            }
            s.set(idx, *k, *j, C64::new(*re, *im));
        }
        Ok(s)
    }
}

/// Sparse exchange format for symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolFile {
    pub order: f64,
    pub d: usize,
    #[serde(rename = "L")]
    pub l_max: usize,
    #[serde(rename = "K_x")]
    pub k_x: usize,
    #[serde(rename = "J")]
    pub j_max: usize,
    pub entries: Vec<SymbolEntry>,
}

/// `[[l...], k, j, re, im]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolEntry(pub Vec<i32>, pub i64, pub i64, pub f64, pub f64);

impl Serialize for Symbol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Symbol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = SymbolFile::deserialize(d)?;
        Symbol::from_file(&f).map_err(serde::de::Error::custom)
    }
}

/// `Op(a)u` at angle `theta`; output modes beyond `J` are dropped.
pub fn op_apply(a: &Symbol, u: &StateVector, theta: &[f64]) -> Result<StateVector> {
    let t = &a.trunc;
    if u.j_max != t.j_max {
        return Err(Error::TruncationMismatch(format!(
            "state J = {} vs symbol J = {}",
            u.j_max, t.j_max
        )));
    }
    if theta.len() != t.d {
        return Err(Error::TruncationMismatch(format!(
            "angle of dimension {} vs d = {}",
            theta.len(),
            t.d
        )));
    }
    let jm = t.j_max as i64;
    let kx = a.k_x as i64;
    let phases: Vec<C64> = (0..t.n_ell())
        .map(|idx| C64::from_polar(1.0, crate::spectral::dot(theta, &t.ell_of(idx))))
        .collect();
    let mut out = StateVector::zeros(t.j_max);
    for n in -jm..=jm {
        let mut acc = ZERO;
        for j in (n - kx).max(-jm)..=(n + kx).min(jm) {
            let uj = u.coeffs[(j + jm) as usize];
            if uj == ZERO {
                continue;
            }
            let mut w = ZERO;
            for (idx, ph) in phases.iter().enumerate() {
                w += a.get(idx, n - j, j) * ph;
            }
            acc += w * uj;
        }
        out.coeffs[(n + jm) as usize] = acc;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeminormReport {
    /// `sup_l chi^m_rho(a(l))` for `rho = 0..=rho_max`.
    pub values: Vec<f64>,
    /// `(sum_l <l>^{2s} chi^m_rho(a(l))^2)^{1/2}` at `rho_max`.
    pub weighted: f64,
    /// Largest difference quotient of `weighted` over the supplied family.
    pub lipschitz: Option<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `chi^m_rho` of one angle slice, for every `rho <= rho_max`.
fn slice_seminorms(a: &Symbol, ell_idx: usize, rho_max: usize) -> Result<Vec<f64>> {
    let t = &a.trunc;
    let jm = t.j_max as i64;
    if rho_max as i64 > 2 * jm {
        return Err(Error::config(
            "rho",
            format!("{rho_max} differences exceed the {} available modes", 2 * jm + 1),
        ));
    }
    let kx = a.k_x as i64;
    let grid = 2 * (2 * a.k_x + 1);
    let xs: Vec<f64> = (0..grid).map(|g| 2.0 * PI * g as f64 / grid as f64).collect();
    // sup term for each (alpha, beta)
    let mut sup = vec![vec![0.0f64; rho_max + 1]; rho_max + 1];
    for alpha in 0..=rho_max {
        for beta in 0..=(rho_max - alpha) {
            let mut best: f64 = 0.0;
            for j in -jm..=(jm - beta as i64) {
                // coefficients of d_x^alpha Delta^beta a at j
                let coef: Vec<C64> = (-kx..=kx)
                    .map(|k| {
                        let mut d = ZERO;
                        for tt in 0..=beta {
                            let sign = if (beta - tt) % 2 == 0 { 1.0 } else { -1.0 };
                            d += a.get(ell_idx, k, j + tt as i64) * (sign * binomial(beta, tt));
                        }
                        d * C64::new(0.0, k as f64).powu(alpha as u32)
                    })
                    .collect();
                let w = bracket(j).powf(-a.order + beta as f64);
                for &x in &xs {
                    let mut v = ZERO;
                    for (q, c) in coef.iter().enumerate() {
                        v += c * C64::from_polar(1.0, (q as i64 - kx) as f64 * x);
                    }
                    best = best.max(w * v.norm());
                }
            }
            sup[alpha][beta] = best;
        }
    }
    Ok((0..=rho_max)
        .map(|rho| {
            let mut acc = 0.0;
            for alpha in 0..=rho {
                for beta in 0..=(rho - alpha) {
                    acc += sup[alpha][beta];
                }
            }
            acc
        })
        .collect())
}

fn weighted_seminorm(a: &Symbol, rho: usize, s: f64) -> Result<(Vec<f64>, f64)> {
    let t = &a.trunc;
    let mut values = vec![0.0f64; rho + 1];
    let mut total = 0.0;
    for idx in 0..t.n_ell() {
        let v = slice_seminorms(a, idx, rho)?;
        for (acc, x) in values.iter_mut().zip(&v) {
            *acc = acc.max(*x);
        }
        let br = crate::spectral::ell_norm(&t.ell_of(idx)).max(1) as f64;
        total += br.powf(2.0 * s) * v[rho] * v[rho];
    }
    Ok((values, total.sqrt()))
}

/// Seminorms of `a` with respect to its declared order; the Lipschitz part is
/// estimated over `family`, symbols of the same family at other frequencies.
pub fn seminorm(
    a: &Symbol,
    rho: usize,
    s: f64,
    family: &[(FrequencyPoint, Symbol)],
) -> Result<SeminormReport> {
    let (values, weighted) = weighted_seminorm(a, rho, s)?;
    let lipschitz = if family.len() < 2 {
        None
    } else {
        let mut best: f64 = 0.0;
        for (p, (w1, a1)) in family.iter().enumerate() {
            for (w2, a2) in &family[p + 1..] {
                let dist = crate::block::frequency_distance(w1, w2);
                if dist > 0.0 {
                    let mut diff = a1.sub(a2)?;
                    diff.order = a.order;
                    best = best.max(weighted_seminorm(&diff, rho, s)?.1 / dist);
                }
            }
        }
        Some(best)
    };
    Ok(SeminormReport {
        values,
        weighted,
        lipschitz,
    })
}

/// `a # b (x, xi) = sum_k a(x, xi + k) b_k(xi) e^{ikx}` with the angle
/// convolution; angle modes beyond `L` are dropped and `a` is taken as zero
/// outside the mode range.
pub fn symbol_compose(a: &Symbol, b: &Symbol) -> Result<Symbol> {
    a.trunc.ensure_same(&b.trunc)?;
    let t = a.trunc;
    let jm = t.j_max as i64;
    let (ka, kb) = (a.k_x as i64, b.k_x as i64);
    let mut out = Symbol::zeros(t, a.k_x + b.k_x, a.order + b.order);
    let pairs = crate::block::convolution_pairs(&t);
    for (idx, list) in pairs.iter().enumerate() {
        for &(i1, i2) in list {
            for k2 in -kb..=kb {
                for xi in -jm..=jm {
                    let bv = b.get(i2, k2, xi);
                    if bv == ZERO || (xi + k2).abs() > jm {
                        continue;
                    }
                    for k1 in -ka..=ka {
                        let av = a.get(i1, k1, xi + k2);
                        if av != ZERO {
                            out.add_to(idx, k1 + k2, xi, av * bv);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Block matrix with `A(l)^n_m = w_{l, n-m}(m)`.
pub fn matrix_of(a: &Symbol) -> BlockOperator {
    let t = a.trunc;
    let jm = t.j_max as i64;
    let kx = a.k_x as i64;
    let mut op = BlockOperator::zeros(t);
    for idx in 0..t.n_ell() {
        let mut any = false;
        for m in -jm..=jm {
            for k in -kx..=kx {
                let n = m + k;
                if n.abs() > jm {
                    continue;
                }
                let v = a.get(idx, k, m);
                if v != ZERO {
                    op.set_entry(idx, n, m, v);
                    any = true;
                }
            }
        }
        if !any {
            op.set_slice(idx, None);
        }
    }
    op
}

/// `(A + A^*)/2`.
pub fn hermitian_symmetrize(a: &BlockOperator) -> BlockOperator {
    a.hermitian_symmetrize()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2Report {
    pub a_coeff: f64,
    pub b_bound: f64,
    pub residual: f64,
}

/// Fits `w_{0,0}(j) = a <j>^{1/2} + b(j)`: `a` is the mean of
/// `Re w_{0,0}(j) / <j>^{1/2}` over `|j| >= J/2`, `b_bound` the largest
/// deviation over all modes, `residual` the RMS misfit of the ratio.
pub fn check_condition_c2(a: &Symbol) -> C2Report {
    let t = &a.trunc;
    let jm = t.j_max as i64;
    let c = t.ell_center();
    let fit: Vec<f64> = (-jm..=jm)
        .filter(|j| 2 * j.abs() >= jm)
        .map(|j| a.get(c, 0, j).re / bracket(j).sqrt())
        .collect();
    let a_coeff = fit.iter().sum::<f64>() / fit.len() as f64;
    let residual =
        (fit.iter().map(|r| (r - a_coeff) * (r - a_coeff)).sum::<f64>() / fit.len() as f64).sqrt();
    let b_bound = (-jm..=jm)
        .map(|j| (a.get(c, 0, j).re - a_coeff * bracket(j).sqrt()).abs())
        .fold(0.0, f64::max);
    C2Report {
        a_coeff,
        b_bound,
        residual,
    }
}
