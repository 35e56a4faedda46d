//! Truncated Fourier representations on the circle and on the forcing torus,
//! Sobolev norms, and the two base multipliers `K` and `Q`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Spatial modes `j in [-J, J]`, angle modes `l in [-L, L]^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Truncation {
    pub d: usize,
    pub j_max: usize,
    pub l_max: usize,
}

impl Truncation {
    pub fn new(d: usize, j_max: usize, l_max: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("d", "need at least one frequency"));
        }
        if j_max == 0 {
            return Err(Error::config("J", "must be at least 1"));
        }
        if l_max == 0 {
            return Err(Error::config("L", "must be at least 1"));
        }
        Ok(Truncation { d, j_max, l_max })
    }

    pub fn n_modes(&self) -> usize {
        2 * self.j_max + 1
    }

    pub fn n_blocks(&self) -> usize {
        self.j_max + 1
    }

    /// Position of mode `j` in a coefficient vector.
    pub fn mode_index(&self, j: i64) -> Result<usize> {
        if j.unsigned_abs() as usize > self.j_max {
            return Err(Error::OutOfTruncation(format!(
                "mode {j} with J = {}",
                self.j_max
            )));
        }
        Ok((j + self.j_max as i64) as usize)
    }

    pub fn mode_at(&self, p: usize) -> i64 {
        p as i64 - self.j_max as i64
    }

    pub fn ell_base(&self) -> usize {
        2 * self.l_max + 1
    }

    pub fn n_ell(&self) -> usize {
        self.ell_base().pow(self.d as u32)
    }

    /// Flat index of `l = 0`.
    pub fn ell_center(&self) -> usize {
        (self.n_ell() - 1) / 2
    }

    /// Flat indices are lexicographic with the first component most
    /// significant, so `-l` sits at the mirrored position.
    pub fn ell_neg(&self, idx: usize) -> usize {
        self.n_ell() - 1 - idx
    }

    pub fn ell_of(&self, idx: usize) -> Vec<i32> {
        let base = self.ell_base();
        let mut out = vec![0i32; self.d];
        let mut rest = idx;
        for r in (0..self.d).rev() {
            out[r] = (rest % base) as i32 - self.l_max as i32;
            rest /= base;
        }
        out
    }

    pub fn ell_index(&self, ell: &[i32]) -> Option<usize> {
        if ell.len() != self.d {
            return None;
        }
        let base = self.ell_base();
        let mut idx = 0usize;
        for &c in ell {
            if c.unsigned_abs() as usize > self.l_max {
                return None;
            }
            idx = idx * base + (c + self.l_max as i32) as usize;
        }
        Some(idx)
    }

    pub fn all_ells(&self) -> Vec<Vec<i32>> {
        (0..self.n_ell()).map(|i| self.ell_of(i)).collect()
    }

    pub fn ensure_same(&self, other: &Truncation) -> Result<()> {
        if self != other {
            return Err(Error::TruncationMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// `max(1, |j|)`.
pub fn bracket(j: i64) -> f64 {
    j.unsigned_abs().max(1) as f64
}

/// Sup norm on `Z^d`.
pub fn ell_norm(ell: &[i32]) -> usize {
    ell.iter().map(|c| c.unsigned_abs() as usize).max().unwrap_or(0)
}

/// `omega . l`, summed in component order.
pub fn dot(omega: &[f64], ell: &[i32]) -> f64 {
    omega
        .iter()
        .zip(ell)
        .fold(0.0, |acc, (w, &c)| acc + w * c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Standard,
    BetaTorus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPoint {
    pub omega: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
}

impl FrequencyPoint {
    pub fn new(omega: Vec<f64>, v: Option<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::config("omega", "empty frequency vector"));
        }
        for (r, w) in omega.iter().enumerate() {
            if !(1.0..=2.0).contains(w) {
                return Err(Error::config(
                    format!("omega[{r}]"),
                    format!("{w} outside [1, 2]"),
                ));
            }
        }
        if let Some(v) = v {
            if !(1.0..=2.0).contains(&v) {
                return Err(Error::config("v", format!("{v} outside [1, 2]")));
            }
        }
        Ok(FrequencyPoint { omega, v })
    }

    pub fn d(&self) -> usize {
        self.omega.len()
    }

    /// Torus speed, 1 outside the extended mode.
    pub fn speed(&self) -> f64 {
        self.v.unwrap_or(1.0)
    }

    pub fn dot(&self, ell: &[i32]) -> f64 {
        dot(&self.omega, ell)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MassParam(f64);

impl MassParam {
    pub fn new(m: f64) -> Result<Self> {
        if !(0.0..=0.25).contains(&m) {
            return Err(Error::config("m_mass", format!("{m} outside [0, 1/4]")));
        }
        Ok(MassParam(m))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// `v |j|`.
pub fn k_value(j: i64, speed: f64) -> f64 {
    speed * j.unsigned_abs() as f64
}

/// `sqrt(v^2 j^2 + m^2) - v |j|`, evaluated as `m^2 / (sqrt(..) + v|j|)` to
/// avoid cancellation at large `|j|`.
pub fn q_value(j: i64, mass: f64, speed: f64) -> f64 {
    let vj = speed * j.unsigned_abs() as f64;
    let root = (vj * vj + mass * mass).sqrt();
    let den = root + vj;
    if den == 0.0 {
        0.0
    } else {
        mass * mass / den
    }
}

pub fn multiplier_k(trunc: &Truncation, j: i64, v: Option<f64>) -> Result<f64> {
    trunc.mode_index(j)?;
    Ok(k_value(j, v.unwrap_or(1.0)))
}

pub fn multiplier_q(trunc: &Truncation, j: i64, mass: MassParam) -> Result<f64> {
    trunc.mode_index(j)?;
    Ok(q_value(j, mass.value(), 1.0))
}

/// Coefficients `u(j)` for `j in [-J, J]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub j_max: usize,
    pub coeffs: Vec<C64>,
}

impl StateVector {
    pub fn zeros(j_max: usize) -> Self {
        StateVector {
            j_max,
            coeffs: vec![ZERO; 2 * j_max + 1],
        }
    }

    pub fn from_coeffs(coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() % 2 == 0 || coeffs.len() < 3 {
            return Err(Error::TruncationMismatch(format!(
                "state of length {} is not 2J+1 with J >= 1",
                coeffs.len()
            )));
        }
        Ok(StateVector {
            j_max: (coeffs.len() - 1) / 2,
            coeffs,
        })
    }

    pub fn single_mode(j_max: usize, j: i64) -> Result<Self> {
        let mut u = Self::zeros(j_max);
        u.set(j, ONE)?;
        Ok(u)
    }

    fn index(&self, j: i64) -> Result<usize> {
        if j.unsigned_abs() as usize > self.j_max {
            return Err(Error::OutOfTruncation(format!(
                "mode {j} with J = {}",
                self.j_max
            )));
        }
        Ok((j + self.j_max as i64) as usize)
    }

    pub fn get(&self, j: i64) -> Result<C64> {
        Ok(self.coeffs[self.index(j)?])
    }

    pub fn set(&mut self, j: i64, value: C64) -> Result<()> {
        let p = self.index(j)?;
        self.coeffs[p] = value;
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// `(sum_j <j>^{2r} |u(j)|^2)^{1/2}`.
pub fn sobolev_norm(u: &StateVector, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::config("r", format!("Sobolev exponent {r} is negative")));
    }
    let jm = u.j_max as i64;
    let mut acc = 0.0;
    for (p, c) in u.coeffs.iter().enumerate() {
        let j = p as i64 - jm;
        acc += bracket(j).powf(2.0 * r) * c.norm_sqr();
    }
    Ok(acc.sqrt())
}
