//! Direct time integration of `i u_t = (K + Q) u + eps W(omega t) u` at
//! truncation, Sobolev norm tracking and the conjugacy checks against the
//! reduced flow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockOperator};
use crate::dense::{expm_action, CMat};
use crate::error::{Error, Result};
use crate::kam::{compose_transformations, KamState};
use crate::regularization::{k_operator, q_operator, RegularizationState};
use crate::spectral::{bracket, dot, FrequencyPoint, MassParam, StateVector, C64, ONE, ZERO};

/// `H(theta) = diag + P(theta)` with the angle advancing as `theta = omega t`.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    pub diag: Vec<f64>,
    pub pert: BlockOperator,
    pub omega: FrequencyPoint,
    /// Upper bound on `|H(theta)|` uniform in `theta`.
    norm_bound: f64,
}

impl Hamiltonian {
    pub fn new(diag: Vec<f64>, pert: BlockOperator, omega: FrequencyPoint) -> Result<Self> {
        let t = *pert.trunc();
        if diag.len() != t.n_modes() {
            return Err(Error::TruncationMismatch(format!(
                "{} diagonal entries for {} modes",
                diag.len(),
                t.n_modes()
            )));
        }
        if omega.d() != t.d {
            return Err(Error::TruncationMismatch(format!(
                "frequency has {} components, truncation d = {}",
                omega.d(),
                t.d
            )));
        }
        // |A|_2 <= max(|A|_1, |A|_inf) for each slice
        let mut bound = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for s in pert.slices().iter().flatten() {
            let mut rows = vec![0.0f64; s.rows];
            let mut cols = vec![0.0f64; s.cols];
            for r in 0..s.rows {
                for c in 0..s.cols {
                    let a = s.get(r, c).norm();
                    rows[r] += a;
                    cols[c] += a;
                }
            }
            let m = rows.iter().chain(&cols).fold(0.0f64, |m, v| m.max(*v));
            bound += m;
        }
        Ok(Hamiltonian {
            diag,
            pert,
            omega,
            norm_bound: bound,
        })
    }

    /// `K + Q + eps W0` for the perturbation the cascade started from.
    pub fn original(w0: &BlockOperator, epsilon: f64, omega: &FrequencyPoint, mass: MassParam) -> Result<Self> {
        let t = *w0.trunc();
        let mut kq = k_operator(t, omega);
        kq.axpy(ONE, &q_operator(t, omega, mass));
        let c = kq.slice(t.ell_center()).unwrap();
        let diag = (0..t.n_modes()).map(|p| c.get(p, p).re).collect();
        Self::new(diag, w0.scaled(C64::new(epsilon, 0.0)), omega.clone())
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn at_theta(&self, theta: &[f64]) -> CMat {
        let mut h = self.pert.eval_at(theta);
        for (p, v) in self.diag.iter().enumerate() {
            *h.at_mut(p, p) += v;
        }
        h
    }

    /// Angle `omega t` reduced mod `2 pi` componentwise.
    pub fn phase(&self, t: f64) -> Vec<f64> {
        self.omega
            .omega
            .iter()
            .map(|w| (w * t).rem_euclid(2.0 * std::f64::consts::PI))
            .collect()
    }

    pub fn at_time(&self, t: f64) -> CMat {
        self.at_theta(&self.phase(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub t_final: f64,
    pub dt: f64,
    pub r_list: Vec<f64>,
    /// 2 (exponential midpoint) or 4 (commutator-free Magnus).
    pub integrator_order: usize,
    pub u0: StateVector,
    /// Number of evenly spaced records, the initial time included.
    #[serde(default = "default_records")]
    pub records: usize,
}

fn default_records() -> usize {
    200
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::config("evolution.t_final", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("evolution.dt", "must be positive"));
        }
        if self.integrator_order != 2 && self.integrator_order != 4 {
            return Err(Error::config(
                "evolution.integrator_order",
                format!("{} is neither 2 nor 4", self.integrator_order),
            ));
        }
        if let Some(r) = self.r_list.iter().find(|r| !(**r >= 0.0)) {
            return Err(Error::config("evolution.r_list", format!("negative exponent {r}")));
        }
        if self.records < 2 {
            return Err(Error::config("evolution.records", "need at least 2"));
        }
        Ok(())
    }

    /// Step count and the actual step `T / steps <= dt`.
    pub fn steps(&self) -> (usize, f64) {
        let n = (self.t_final / self.dt - 1e-9).ceil().max(1.0) as usize;
        (n, self.t_final / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub times: Vec<f64>,
    pub r_list: Vec<f64>,
    /// `norms[record][r]`.
    pub norms: Vec<Vec<f64>>,
    /// Max deviation of the L2 norm from its initial value over all steps.
    pub l2_drift: f64,
    pub dt: f64,
    pub steps: usize,
    /// States at the recorded times.
    pub states: Vec<Vec<C64>>,
}

const CF4_A1: f64 = 0.25 + 0.288_675_134_594_812_9;
const CF4_A2: f64 = 0.25 - 0.288_675_134_594_812_9;
const CF4_C1: f64 = 0.5 - 0.288_675_134_594_812_9;
const CF4_C2: f64 = 0.5 + 0.288_675_134_594_812_9;

fn l2(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

fn sobolev(x: &[C64], j_max: usize, r: f64) -> f64 {
    let jm = j_max as i64;
    x.iter()
        .enumerate()
        .map(|(p, v)| bracket(p as i64 - jm).powf(2.0 * r) * v.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Advances `u` by `steps` steps of signed length `dt` from time `t0`,
/// calling `observer(step, time, u)` after every step.
pub fn propagate(
    h: &Hamiltonian,
    u: &mut Vec<C64>,
    t0: f64,
    dt: f64,
    steps: usize,
    order: usize,
    mut observer: impl FnMut(usize, f64, &[C64]),
) -> Result<()> {
    let load = dt.abs() * h.norm_bound();
    if load > 0.5 {
        return Err(Error::Stability(load));
    }
    for n in 0..steps {
        let t = t0 + n as f64 * dt;
        match order {
            2 => {
                let mut a = h.at_time(t + 0.5 * dt);
                a.scale(C64::new(dt, 0.0));
                *u = expm_action(&a, u);
            }
            4 => {
                let h1 = h.at_time(t + CF4_C1 * dt);
                let h2 = h.at_time(t + CF4_C2 * dt);
                let mut first = h1.clone();
                first.scale(C64::new(CF4_A1 * dt, 0.0));
                first.axpy(C64::new(CF4_A2 * dt, 0.0), &h2);
                let mut second = h1;
                second.scale(C64::new(CF4_A2 * dt, 0.0));
                second.axpy(C64::new(CF4_A1 * dt, 0.0), &h2);
                *u = expm_action(&first, u);
                *u = expm_action(&second, u);
            }
            _ => {
                return Err(Error::config("evolution.integrator_order", format!("{order} is neither 2 nor 4")));
            }
        }
        observer(n + 1, t + dt, u);
    }
    Ok(())
}

fn record_steps(steps: usize, records: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..records)
        .map(|k| ((k as f64 * steps as f64) / (records - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Integrates from `u0` and records the Sobolev norms.
pub fn evolve(h: &Hamiltonian, cfg: &EvolutionConfig) -> Result<(StateVector, NormTrace)> {
    cfg.validate()?;
    let j_max = h.pert.trunc().j_max;
    if cfg.u0.j_max != j_max {
        return Err(Error::TruncationMismatch(format!("initial state has J = {}, operator J = {j_max}", cfg.u0.j_max)));
    }
    let (steps, dt) = cfg.steps();
    let marks = record_steps(steps, cfg.records);
    let mut u = cfg.u0.coeffs.clone();
    let norm0 = l2(&u);
    let mut trace = NormTrace {
        times: vec![0.0],
        r_list: cfg.r_list.clone(),
        norms: vec![cfg.r_list.iter().map(|&r| sobolev(&u, j_max, r)).collect()],
        l2_drift: 0.0,
        dt,
        steps,
        states: vec![u.clone()],
    };
    let mut next_mark = 1;
    propagate(h, &mut u, 0.0, dt, steps, cfg.integrator_order, |n, t, x| {
        trace.l2_drift = trace.l2_drift.max((l2(x) - norm0).abs());
        if next_mark < marks.len() && marks[next_mark] == n {
            next_mark += 1;
            trace.times.push(t);
            trace.norms.push(cfg.r_list.iter().map(|&r| sobolev(x, j_max, r)).collect());
            trace.states.push(x.to_vec());
        }
    })?;
    Ok((StateVector { j_max, coeffs: u }, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundednessReport {
    pub r: f64,
    pub ratio_max: f64,
    pub ratio_min: f64,
    pub c_bound: f64,
    pub pass: bool,
}

/// `sup_t` and `inf_t` of `|u(t)|_{H^r} / |u0|_{H^r}` for each tracked `r`,
/// judged against `[1 / c_bound, c_bound]`.
pub fn verify_boundedness(trace: &NormTrace, c_bounds: &[f64]) -> Vec<BoundednessReport> {
    trace
        .r_list
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let base = trace.norms[0][k];
            let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
            for row in &trace.norms {
                let q = row[k] / base;
                hi = hi.max(q);
                lo = lo.min(q);
            }
            let c = c_bounds.get(k).copied().unwrap_or(f64::MAX);
            BoundednessReport {
                r,
                ratio_max: hi,
                ratio_min: lo,
                c_bound: c,
                pass: hi <= c && lo >= 1.0 / c,
            }
        })
        .collect()
}

fn grid_thetas(d: usize, points: usize) -> Vec<Vec<f64>> {
    let total = points.pow(d as u32);
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut th = vec![0.0; d];
            for c in (0..d).rev() {
                th[c] = 2.0 * std::f64::consts::PI * (rem % points) as f64 / points as f64;
                rem /= points;
            }
            th
        })
        .collect()
}

fn weighted_norm(m: &CMat, j_max: usize, r: f64) -> f64 {
    let jm = j_max as i64;
    let mut w = m.clone();
    for p in 0..m.rows {
        for q in 0..m.cols {
            let s = (bracket(p as i64 - jm) / bracket(q as i64 - jm)).powf(r);
            *w.at_mut(p, q) *= s;
        }
    }
    w.spectral_norm()
}

/// `N(theta)` on a uniform grid of `points^d` angles.
#[derive(Clone, Debug)]
pub struct TransformationGrid {
    pub points: usize,
    pub thetas: Vec<Vec<f64>>,
    pub n: Vec<CMat>,
}

impl TransformationGrid {
    pub fn new(reg: &RegularizationState, kam: &KamState, points: usize) -> Self {
        let thetas = grid_thetas(reg.trunc().d, points);
        let n = thetas.par_iter().map(|th| compose_transformations(reg, kam, th)).collect();
        TransformationGrid { points, thetas, n }
    }
}

/// `C_bound(r) = sup |N(theta)|_{H^r} * sup |N(theta)^{-1}|_{H^r}` over a
/// grid of `points^d` angles.
pub fn c_bound(reg: &RegularizationState, kam: &KamState, r_list: &[f64], points: usize) -> Vec<f64> {
    c_bound_on(&TransformationGrid::new(reg, kam, points), r_list)
}

pub fn c_bound_on(grid: &TransformationGrid, r_list: &[f64]) -> Vec<f64> {
    let per: Vec<Vec<(f64, f64)>> = grid
        .n
        .par_iter()
        .map(|n| {
            let j_max = (n.rows - 1) / 2;
            let inv = CMat::from_nalgebra(&n.to_nalgebra().try_inverse().expect("transformation is singular"));
            r_list
                .iter()
                .map(|&r| (weighted_norm(n, j_max, r), weighted_norm(&inv, j_max, r)))
                .collect()
        })
        .collect();
    (0..r_list.len())
        .map(|k| {
            let a = per.iter().map(|v| v[k].0).fold(0.0, f64::max);
            let b = per.iter().map(|v| v[k].1).fold(0.0, f64::max);
            a * b
        })
        .collect()
}

/// `e^{-i Lambda t}` applied blockwise.
fn reduced_flow(lambda: &[Block], j_max: usize, t: f64, x: &[C64]) -> Vec<C64> {
    let jm = j_max as i64;
    let mut out = vec![ZERO; x.len()];
    for (j, b) in lambda.iter().enumerate() {
        let (lam, u) = b.hermitian_eigen();
        let idx: Vec<usize> = if j == 0 {
            vec![jm as usize]
        } else {
            vec![(jm + j as i64) as usize, (jm - j as i64) as usize]
        };
        let dim = idx.len();
        let mut y = [ZERO; 2];
        for v in 0..dim {
            let mut c = ZERO;
            for p in 0..dim {
                c += u.get(p, v).conj() * x[idx[p]];
            }
            y[v] = c * C64::from_polar(1.0, -lam[v] * t);
        }
        for p in 0..dim {
            let mut c = ZERO;
            for v in 0..dim {
                c += u.get(p, v) * y[v];
            }
            out[idx[p]] = c;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyReport {
    pub max_relative_error: f64,
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    pub dt: f64,
}

/// Compares the integrated solution with `N(omega t) e^{-i Lambda t} N(0)^{-1} u0`
/// at the recorded times.
pub fn verify_conjugacy(h: &Hamiltonian, reg: &RegularizationState, kam: &KamState, cfg: &EvolutionConfig) -> Result<ConjugacyReport> {
    let (_, trace) = evolve(h, cfg)?;
    Ok(conjugacy_from_trace(h, reg, kam, &trace, usize::MAX))
}

/// Conjugacy errors at up to `max_points` of the states stored in `trace`,
/// evenly spread and always including the first and last.
pub fn conjugacy_from_trace(h: &Hamiltonian, reg: &RegularizationState, kam: &KamState, trace: &NormTrace, max_points: usize) -> ConjugacyReport {
    let j_max = reg.trunc().j_max;
    let u0 = &trace.states[0];
    let n0 = compose_transformations(reg, kam, &h.phase(0.0));
    let n0_inv = CMat::from_nalgebra(&n0.to_nalgebra().try_inverse().expect("transformation is singular"));
    let w0 = n0_inv.matvec(u0);
    let scale = l2(u0);
    let picks = record_steps(trace.states.len() - 1, max_points.clamp(2, trace.states.len()));
    let errors: Vec<f64> = picks
        .par_iter()
        .map(|&k| (&trace.times[k], &trace.states[k]))
        .map(|(t, x)| {
            let w = reduced_flow(&kam.lambda, j_max, *t, &w0);
            let red = compose_transformations(reg, kam, &h.phase(*t)).matvec(&w);
            red.iter().zip(x).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / scale
        })
        .collect();
    ConjugacyReport {
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        times: picks.iter().map(|&k| trace.times[k]).collect(),
        errors,
        dt: trace.dt,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffBlockReport {
    /// Grid RMS of `|H^K(theta) - <blockdiag H^K>|_F` over that of `|H^K|_F`.
    pub relative_mass: f64,
    /// Same numerator with the final `Lambda` in place of the average.
    pub relative_residual: f64,
    pub grid_points: usize,
}

/// Transformed Hamiltonian `N^* H N - i N^* (omega . d_theta N)` on a grid
/// of `points^d` angles, with the angle derivative taken spectrally.
pub fn off_block_mass(h: &Hamiltonian, reg: &RegularizationState, kam: &KamState, points: usize) -> OffBlockReport {
    off_block_mass_on(h, kam, &TransformationGrid::new(reg, kam, points))
}

pub fn off_block_mass_on(h: &Hamiltonian, kam: &KamState, grid: &TransformationGrid) -> OffBlockReport {
    let t = *kam.trunc();
    let d = t.d;
    let points = grid.points;
    let thetas = &grid.thetas;
    let ns = &grid.n;
    let n = t.n_modes();
    // spectral derivative: DFT over the grid, multiply by i omega.k, invert
    let total = thetas.len();
    let freqs: Vec<Vec<i32>> = (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut k = vec![0i32; d];
            for c in (0..d).rev() {
                let q = (rem % points) as i32;
                k[c] = if 2 * q as usize > points { q - points as i32 } else { q };
                rem /= points;
            }
            k
        })
        .collect();
    let coeffs: Vec<CMat> = freqs
        .par_iter()
        .map(|k| {
            let mut c = CMat::zeros(n, n);
            for (b, nb) in ns.iter().enumerate() {
                c.axpy(C64::from_polar(1.0 / total as f64, -dot(&thetas[b], k)), nb);
            }
            c
        })
        .collect();
    let dn: Vec<CMat> = (0..total)
        .into_par_iter()
        .map(|a| {
            let mut out = CMat::zeros(n, n);
            for (k, c) in freqs.iter().zip(&coeffs) {
                let wk = dot(&h.omega.omega, k);
                if wk != 0.0 {
                    out.axpy(C64::new(0.0, wk) * C64::from_polar(1.0, dot(&thetas[a], k)), c);
                }
            }
            out
        })
        .collect();
    let hk: Vec<CMat> = (0..total)
        .into_par_iter()
        .map(|a| {
            let nh = ns[a].adjoint();
            let mut m = nh.matmul(&h.at_theta(&thetas[a])).matmul(&ns[a]);
            m.axpy(C64::new(0.0, -1.0), &nh.matmul(&dn[a]));
            m
        })
        .collect();
    let jm = t.j_max as i64;
    let same_block = |p: usize, q: usize| (p as i64 - jm).abs() == (q as i64 - jm).abs();
    let mut mean = CMat::zeros(n, n);
    for m in &hk {
        mean.axpy(C64::new(1.0 / total as f64, 0.0), m);
    }
    let lam = kam.lambda_operator();
    let lam = lam.slice(t.ell_center()).cloned().unwrap_or_else(|| CMat::zeros(n, n));
    let (mut num, mut num_res, mut den) = (0.0, 0.0, 0.0);
    for m in &hk {
        for p in 0..n {
            for q in 0..n {
                let v = m.get(p, q);
                let avg = if same_block(p, q) { mean.get(p, q) } else { ZERO };
                num += (v - avg).norm_sqr();
                num_res += (v - lam.get(p, q)).norm_sqr();
                den += v.norm_sqr();
            }
        }
    }
    OffBlockReport {
        relative_mass: (num / den).sqrt(),
        relative_residual: (num_res / den).sqrt(),
        grid_points: total,
    }
}
