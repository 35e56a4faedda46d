//! KAM iteration: second-order Melnikov certification, blockwise Sylvester
//! solves in the eigenbases of `Lambda`, conjugation by `e^{-iG}` and
//! absorption of the averaged diagonal into `Lambda`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{block_dim, lie_series, Block, BlockOperator, NormSpec};
use crate::dense::{expm_hermitian, CMat};
use crate::error::{Error, Result};
use crate::regularization::{gap_constant, RegularizationState};
use crate::spectral::{bracket, ell_norm, FrequencyPoint, Truncation, C64, ONE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KamParams {
    pub tau: f64,
    pub sigma: f64,
    /// Diophantine constant of the second-order Melnikov conditions.
    pub alpha: f64,
    pub n0: f64,
    pub k_steps: usize,
    #[serde(default = "default_lie_order")]
    pub lie_order: usize,
    /// Constant `C` of the smallness gate `C N0^{2tau+2sigma+2+a} |P0| <= 1/2`.
    #[serde(default = "default_gate_constant")]
    pub gate_constant: f64,
}

fn default_lie_order() -> usize {
    12
}

pub fn default_gate_constant() -> f64 {
    1e-36
}

impl KamParams {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.tau > d as f64 + 1.0) {
            return Err(Error::config("tau", format!("{} must exceed d + 1 = {}", self.tau, d + 1)));
        }
        if !(self.sigma > 1.0) {
            return Err(Error::config("sigma", format!("{} must exceed 1", self.sigma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", format!("{} outside (0, 1)", self.alpha)));
        }
        if !(self.n0 > 1.0 && self.n0.is_finite()) {
            return Err(Error::config("n0", format!("{} must exceed 1", self.n0)));
        }
        if self.lie_order < 4 {
            return Err(Error::config("lie_order", format!("{} is below 4", self.lie_order)));
        }
        if !(self.gate_constant >= 0.0 && self.gate_constant.is_finite()) {
            return Err(Error::config("gate_constant", "must be a nonnegative number"));
        }
        Ok(())
    }

    pub fn s0(&self, d: usize) -> f64 {
        (d as f64 + 3.0) / 2.0
    }

    pub fn m_weight(&self) -> f64 {
        2.0 * self.sigma + 2.0
    }

    pub fn a_decay(&self) -> f64 {
        6.0 * self.tau + 6.0 * self.sigma + 7.0
    }

    pub fn beta(&self) -> f64 {
        self.a_decay() + 1.0
    }

    /// `N_k = N0^{(3/2)^k}` rounded, forced to grow by at least one.
    pub fn schedule(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(self.k_steps + 1);
        for k in 0..=self.k_steps {
            let raw = self.n0.powf(1.5f64.powi(k as i32));
            let mut n = if raw.is_finite() && raw < 1e15 { raw.round() as usize } else { 1usize << 50 };
            if let Some(&prev) = out.last() {
                n = n.max(prev + 1);
            }
            out.push(n.max(1));
        }
        out
    }

    pub fn low_norm(&self, d: usize) -> NormSpec {
        NormSpec::weighted(self.s0(d), self.m_weight())
    }

    pub fn high_norm(&self, d: usize) -> NormSpec {
        NormSpec::weighted(self.s0(d) + self.beta(), self.m_weight())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstTuple {
    pub ell: Vec<i32>,
    pub i: usize,
    pub j: usize,
    pub v: usize,
    pub vp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonanceCertificate {
    pub ok: bool,
    /// `|omega.l + lambda_{i,v} - lambda_{j,v'}|` at the worst tuple.
    pub min_margin: f64,
    /// Smallest ratio of divisor to threshold; `ok` iff it is `>= 1`.
    pub min_ratio: f64,
    pub worst_tuple: Option<WorstTuple>,
    pub conditions_checked: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub k: usize,
    pub low: f64,
    pub high: f64,
    pub hermitian_deviation: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamState {
    pub k: usize,
    pub lambda: Vec<Block>,
    pub p: BlockOperator,
    pub g_log: Vec<BlockOperator>,
    pub eigen_table: Vec<Vec<f64>>,
    pub omega: FrequencyPoint,
    pub norm_history: Vec<NormRecord>,
}

fn eigen_table(lambda: &[Block]) -> Vec<Vec<f64>> {
    lambda
        .iter()
        .map(|b| b.hermitian_eigen().0[..b.rows].to_vec())
        .collect()
}

fn lambda_deviation(lambda: &[Block]) -> f64 {
    lambda
        .iter()
        .map(|b| b.sub(&b.adjoint()).spectral_norm())
        .fold(0.0, f64::max)
}

fn norm_record(k: usize, lambda: &[Block], p: &BlockOperator, params: &KamParams, eigs: &[Vec<f64>]) -> NormRecord {
    let d = p.trunc().d;
    NormRecord {
        k,
        low: p.decay_norm(&params.low_norm(d)),
        high: p.decay_norm(&params.high_norm(d)),
        hermitian_deviation: p.hermitian_deviation().max(lambda_deviation(lambda)),
        gap: gap_constant(eigs),
    }
}

impl KamState {
    pub fn new(lambda: Vec<Block>, p: BlockOperator, omega: FrequencyPoint, params: &KamParams) -> Result<Self> {
        let t = *p.trunc();
        if lambda.len() != t.n_blocks() {
            return Err(Error::TruncationMismatch(format!(
                "{} diagonal blocks for J = {}",
                lambda.len(),
                t.j_max
            )));
        }
        for (j, b) in lambda.iter().enumerate() {
            if (b.rows, b.cols) != (block_dim(j), block_dim(j)) {
                return Err(Error::TruncationMismatch(format!("block {j} has shape {}x{}", b.rows, b.cols)));
            }
        }
        if omega.d() != t.d {
            return Err(Error::TruncationMismatch(format!(
                "frequency has {} components, truncation d = {}",
                omega.d(),
                t.d
            )));
        }
        let eigs = eigen_table(&lambda);
        let rec = norm_record(0, &lambda, &p, params, &eigs);
        Ok(KamState {
            k: 0,
            lambda,
            p,
            g_log: Vec::new(),
            eigen_table: eigs,
            omega,
            norm_history: vec![rec],
        })
    }

    /// Starts from the end of the cascade: `Lambda^0 = K + Q + eps Z` and
    /// `P^0 = eps W`.
    pub fn from_regularization(reg: &RegularizationState, params: &KamParams) -> Result<Self> {
        let p = reg.w.scaled(C64::new(reg.epsilon, 0.0));
        Self::new(reg.lambda_blocks(), p, reg.omega.clone(), params)
    }

    pub fn trunc(&self) -> &Truncation {
        self.p.trunc()
    }

    /// `Lambda` as a time-independent block operator.
    pub fn lambda_operator(&self) -> BlockOperator {
        let t = *self.trunc();
        let mut op = BlockOperator::zeros(t);
        for (j, b) in self.lambda.iter().enumerate() {
            op.set_block(t.ell_center(), j, j, b);
        }
        op
    }
}

fn threshold(alpha: f64, n: usize, tau: f64, sigma: f64, i: usize, j: usize) -> f64 {
    alpha / ((n as f64).powf(tau) * bracket(i as i64).powf(sigma) * bracket(j as i64).powf(sigma))
}

type EllBest = (f64, f64, Option<WorstTuple>, u64);

fn melnikov_at_ell(eigs: &[Vec<f64>], omega: &FrequencyPoint, t: &Truncation, idx: usize, n: usize, params: &KamParams) -> EllBest {
    let ell = t.ell_of(idx);
    let mut best = (f64::INFINITY, f64::INFINITY, None, 0u64);
    if ell_norm(&ell) > n.min(t.l_max) {
        return best;
    }
    let center = t.ell_center();
    let x = omega.dot(&ell);
    for i in 0..eigs.len() {
        for j in 0..eigs.len() {
            if idx == center && i == j {
                continue;
            }
            let thr = threshold(params.alpha, n, params.tau, params.sigma, i, j);
            for (v, li) in eigs[i].iter().enumerate() {
                for (vp, lj) in eigs[j].iter().enumerate() {
                    best.3 += 1;
                    let div = (x + li - lj).abs();
                    let ratio = div / thr;
                    if ratio < best.1 {
                        best.0 = div;
                        best.1 = ratio;
                        best.2 = Some(WorstTuple { ell: ell.clone(), i, j, v, vp });
                    }
                }
            }
        }
    }
    best
}

fn certificate(per_ell: impl IntoIterator<Item = EllBest>) -> ResonanceCertificate {
    let mut cert = ResonanceCertificate {
        ok: true,
        // finite sentinels keep the certificate representable in JSON
        min_margin: f64::MAX,
        min_ratio: f64::MAX,
        worst_tuple: None,
        conditions_checked: 0,
    };
    for (margin, ratio, tuple, count) in per_ell {
        cert.conditions_checked += count;
        if ratio < cert.min_ratio {
            cert.min_ratio = ratio;
            cert.min_margin = margin;
            cert.worst_tuple = tuple;
        }
    }
    cert.ok = cert.min_ratio >= 1.0;
    cert
}

/// Checks `|omega.l + lambda_{i,v} - lambda_{j,v'}| >= alpha / (N^tau <i>^sigma <j>^sigma)`
/// over `|l| <= min(N, L)`, all `i, j <= J`, skipping every `(0, i, i)` tuple.
pub fn resonance_check(state: &KamState, params: &KamParams, n: usize) -> ResonanceCertificate {
    let t = *state.trunc();
    let per_ell: Vec<EllBest> = (0..t.n_ell())
        .into_par_iter()
        .map(|idx| melnikov_at_ell(&state.eigen_table, &state.omega, &t, idx, n, params))
        .collect();
    certificate(per_ell)
}

/// Sequential form of [`resonance_check`] on a bare eigenvalue table, for
/// sampling loops that are already parallel.
pub fn resonance_check_table(eigs: &[Vec<f64>], omega: &FrequencyPoint, t: &Truncation, params: &KamParams, n: usize) -> ResonanceCertificate {
    certificate((0..t.n_ell()).map(|idx| melnikov_at_ell(eigs, omega, t, idx, n, params)))
}

/// Solves `omega.d_theta G + i[Lambda, G] = Pi_N P - [P]` blockwise in the
/// eigenbases of `Lambda`, for `|l| < N`, `|i - j| < N`, `(l, i, j) != (0, i, i)`.
///
/// Only one tuple of each adjoint pair is solved, the other is its mirror, so
/// `G` is exactly Hermitian.
pub fn solve_homological_kam(state: &KamState, params: &KamParams, n: usize) -> Result<BlockOperator> {
    let t = *state.trunc();
    let nb = t.n_blocks();
    let center = t.ell_center();
    let eig: Vec<([f64; 2], Block)> = state.lambda.iter().map(|b| b.hermitian_eigen()).collect();
    let solved: Vec<Result<Vec<(usize, usize, Block)>>> = (center..t.n_ell())
        .into_par_iter()
        .map(|idx| {
            let mut out = Vec::new();
            if state.p.slice(idx).is_none() {
                return Ok(out);
            }
            let ell = t.ell_of(idx);
            if ell_norm(&ell) >= n {
                return Ok(out);
            }
            let x = state.omega.dot(&ell);
            for i in 0..nb {
                let lo = if idx == center { i + 1 } else { 0 };
                for j in lo..nb {
                    if i.abs_diff(j) >= n {
                        continue;
                    }
                    let pb = state.p.block(idx, i, j);
                    if pb.is_zero() {
                        continue;
                    }
                    let (li, ui) = &eig[i];
                    let (lj, uj) = &eig[j];
                    let pt = ui.adjoint().matmul(&pb).matmul(uj);
                    let thr = threshold(params.alpha, n, params.tau, params.sigma, i, j);
                    let mut gt = Block::for_pair(i, j);
                    for v in 0..pt.rows {
                        for vp in 0..pt.cols {
                            let div = x + li[v] - lj[vp];
                            if div.abs() < thr {
                                return Err(Error::SmallDivisor {
                                    ell: ell.clone(),
                                    i: i as i64,
                                    j: j as i64,
                                    divisor: div,
                                    threshold: thr,
                                });
                            }
                            let val = pt.get(v, vp);
                            gt.set(v, vp, C64::new(val.im / div, -val.re / div));
                        }
                    }
                    out.push((i, j, ui.matmul(&gt).matmul(&uj.adjoint())));
                }
            }
            Ok(out)
        })
        .collect();
    let mut g = BlockOperator::zeros(t);
    for (off, blocks) in solved.into_iter().enumerate() {
        let idx = center + off;
        let neg = t.ell_neg(idx);
        for (i, j, b) in blocks? {
            g.set_block(idx, i, j, &b);
            g.set_block(neg, j, i, &b.adjoint());
        }
    }
    g.prune();
    Ok(g)
}

/// `omega.d_theta G + i[Lambda, G] - (Pi_N P - [P])` from operator products.
pub fn homological_residual_kam(g: &BlockOperator, state: &KamState, n: usize) -> BlockOperator {
    let lam = state.lambda_operator();
    let mut res = g.omega_derivative(&state.omega);
    res.axpy(ONE, &lam.commutator_i(g));
    let (head, _) = state.p.cutoff(n);
    res.axpy(-ONE, &head);
    res.axpy(ONE, &state.p.block_diagonal_average());
    res
}

/// One KAM step at scale `N_k`. Fails with a resonance error when the
/// certificate does not hold.
pub fn kam_step(state: &KamState, params: &KamParams) -> Result<KamState> {
    let d = state.trunc().d;
    params.validate(d)?;
    let n = params.schedule()[state.k.min(params.k_steps)];
    let mut next = state.clone();
    next.k += 1;
    if !state.p.is_zero() {
        let cert = resonance_check(state, params, n);
        if !cert.ok {
            return Err(Error::Resonance {
                step: state.k,
                ratio: cert.min_ratio,
                tuple: format!("{:?}", cert.worst_tuple),
            });
        }
    }
    let diag = state.p.block_diagonal_average();
    let g = solve_homological_kam(state, params, n)?;
    let (head, tail) = state.p.cutoff(n);
    let mut p = tail;
    p.axpy(ONE, &lie_series(&g, &state.p, params.lie_order, 0)?.op);
    p.axpy(ONE, &lie_series(&g, &diag.sub(&head), params.lie_order, 1)?.op);
    p.prune();
    let c = state.trunc().ell_center();
    for (j, b) in next.lambda.iter_mut().enumerate() {
        *b = b.add(&diag.block(c, j, j));
    }
    next.p = p;
    next.g_log.push(g);
    next.eigen_table = eigen_table(&next.lambda);
    let rec = norm_record(next.k, &next.lambda, &next.p, params, &next.eigen_table);
    next.norm_history.push(rec);
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamStepReport {
    pub k: usize,
    pub n_k: usize,
    pub certificate: ResonanceCertificate,
    /// `|G|_low / (N^{2tau+2sigma+2} |P|_low)`.
    pub generator_ratio: f64,
    /// `|P+|_low / (N^{-beta} |P|_high + N^{2tau+2sigma+2} |P|_low^2)`.
    pub step_constant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonanceFailure {
    pub step: usize,
    pub certificate: ResonanceCertificate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamReport {
    pub schedule: Vec<usize>,
    pub gate_value: f64,
    pub steps: Vec<KamStepReport>,
    pub norm_history: Vec<NormRecord>,
    /// `log |P^{k+1}|_low / log |P^k|_low` for consecutive steps.
    pub decay_exponents: Vec<f64>,
    /// Least-squares slope of `log |P^k|_low` against `log N_{k-1}`, `k >= 1`.
    pub fitted_exponent: Option<f64>,
    pub initial_gap: f64,
    pub resonance_failure: Option<ResonanceFailure>,
}

fn slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Runs `K` steps after the smallness gate. A failed resonance certificate
/// stops the iteration and is recorded in the report, not returned as an
/// error.
pub fn kam_iterate(state0: &KamState, params: &KamParams) -> Result<(KamState, KamReport)> {
    let d = state0.trunc().d;
    params.validate(d)?;
    let schedule = params.schedule();
    let low0 = state0.p.decay_norm(&params.low_norm(d));
    let expo = 2.0 * params.tau + 2.0 * params.sigma + 2.0;
    let gate_value = params.gate_constant * params.n0.powf(expo + params.a_decay()) * low0;
    if !(gate_value <= 0.5) {
        return Err(Error::config(
            "epsilon",
            format!("smallness gate fails: C N0^(2tau+2sigma+2+a) |P0| = {gate_value:.3e} > 1/2"),
        ));
    }
    let mut report = KamReport {
        schedule: schedule.clone(),
        gate_value,
        steps: Vec::new(),
        norm_history: Vec::new(),
        decay_exponents: Vec::new(),
        fitted_exponent: None,
        initial_gap: gap_constant(&state0.eigen_table),
        resonance_failure: None,
    };
    let mut state = state0.clone();
    for _ in 0..params.k_steps {
        let Some(&n) = schedule.get(state.k) else { break };
        let certificate = resonance_check(&state, params, n);
        if !state.p.is_zero() && !certificate.ok {
            report.resonance_failure = Some(ResonanceFailure { step: state.k, certificate });
            break;
        }
        let next = kam_step(&state, params)?;
        let prev = state.norm_history.last().unwrap();
        let new = next.norm_history.last().unwrap();
        let nf = n as f64;
        let g_low = next.g_log.last().unwrap().decay_norm(&params.low_norm(d));
        let denom_g = nf.powf(expo) * prev.low;
        let denom_p = nf.powf(-params.beta()) * prev.high + nf.powf(expo) * prev.low * prev.low;
        report.steps.push(KamStepReport {
            k: state.k,
            n_k: n,
            certificate,
            generator_ratio: if denom_g > 0.0 { g_low / denom_g } else { 0.0 },
            step_constant: if denom_p > 0.0 { new.low / denom_p } else { 0.0 },
        });
        state = next;
    }
    let hist = &state.norm_history;
    report.decay_exponents = hist
        .windows(2)
        .map(|w| if w[0].low > 0.0 && w[1].low > 0.0 { w[1].low.ln() / w[0].low.ln() } else { f64::NAN })
        .filter(|v| v.is_finite())
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = hist
        .iter()
        .skip(1)
        .filter(|r| r.low > 0.0)
        .map(|r| ((schedule[r.k - 1] as f64).ln(), r.low.ln()))
        .unzip();
    report.fitted_exponent = slope(&xs, &ys);
    report.norm_history = hist.clone();
    Ok((state, report))
}

fn exp_factor(gen: &BlockOperator, scale: f64, theta: &[f64]) -> Option<CMat> {
    if gen.is_zero() {
        return None;
    }
    let h = gen.eval_at(theta);
    Some(expm_hermitian(&h, scale))
}

/// `N(theta) = e^{-i eps B_0(theta)} ... e^{-i eps B_{M-1}(theta)} e^{-i G^1(theta)} ... e^{-i G^K(theta)}`.
pub fn compose_transformations(reg: &RegularizationState, kam: &KamState, theta: &[f64]) -> CMat {
    let n = reg.trunc().n_modes();
    let mut out = CMat::identity(n);
    let factors = reg
        .b_log
        .iter()
        .map(|b| (b, reg.epsilon))
        .chain(kam.g_log.iter().map(|g| (g, 1.0)));
    for (gen, scale) in factors {
        if let Some(f) = exp_factor(gen, scale, theta) {
            out = out.matmul(&f);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformationBounds {
    pub sup_norm: f64,
    pub sup_inverse_norm: f64,
    pub sup_condition: f64,
    pub unitarity_deviation: f64,
}

/// Norms of `N(theta)` and its inverse over a uniform grid of `points^d`
/// angles.
pub fn transformation_bounds(reg: &RegularizationState, kam: &KamState, points: usize) -> TransformationBounds {
    let d = reg.trunc().d;
    let total = points.pow(d as u32);
    let ns: Vec<CMat> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut rem = flat;
            let mut theta = vec![0.0; d];
            for c in (0..d).rev() {
                theta[c] = 2.0 * std::f64::consts::PI * (rem % points) as f64 / points as f64;
                rem /= points;
            }
            compose_transformations(reg, kam, &theta)
        })
        .collect();
    transformation_bounds_of(&ns)
}

/// Same bounds from transformations already evaluated on a grid.
pub fn transformation_bounds_of(ns: &[CMat]) -> TransformationBounds {
    let per: Vec<(f64, f64, f64)> = ns
        .par_iter()
        .map(|m| {
            let sv = m.to_nalgebra().singular_values();
            let smax = sv.iter().fold(0.0f64, |a, v| a.max(*v));
            let smin = sv.iter().fold(f64::INFINITY, |a, v| a.min(*v));
            let mut dev = m.adjoint().matmul(m);
            dev.axpy(-ONE, &CMat::identity(m.rows));
            (smax, 1.0 / smin, dev.max_abs())
        })
        .collect();
    let mut b = TransformationBounds {
        sup_norm: 0.0,
        sup_inverse_norm: 0.0,
        sup_condition: 0.0,
        unitarity_deviation: 0.0,
    };
    for (s, si, dev) in per {
        b.sup_norm = b.sup_norm.max(s);
        b.sup_inverse_norm = b.sup_inverse_norm.max(si);
        b.sup_condition = b.sup_condition.max(s * si);
        b.unitarity_deviation = b.unitarity_deviation.max(dev);
    }
    b
}

/// Dense Sylvester solve of one `(l, i, j)` tuple through the vectorized
/// Kronecker system; used as an oracle.
pub fn kronecker_block_solve(omega_dot_ell: f64, lam_i: &Block, lam_j: &Block, p: &Block) -> Block {
    let (r, c) = (p.rows, p.cols);
    let dim = r * c;
    let mut a = nalgebra::DMatrix::<C64>::zeros(dim, dim);
    let mut rhs = nalgebra::DVector::<C64>::zeros(dim);
    let iu = C64::new(0.0, 1.0);
    // unknown G[a][b] sits at a * c + b
    for ra in 0..r {
        for cb in 0..c {
            let row = ra * c + cb;
            rhs[row] = p.get(ra, cb);
            a[(row, row)] += iu * omega_dot_ell;
            for k in 0..r {
                a[(row, k * c + cb)] += iu * lam_i.get(ra, k);
            }
            for k in 0..c {
                a[(row, ra * c + k)] -= iu * lam_j.get(k, cb);
            }
        }
    }
    let sol = a.lu().solve(&rhs).expect("singular Kronecker system");
    let mut g = Block::zeros(r, c);
    for ra in 0..r {
        for cb in 0..c {
            g.set(ra, cb, sol[ra * c + cb]);
        }
    }
    g
}
