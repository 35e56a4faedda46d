//! Regularization cascade: repeated conjugations `e^{i eps B_i}` that move the
//! angle average of the perturbation into the time-independent part `Z` and
//! leave a perturbation of lower order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{lie_series, Block, BlockOperator, NormSpec};
use crate::dense::CMat;
use crate::error::{Error, Result};
use crate::pdo::{check_condition_c2, matrix_of, Symbol};
use crate::spectral::{
    bracket, ell_norm, k_value, q_value, FrequencyPoint, MassParam, Mode, Truncation, C64, ONE,
    ZERO,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    /// Number of cascade steps.
    pub m_steps: usize,
    pub lie_order: usize,
    pub alpha0: f64,
    #[serde(default)]
    pub mode: Mode,
    /// Largest accepted `b_bound` of the condition (C2) fit in standard mode.
    #[serde(default = "default_c2_tolerance")]
    pub c2_tolerance: f64,
}

fn default_c2_tolerance() -> f64 {
    2.0
}

impl RegParams {
    /// `ceil(4 m + 1)` with the smoothing weight `m = 2 sigma + 2`.
    pub fn default_steps(sigma: f64) -> usize {
        (4.0 * (2.0 * sigma + 2.0) + 1.0).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_steps == 0 {
            return Err(Error::config("m_steps", "must be at least 1"));
        }
        if self.lie_order < 4 {
            return Err(Error::config("lie_order", format!("{} is below 4", self.lie_order)));
        }
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return Err(Error::config("alpha0", format!("{} is not a nonnegative number", self.alpha0)));
        }
        Ok(())
    }
}

/// Norms recorded after each cascade step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayEntry {
    pub step: usize,
    pub w_max_abs: f64,
    /// `|W^i|^{s0}` with the right weight `<i>^{i/2 - 1/2}` that compensates
    /// the expected order `1/2 - i/2`.
    pub w_order_norm: f64,
    pub w_s0: f64,
    /// `eps |B_{i-1}|^{s0}`; zero at step 0.
    pub generator_s0: f64,
    pub hermitian_deviation: f64,
    pub z_commutes_with_k: bool,
    pub lie_terms: usize,
    pub lie_remainder: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationState {
    pub step: usize,
    pub z: BlockOperator,
    pub w: BlockOperator,
    pub b_log: Vec<BlockOperator>,
    pub epsilon: f64,
    pub omega: FrequencyPoint,
    pub mass: MassParam,
    pub mode: Mode,
    pub decay_report: Vec<DecayEntry>,
}

pub fn s0(d: usize) -> f64 {
    (d as f64 + 3.0) / 2.0
}

/// `<W>`: the `(theta, kappa)` average of `e^{i kappa K} W e^{-i kappa K}`,
/// i.e. the entries with `l = 0` and `|n| = |m|`.
pub fn kappa_theta_average(w: &BlockOperator) -> BlockOperator {
    w.block_diagonal_average()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Omega0Check {
    pub ok: bool,
    /// Smallest weighted divisor `|omega.l + v m| * w(l, m)` over the box,
    /// where `w` inverts the threshold profile; `ok` iff it is `>= alpha` and
    /// nonzero.
    pub min_margin: f64,
    pub worst_ell: Vec<i32>,
    pub worst_m: i64,
}

/// Reciprocal of the threshold profile, so that a divisor passes iff
/// `|divisor| * profile >= alpha`.
fn threshold_weight(mode: Mode, d: usize, ell_sup: usize, m: i64) -> f64 {
    match mode {
        Mode::Standard => 1.0 + (ell_sup as f64).powi(d as i32 + 2),
        Mode::BetaTorus => ((ell_sup as u64 + m.unsigned_abs()) as f64).powi(d as i32 + 1),
    }
}

fn for_each_ell(d: usize, ell_max: usize, mut f: impl FnMut(&[i32])) {
    let e = ell_max as i32;
    let mut ell = vec![-e; d];
    loop {
        f(&ell);
        let mut r = d;
        loop {
            if r == 0 {
                return;
            }
            r -= 1;
            if ell[r] < e {
                ell[r] += 1;
                break;
            }
            ell[r] = -e;
        }
    }
}

/// Non-resonance check `|omega.l + m| >= alpha / (1 + |l|^{d+2})` over
/// `|l| <= ell_max`, `|m| <= m_max`, `(l, m) != 0`; in beta-torus mode the
/// condition is `|omega.l + v m| >= alpha / (|l| + |m|)^{d+1}`.
pub fn check_omega0(omega: &FrequencyPoint, alpha0: f64, ell_max: usize, m_max: usize, mode: Mode) -> Omega0Check {
    let d = omega.d();
    let v = omega.speed();
    let mm = m_max as i64;
    let mut best = Omega0Check {
        ok: true,
        min_margin: f64::MAX,
        worst_ell: vec![0; d],
        worst_m: 0,
    };
    let mut consider = |ell: &[i32], m: i64, x: f64| {
        if m == 0 && ell.iter().all(|&c| c == 0) {
            return;
        }
        let margin = (x + v * m as f64).abs() * threshold_weight(mode, d, ell_norm(ell), m);
        if margin < best.min_margin {
            best.min_margin = margin;
            best.worst_ell = ell.to_vec();
            best.worst_m = m;
        }
    };
    for_each_ell(d, ell_max, |ell| {
        let x = omega.dot(ell);
        match mode {
            // the weight does not depend on m, so the nearest admissible
            // integer is the only candidate
            Mode::Standard if v == 1.0 => {
                let mut m = (-x).round().clamp(-(mm as f64), mm as f64) as i64;
                if m == 0 && ell.iter().all(|&c| c == 0) {
                    m = 1;
                }
                consider(ell, m, x);
            }
            _ => {
                for m in -mm..=mm {
                    consider(ell, m, x);
                }
            }
        }
    });
    best.ok = best.min_margin >= alpha0 && best.min_margin > 0.0;
    best
}

/// `B(l)^n_m = W(l)^n_m / (i (omega.l + v(|n| - |m|)))` away from the
/// average set `l = 0, |n| = |m|`, where it is zero.
///
/// Every nonzero entry of `W` must see a divisor above the non-resonance
/// threshold for `alpha0`. The entrywise formula is conjugation-symmetric,
/// so `B` is exactly Hermitian whenever `W` is.
pub fn solve_homological_reg(w: &BlockOperator, omega: &FrequencyPoint, alpha0: f64, mode: Mode) -> Result<BlockOperator> {
    let t = *w.trunc();
    if omega.d() != t.d {
        return Err(Error::TruncationMismatch(format!(
            "frequency has {} components, truncation d = {}",
            omega.d(),
            t.d
        )));
    }
    let v = omega.speed();
    let jm = t.j_max as i64;
    let center = t.ell_center();
    let solved: Vec<Result<Option<CMat>>> = (0..t.n_ell())
        .into_par_iter()
        .map(|idx| {
            let Some(s) = w.slice(idx) else { return Ok(None) };
            let ell = t.ell_of(idx);
            let x = omega.dot(&ell);
            let ln = ell_norm(&ell);
            let mut out = CMat::zeros(s.rows, s.cols);
            for r in 0..s.rows {
                let n = r as i64 - jm;
                for c in 0..s.cols {
                    let val = s.get(r, c);
                    if val == ZERO {
                        continue;
                    }
                    let m = c as i64 - jm;
                    let k = n.abs() - m.abs();
                    if idx == center && k == 0 {
                        continue;
                    }
                    let div = x + v * k as f64;
                    let weight = threshold_weight(mode, t.d, ln, k);
                    if div == 0.0 || div.abs() * weight < alpha0 {
                        return Err(Error::SmallDivisor {
                            ell,
                            i: n,
                            j: m,
                            divisor: div,
                            threshold: alpha0 / weight,
                        });
                    }
                    out.set(r, c, C64::new(val.im / div, -val.re / div));
                }
            }
            Ok(Some(out))
        })
        .collect();
    let mut b = BlockOperator::zeros(t);
    for (idx, s) in solved.into_iter().enumerate() {
        b.set_slice(idx, s?);
    }
    Ok(b)
}

/// `v |j|` as an operator.
pub fn k_operator(t: Truncation, omega: &FrequencyPoint) -> BlockOperator {
    let v = omega.speed();
    BlockOperator::multiplier(t, |j| k_value(j, v))
}

pub fn q_operator(t: Truncation, omega: &FrequencyPoint, mass: MassParam) -> BlockOperator {
    let v = omega.speed();
    BlockOperator::multiplier(t, |j| q_value(j, mass.value(), v))
}

/// `omega.d_theta B + i[K, B] - (W - <W>)`, assembled from operator products
/// rather than the entrywise formula.
pub fn homological_residual_reg(b: &BlockOperator, w: &BlockOperator, omega: &FrequencyPoint) -> BlockOperator {
    let k = k_operator(*w.trunc(), omega);
    let mut res = b.omega_derivative(omega);
    res.axpy(ONE, &k.commutator_i(b));
    res.axpy(-ONE, w);
    res.axpy(ONE, &kappa_theta_average(w));
    res
}

fn order_spec(d: usize, step: usize) -> NormSpec {
    NormSpec {
        s: s0(d),
        m_left: 0.0,
        m_right: 0.5 * step as f64 - 0.5,
    }
}

fn decay_entry(state: &RegularizationState, generator_s0: f64, lie: (usize, f64), b_dev: f64) -> DecayEntry {
    let d = state.z.trunc().d;
    DecayEntry {
        step: state.step,
        w_max_abs: state.w.max_abs(),
        w_order_norm: state.w.decay_norm(&order_spec(d, state.step)),
        w_s0: state.w.decay_norm(&NormSpec::plain(s0(d))),
        generator_s0,
        hermitian_deviation: state
            .w
            .hermitian_deviation()
            .max(state.z.hermitian_deviation())
            .max(b_dev),
        z_commutes_with_k: state.z.is_time_independent_block_diagonal(),
        lie_terms: lie.0,
        lie_remainder: lie.1,
    }
}

impl RegularizationState {
    /// Step-0 state with `Z = 0` and `W = W0`.
    pub fn initial(w0: BlockOperator, epsilon: f64, omega: FrequencyPoint, mass: MassParam, mode: Mode) -> Self {
        let t = *w0.trunc();
        let mut st = RegularizationState {
            step: 0,
            z: BlockOperator::zeros(t),
            w: w0,
            b_log: Vec::new(),
            epsilon,
            omega,
            mass,
            mode,
            decay_report: Vec::new(),
        };
        let entry = decay_entry(&st, 0.0, (0, 0.0), 0.0);
        st.decay_report.push(entry);
        st
    }

    pub fn trunc(&self) -> &Truncation {
        self.z.trunc()
    }

    /// `K + Q + eps Z + eps W` at the current step.
    pub fn hamiltonian(&self) -> BlockOperator {
        let t = *self.trunc();
        let mut h = k_operator(t, &self.omega);
        h.axpy(ONE, &q_operator(t, &self.omega, self.mass));
        let e = C64::new(self.epsilon, 0.0);
        h.axpy(e, &self.z);
        h.axpy(e, &self.w);
        h
    }

    /// Diagonal blocks of `Lambda^0 = K + Q + eps Z`.
    pub fn lambda_blocks(&self) -> Vec<Block> {
        let t = *self.trunc();
        let v = self.omega.speed();
        let c = t.ell_center();
        (0..t.n_blocks())
            .map(|j| {
                let mut b = self.z.block(c, j, j).scale(C64::new(self.epsilon, 0.0));
                let base = k_value(j as i64, v) + q_value(j as i64, self.mass.value(), v);
                for r in 0..b.rows {
                    b.set(r, r, b.get(r, r) + base);
                }
                b
            })
            .collect()
    }
}

/// One conjugation `u = e^{-i eps B} v`, with `B` solving the homological
/// equation for the current `W`.
pub fn regularization_step(state: &RegularizationState, params: &RegParams) -> Result<RegularizationState> {
    params.validate()?;
    let t = *state.trunc();
    let eps = state.epsilon;
    let avg = kappa_theta_average(&state.w);
    let mut next = state.clone();
    next.step += 1;
    if eps == 0.0 {
        next.w = BlockOperator::zeros(t);
        next.b_log.push(BlockOperator::zeros(t));
        let entry = decay_entry(&next, 0.0, (0, 0.0), 0.0);
        next.decay_report.push(entry);
        return Ok(next);
    }
    let b = solve_homological_reg(&state.w, &state.omega, params.alpha0, params.mode)?;
    let e = C64::new(eps, 0.0);
    let g = b.scaled(e);

    let mut x1 = q_operator(t, &state.omega, state.mass);
    x1.axpy(e, &state.z);
    x1.axpy(e, &state.w);
    let s1 = lie_series(&g, &x1, params.lie_order, 0)?;
    let x2 = avg.sub(&state.w).scaled(e);
    let s2 = lie_series(&g, &x2, params.lie_order, 1)?;

    let mut w = s1.op;
    w.axpy(ONE, &s2.op);
    let mut w = w.scaled(C64::new(1.0 / eps, 0.0));
    w.prune();
    next.w = w;
    next.z.axpy(ONE, &avg);
    next.z.prune();
    let g_s0 = g.decay_norm(&NormSpec::plain(s0(t.d)));
    let b_dev = b.hermitian_deviation();
    next.b_log.push(b);
    let entry = decay_entry(
        &next,
        g_s0,
        (s1.terms.max(s2.terms), s1.remainder.max(s2.remainder)),
        b_dev,
    );
    next.decay_report.push(entry);
    Ok(next)
}

/// Runs the full cascade from a symbol of order 1/2.
pub fn run_cascade(
    w0: &Symbol,
    params: &RegParams,
    omega: &FrequencyPoint,
    epsilon: f64,
    mass: MassParam,
) -> Result<RegularizationState> {
    params.validate()?;
    let t = w0.trunc;
    if omega.d() != t.d {
        return Err(Error::TruncationMismatch(format!(
            "frequency has {} components, symbol has d = {}",
            omega.d(),
            t.d
        )));
    }
    if !epsilon.is_finite() {
        return Err(Error::config("epsilon", "not finite"));
    }
    if epsilon == 0.0 {
        return Ok(RegularizationState::initial(
            BlockOperator::zeros(t),
            0.0,
            omega.clone(),
            mass,
            params.mode,
        ));
    }
    if params.mode == Mode::Standard {
        if w0.order > 0.5 {
            return Err(Error::config("symbol", format!("order {} exceeds 1/2", w0.order)));
        }
        let c2 = check_condition_c2(w0);
        if c2.b_bound > params.c2_tolerance {
            return Err(Error::config(
                "symbol",
                format!(
                    "condition (C2) fails: b_bound {:.3e} above tolerance {:.3e}",
                    c2.b_bound, params.c2_tolerance
                ),
            ));
        }
    }
    let check = check_omega0(omega, params.alpha0, t.l_max, 2 * t.j_max, params.mode);
    if !check.ok {
        return Err(Error::SmallDivisor {
            ell: check.worst_ell.clone(),
            i: check.worst_m,
            j: 0,
            divisor: check.min_margin / threshold_weight(params.mode, t.d, ell_norm(&check.worst_ell), check.worst_m),
            threshold: params.alpha0 / threshold_weight(params.mode, t.d, ell_norm(&check.worst_ell), check.worst_m),
        });
    }
    let w = matrix_of(w0).hermitian_symmetrize();
    let mut state = RegularizationState::initial(w, epsilon, omega.clone(), mass, params.mode);
    for _ in 0..params.m_steps {
        state = regularization_step(&state, params)?;
        assert!(state.z.is_time_independent_block_diagonal(), "Z left the commutant of K");
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRow {
    pub j: usize,
    pub lambda: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenAsymptotics {
    pub rows: Vec<AsymptoticRow>,
    pub sup_r: f64,
    /// `sup_r / eps`, zero when `eps = 0`.
    pub c_r: f64,
    /// Largest block index counted in the interior sup.
    pub interior_j_max: usize,
    pub sup_r_interior: f64,
    pub c_r_interior: f64,
}

/// Eigenvalues of the blocks of `K + Q + eps Z` and their residuals
/// `lambda - sqrt(v^2 j^2 + m^2) - eps a <j>^{1/2}`.
///
/// The interior sup skips the outermost `edge` blocks. Their second-order
/// corrections lose the partners beyond the cutoff that cancel them
/// elsewhere, which leaves an artifact growing like `eps^2 J`.
pub fn eigenvalue_asymptotics(state: &RegularizationState, a_coeff: f64, edge: usize) -> EigenAsymptotics {
    let v = state.omega.speed();
    let m = state.mass.value();
    let mut rows = Vec::new();
    let mut sup_r: f64 = 0.0;
    let mut sup_r_interior: f64 = 0.0;
    let interior_j_max = state.trunc().j_max.saturating_sub(edge);
    for (j, b) in state.lambda_blocks().iter().enumerate() {
        let (lam, _) = b.hermitian_eigen();
        let dim = b.rows;
        let vj = v * j as f64;
        let model = (vj * vj + m * m).sqrt() + state.epsilon * a_coeff * bracket(j as i64).sqrt();
        let lambda: Vec<f64> = lam[..dim].to_vec();
        let r: Vec<f64> = lambda.iter().map(|l| l - model).collect();
        for x in &r {
            sup_r = sup_r.max(x.abs());
            if j <= interior_j_max {
                sup_r_interior = sup_r_interior.max(x.abs());
            }
        }
        rows.push(AsymptoticRow { j, lambda, r });
    }
    let per_eps = |x: f64| if state.epsilon == 0.0 { 0.0 } else { x / state.epsilon };
    EigenAsymptotics {
        rows,
        sup_r,
        c_r: per_eps(sup_r),
        interior_j_max,
        sup_r_interior,
        c_r_interior: per_eps(sup_r_interior),
    }
}

/// `c0 = min_{i != j} min_{v, v'} |lambda_{i,v} - lambda_{j,v'}| / |i - j|`.
pub fn gap_constant(eigs: &[Vec<f64>]) -> f64 {
    let mut c0 = f64::INFINITY;
    for i in 0..eigs.len() {
        for j in i + 1..eigs.len() {
            let dist = (j - i) as f64;
            for a in &eigs[i] {
                for b in &eigs[j] {
                    c0 = c0.min((a - b).abs() / dist);
                }
            }
        }
    }
    c0
}
