//! Sampling estimates of the frequency sets removed by the non-resonance
//! conditions, with an exact interval-union reference in one dimension.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kam::{resonance_check_table, KamParams};
use crate::regularization::check_omega0;
use crate::spectral::{FrequencyPoint, Mode, Truncation};
use crate::testing::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Grid,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaSampler {
    pub mode: SamplerMode,
    /// Total samples for Monte Carlo, points per dimension for the grid.
    pub count: usize,
    pub seed: u64,
}

impl OmegaSampler {
    /// Points of `[1,2]^d`, or `[1,2]^{d+1}` with the last coordinate taken
    /// as the torus speed in beta-torus mode.
    pub fn points(&self, d: usize, mode: Mode) -> Vec<FrequencyPoint> {
        let dims = param_dims(d, mode);
        let raw: Vec<Vec<f64>> = match self.mode {
            SamplerMode::MonteCarlo => {
                let mut r = rng(self.seed);
                (0..self.count)
                    .map(|_| (0..dims).map(|_| 1.0 + r.gen::<f64>()).collect())
                    .collect()
            }
            SamplerMode::Grid => {
                let g = self.count.max(1);
                let total = g.pow(dims as u32);
                (0..total)
                    .map(|flat| {
                        let mut rem = flat;
                        let mut x = vec![0.0; dims];
                        for c in (0..dims).rev() {
                            x[c] = 1.0 + ((rem % g) as f64 + 0.5) / g as f64;
                            rem /= g;
                        }
                        x
                    })
                    .collect()
            }
        };
        raw.into_iter().map(|x| point_from_params(&x, d, mode)).collect()
    }
}

fn param_dims(d: usize, mode: Mode) -> usize {
    match mode {
        Mode::Standard => d,
        Mode::BetaTorus => d + 1,
    }
}

fn point_from_params(x: &[f64], d: usize, mode: Mode) -> FrequencyPoint {
    FrequencyPoint {
        omega: x[..d].to_vec(),
        v: match mode {
            Mode::Standard => None,
            Mode::BetaTorus => Some(x[d]),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureBox {
    pub ell_max: usize,
    pub m_max: usize,
}

impl MeasureBox {
    /// `|l| <= 2L`, `|m| <= 4J`.
    pub fn default_for(t: &Truncation) -> Self {
        MeasureBox {
            ell_max: 2 * t.l_max,
            m_max: 4 * t.j_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Least-squares slope of fraction against alpha.
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    /// Log-log slope over the positive fractions; `None` when fewer than two
    /// are positive.
    pub exponent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFraction {
    pub k: usize,
    pub n_k: usize,
    /// Fraction failing the certificate at step `k`.
    pub fraction: f64,
    pub stderr: f64,
    /// Fraction first excluded at step `k`, i.e. the estimate of
    /// `Omega_k \ Omega_{k+1}`.
    pub newly_excluded: f64,
    pub alpha_over_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub alpha_values: Vec<f64>,
    pub fractions: Vec<f64>,
    pub stderr: Vec<f64>,
    pub fit: ScalingFit,
    pub per_step: Vec<StepFraction>,
    pub seed: u64,
    pub samples: usize,
    #[serde(rename = "box")]
    pub box_: MeasureBox,
}

fn stderr_of(f: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (f * (1.0 - f) / n as f64).sqrt()
    }
}

/// Per-sample margins, so that a sample is excluded at `alpha` iff its margin
/// is below `alpha` or exactly zero.
pub fn omega0_margins(points: &[FrequencyPoint], b: MeasureBox, mode: Mode) -> Vec<f64> {
    points
        .par_iter()
        .map(|p| check_omega0(p, 0.0, b.ell_max, b.m_max, mode).min_margin)
        .collect()
}

fn excluded(margin: f64, alpha: f64) -> bool {
    margin < alpha || margin == 0.0
}

/// Fraction of sampled frequencies failing the first non-resonance check,
/// for each `alpha`.
pub fn measure_omega0(alphas: &[f64], sampler: &OmegaSampler, d: usize, b: MeasureBox, mode: Mode) -> ExclusionReport {
    let points = sampler.points(d, mode);
    let margins = omega0_margins(&points, b, mode);
    let n = margins.len();
    let fractions: Vec<f64> = alphas
        .iter()
        .map(|&a| margins.iter().filter(|&&m| excluded(m, a)).count() as f64 / n.max(1) as f64)
        .collect();
    let stderr = fractions.iter().map(|&f| stderr_of(f, n)).collect();
    let fit = fit_scaling(alphas, &fractions);
    ExclusionReport {
        alpha_values: alphas.to_vec(),
        fractions,
        stderr,
        fit,
        per_step: Vec::new(),
        seed: sampler.seed,
        samples: n,
        box_: b,
    }
}

/// Exact length of `{omega in [1,2] : |omega l + m| < alpha / (1 + |l|^3)}`
/// over `0 < |l| <= ell_max`, `|m| <= m_max`, in one dimension.
pub fn excluded_length_d1(alpha: f64, ell_max: usize, m_max: usize) -> f64 {
    // l = 0 excludes everything once some |m| >= 1 is below alpha
    if m_max >= 1 && alpha > 1.0 {
        return 1.0;
    }
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mm = m_max as i64;
    for l in 1..=ell_max as i64 {
        let lf = l as f64;
        let half = alpha / ((1.0 + lf.powi(3)) * lf);
        // -m / l must lie within `half` of [1, 2]
        let lo = (-(2.0 + half) * lf).floor() as i64;
        let hi = (-(1.0 - half) * lf).ceil() as i64;
        for m in lo.max(-mm)..=hi.min(mm) {
            let c = -(m as f64) / lf;
            let a = (c - half).max(1.0);
            let b = (c + half).min(2.0);
            if b > a {
                intervals.push((a, b));
            }
        }
    }
    intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in intervals {
        match cur {
            Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((ca, cb)) = cur {
        total += cb - ca;
    }
    total
}

/// Eigenvalue tables `lambda^k_{j,v}` at each KAM step, tabulated at the
/// cell midpoints of a uniform grid over the parameter box and interpolated
/// multilinearly. With a power of two per dimension every node `p / 2g` has
/// `p` odd, which keeps the nodes away from low order resonances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaInterpolant {
    pub d: usize,
    pub mode: Mode,
    pub grid_points: usize,
    /// Indexed `[node][step][j][v]`, nodes flattened with the first
    /// parameter most significant.
    pub tables: Vec<Vec<Vec<Vec<f64>>>>,
}

impl LambdaInterpolant {
    /// Runs `tables_at` at every grid node.
    pub fn build<F>(d: usize, mode: Mode, grid_points: usize, tables_at: F) -> Result<Self>
    where
        F: Fn(&FrequencyPoint) -> Result<Vec<Vec<Vec<f64>>>> + Sync,
    {
        if grid_points < 2 {
            return Err(Error::config("measure.grid_points", "need at least 2 nodes per dimension"));
        }
        let dims = param_dims(d, mode);
        let total = grid_points.pow(dims as u32);
        let tables: Vec<Result<Vec<Vec<Vec<f64>>>>> = (0..total)
            .into_par_iter()
            .map(|flat| {
                let x = node_params(flat, dims, grid_points);
                tables_at(&point_from_params(&x, d, mode))
            })
            .collect();
        let tables = tables.into_iter().collect::<Result<Vec<_>>>()?;
        let steps = tables[0].len();
        if tables.iter().any(|t| t.len() != steps) {
            return Err(Error::config("measure", "grid runs disagree on the number of KAM steps"));
        }
        Ok(LambdaInterpolant { d, mode, grid_points, tables })
    }

    pub fn steps(&self) -> usize {
        self.tables[0].len()
    }

    pub fn eval(&self, p: &FrequencyPoint, step: usize) -> Vec<Vec<f64>> {
        let dims = param_dims(self.d, self.mode);
        let g = self.grid_points;
        let mut x: Vec<f64> = p.omega.clone();
        if self.mode == Mode::BetaTorus {
            x.push(p.speed());
        }
        let mut base = vec![0usize; dims];
        let mut frac = vec![0.0; dims];
        for c in 0..dims {
            // nodes sit at cell midpoints; the outer half cells extrapolate
            let u = (x[c] - 1.0) * g as f64 - 0.5;
            let b = (u.floor().max(0.0) as usize).min(g - 2);
            base[c] = b;
            frac[c] = u - b as f64;
        }
        let shape = &self.tables[0][step];
        let mut out: Vec<Vec<f64>> = shape.iter().map(|row| vec![0.0; row.len()]).collect();
        for corner in 0..(1usize << dims) {
            let mut w = 1.0;
            let mut flat = 0;
            for c in 0..dims {
                let bit = (corner >> (dims - 1 - c)) & 1;
                w *= if bit == 1 { frac[c] } else { 1.0 - frac[c] };
                flat = flat * g + base[c] + bit;
            }
            if w == 0.0 {
                continue;
            }
            for (o, row) in out.iter_mut().zip(&self.tables[flat][step]) {
                for (a, b) in o.iter_mut().zip(row) {
                    *a += w * b;
                }
            }
        }
        out
    }
}

fn node_params(flat: usize, dims: usize, g: usize) -> Vec<f64> {
    let mut rem = flat;
    let mut x = vec![0.0; dims];
    for c in (0..dims).rev() {
        x[c] = 1.0 + ((rem % g) as f64 + 0.5) / g as f64;
        rem /= g;
    }
    x
}

/// Per-step fractions of sampled frequencies failing the second-order
/// Melnikov conditions, with eigenvalues taken from the interpolant. The
/// angle box is that of `t`.
pub fn measure_kam_steps(interp: &LambdaInterpolant, params: &KamParams, sampler: &OmegaSampler, t: &Truncation) -> Vec<StepFraction> {
    let points = sampler.points(interp.d, interp.mode);
    let schedule = params.schedule();
    let steps = interp.steps().min(schedule.len());
    let fails: Vec<Vec<bool>> = points
        .par_iter()
        .map(|p| {
            (0..steps)
                .map(|k| !resonance_check_table(&interp.eval(p, k), p, t, params, schedule[k]).ok)
                .collect()
        })
        .collect();
    let n = points.len();
    (0..steps)
        .map(|k| {
            let failing = fails.iter().filter(|f| f[k]).count();
            let first = fails.iter().filter(|f| f[k] && !f[..k].iter().any(|&x| x)).count();
            let fraction = failing as f64 / n.max(1) as f64;
            StepFraction {
                k,
                n_k: schedule[k],
                fraction,
                stderr: stderr_of(fraction, n),
                newly_excluded: first as f64 / n.max(1) as f64,
                alpha_over_n: params.alpha / schedule[k] as f64,
            }
        })
        .collect()
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, Option<f64>)> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let se = (n > 2).then(|| {
        let icpt = my - slope * mx;
        let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    });
    Some((slope, se))
}

/// Linear slope of fraction against alpha and the log-log exponent.
pub fn fit_scaling(alphas: &[f64], fractions: &[f64]) -> ScalingFit {
    let lin = linear_fit(alphas, fractions);
    let (lx, ly): (Vec<f64>, Vec<f64>) = alphas
        .iter()
        .zip(fractions)
        .filter(|(a, f)| **a > 0.0 && **f > 0.0)
        .map(|(a, f)| (a.ln(), f.ln()))
        .unzip();
    ScalingFit {
        slope: lin.map(|l| l.0),
        slope_stderr: lin.and_then(|l| l.1),
        exponent: linear_fit(&lx, &ly).map(|l| l.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::Block;
    use crate::spectral::C64;

    #[test]
    fn sampler_is_deterministic_and_in_box() {
        let s = OmegaSampler { mode: SamplerMode::MonteCarlo, count: 100, seed: 9 };
        let a = s.points(2, Mode::Standard);
        assert_eq!(a, s.points(2, Mode::Standard));
        assert!(a.iter().all(|p| p.omega.iter().all(|w| (1.0..2.0).contains(w))));
        let g = OmegaSampler { mode: SamplerMode::Grid, count: 4, seed: 0 };
        let pts = g.points(1, Mode::BetaTorus);
        assert_eq!(pts.len(), 16);
        assert_eq!(pts[0].omega, vec![1.125]);
        assert_eq!(pts[1].v, Some(1.375));
    }

    #[test]
    fn zero_alpha_excludes_nothing() {
        let s = OmegaSampler { mode: SamplerMode::MonteCarlo, count: 2000, seed: 1 };
        let r = measure_omega0(&[0.0], &s, 1, MeasureBox { ell_max: 10, m_max: 20 }, Mode::Standard);
        assert_eq!(r.fractions, vec![0.0]);
    }

    #[test]
    fn interval_union_brute_force() {
        // fine midpoint grid against the exact length
        let alpha = 0.03;
        let exact = excluded_length_d1(alpha, 8, 16);
        let s = OmegaSampler { mode: SamplerMode::Grid, count: 200_000, seed: 0 };
        let r = measure_omega0(&[alpha], &s, 1, MeasureBox { ell_max: 8, m_max: 16 }, Mode::Standard);
        assert!((r.fractions[0] - exact).abs() < 1e-4, "{} vs {exact}", r.fractions[0]);
    }

    #[test]
    fn large_m_tuples_do_not_contribute() {
        // |l| < |m|/2 can never come close to resonance for omega in [1, 2]
        let a = excluded_length_d1(0.04, 20, 40);
        let b = excluded_length_d1(0.04, 20, 3 * 20);
        assert_eq!(a, b);
    }

    #[test]
    fn exclusion_scales_linearly_in_d1() {
        let f = |a| excluded_length_d1(a, 20, 40);
        for a in [0.02, 0.04] {
            let r = f(2.0 * a) / f(a);
            assert!((1.5..=2.5).contains(&r), "{r}");
        }
        let alphas = [0.01, 0.02, 0.04];
        let fr: Vec<f64> = alphas.iter().map(|&a| f(a)).collect();
        let e = fit_scaling(&alphas, &fr).exponent.unwrap();
        assert!((0.8..=1.2).contains(&e), "{e}");
    }

    #[test]
    fn fractions_are_monotone() {
        let s = OmegaSampler { mode: SamplerMode::MonteCarlo, count: 5000, seed: 3 };
        let r = measure_omega0(&[0.005, 0.01, 0.02, 0.04], &s, 1, MeasureBox { ell_max: 12, m_max: 30 }, Mode::Standard);
        assert!(r.fractions.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn fit_examples() {
        let alphas = [0.01, 0.02, 0.04];
        let fit = fit_scaling(&alphas, &[0.03, 0.06, 0.12]);
        assert!((fit.exponent.unwrap() - 1.0).abs() < 1e-12);
        assert!((fit.slope.unwrap() - 3.0).abs() < 1e-12);
        let none = fit_scaling(&alphas, &[0.0, 0.0, 0.0]);
        assert_eq!(none.exponent, None);
    }

    fn free_tables(p: &FrequencyPoint, j_max: usize, steps: usize) -> Vec<Vec<Vec<f64>>> {
        let shift = 0.01 * (p.omega[0] - 1.0);
        (0..steps)
            .map(|_| {
                (0..=j_max)
                    .map(|j| {
                        let b = Block::identity(j).scale(C64::new(j as f64 + shift * j as f64, 0.0));
                        b.hermitian_eigen().0[..b.rows].to_vec()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn interpolant_reproduces_linear_data() {
        let it = LambdaInterpolant::build(1, Mode::Standard, 5, |p| Ok(free_tables(p, 4, 2))).unwrap();
        let p = FrequencyPoint::new(vec![1.37], None).unwrap();
        let got = it.eval(&p, 1);
        let want = free_tables(&p, 4, 2)[1].clone();
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn per_step_fractions_shrink() {
        let t = Truncation::new(1, 6, 4).unwrap();
        let it = LambdaInterpolant::build(1, Mode::Standard, 5, |p| Ok(free_tables(p, 6, 3))).unwrap();
        let params = KamParams {
            tau: 2.5,
            sigma: 1.5,
            alpha: 0.5,
            n0: 2.0,
            k_steps: 3,
            lie_order: 12,
            gate_constant: 0.0,
        };
        let s = OmegaSampler { mode: SamplerMode::MonteCarlo, count: 4000, seed: 5 };
        let f = measure_kam_steps(&it, &params, &s, &t);
        assert_eq!(f.len(), 3);
        assert!(f[0].fraction > 0.0);
        for w in f.windows(2) {
            assert!(w[1].fraction <= w[0].fraction + 2.0 * w[0].stderr);
        }
        // l = 0, i != j: the unit gap dominates even a large alpha
        let huge = KamParams { alpha: 0.9, ..params };
        let zero_ell = Truncation::new(1, 6, 1).unwrap();
        let p = FrequencyPoint::new(vec![1.5], None).unwrap();
        let cert = resonance_check_table(&it.eval(&p, 0), &p, &zero_ell, &huge, 1);
        assert!(cert.worst_tuple.unwrap().ell != vec![0]);
    }
}
