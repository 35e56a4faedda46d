//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! to stderr (uncaptured) and then asserts.
//!
//! Criteria 4, 5, 7, 8 and 9 share one run of `configs/reference.json`,
//! made on a single-thread pool so that criterion 9 can compare it against
//! an eight-thread run.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use relkam_core::block::NormSpec;
use relkam_core::dense::expm_hermitian;
use relkam_core::kam::{
    default_gate_constant, homological_residual_kam, kronecker_block_solve, solve_homological_kam,
};
use relkam_core::pipeline::{emit_reports, stage_regularize, PipelineOutcome};
use relkam_core::regularization::{homological_residual_reg, solve_homological_reg};
use relkam_core::testing::{random_hermitian, random_operator, rng};
use relkam_core::{
    exp_conjugate, run_pipeline, Block, BlockOperator, CMat, FrequencyPoint, KamParams, KamState, Mode,
    RunConfig, Stage, Truncation, C64,
};
use rand::Rng;

fn report(n: usize, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

fn golden() -> FrequencyPoint {
    FrequencyPoint::new(vec![(1.0 + 5f64.sqrt()) / 2.0], None).unwrap()
}

fn kam_params() -> KamParams {
    KamParams {
        tau: 2.5,
        sigma: 1.5,
        alpha: 1e-6,
        n0: 8.0,
        k_steps: 3,
        lie_order: 12,
        gate_constant: default_gate_constant(),
    }
}

/// Blocks `(j + 0.03) I` plus a seeded Hermitian perturbation of size 0.01.
fn perturbed_lambda(t: &Truncation, seed: u64) -> Vec<Block> {
    let mut r = rng(seed);
    (0..t.n_blocks())
        .map(|j| {
            let mut b = Block::identity(j).scale(C64::new(j as f64 + 0.03, 0.0));
            for p in 0..b.rows {
                b.set(p, p, b.get(p, p) + r.gen_range(-0.01..0.01));
            }
            if j > 0 {
                let off = C64::new(r.gen_range(-0.01..0.01), r.gen_range(-0.01..0.01));
                b.set(0, 1, off);
                b.set(1, 0, off.conj());
            }
            b
        })
        .collect()
}

fn reference_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    RunConfig::load(&path).expect("reference config loads")
}

struct ReferenceRun {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    outcome: PipelineOutcome,
    report_json: Vec<u8>,
    seconds: f64,
}

fn run_reference(threads: usize) -> ReferenceRun {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = reference_config();
    cfg.output_dir = dir.path().to_path_buf();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let start = Instant::now();
    let outcome = pool.install(|| run_pipeline(&cfg, &Stage::ALL, false)).expect("reference run");
    let seconds = start.elapsed().as_secs_f64();
    emit_reports(&outcome.report, &outcome.results, &cfg.output_dir).unwrap();
    let report_json = std::fs::read(dir.path().join("report.json")).unwrap();
    ReferenceRun { _dir: dir, cfg, outcome, report_json, seconds }
}

fn reference() -> &'static ReferenceRun {
    static REF: OnceLock<ReferenceRun> = OnceLock::new();
    REF.get_or_init(|| run_reference(1))
}

/// Rescaled to unit norm, so that residuals read as relative errors.
fn unit(a: BlockOperator, spec: &NormSpec) -> BlockOperator {
    let n = a.decay_norm(spec);
    a.scaled(C64::new(1.0 / n, 0.0))
}

#[test]
fn criterion_1_homological_residuals() {
    let start = Instant::now();
    let t = Truncation::new(1, 32, 6).unwrap();
    let spec = NormSpec::plain(2.0);
    let omega = golden();
    let params = kam_params();
    let (mut worst_reg, mut worst_kam) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let w = unit(random_hermitian(t, 1000 + seed, 2.0, None), &spec);
        let b = solve_homological_reg(&w, &omega, 1e-4, Mode::Standard).unwrap();
        worst_reg = worst_reg.max(homological_residual_reg(&b, &w, &omega).decay_norm(&spec));

        let p = unit(random_hermitian(t, 2000 + seed, 2.0, None), &spec);
        let st = KamState::new(perturbed_lambda(&t, seed), p, omega.clone(), &params).unwrap();
        let n = 16;
        let g = solve_homological_kam(&st, &params, n).unwrap();
        worst_kam = worst_kam.max(homological_residual_kam(&g, &st, n).decay_norm(&spec));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_reg <= 1e-12 && worst_kam <= 1e-12;
    report(
        1,
        pass,
        format!("reg residual {worst_reg:.2e}, kam residual {worst_kam:.2e} (tol 1e-12, 50 unit-norm inputs, {secs:.1}s)"),
    );
    assert!(pass);
}

fn dense_conjugate(g: &CMat, h: &CMat) -> CMat {
    expm_hermitian(g, -1.0).matmul(h).matmul(&expm_hermitian(g, 1.0))
}

fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Largest relative deviation of `exp_conjugate(g, h)` from the dense
/// conjugation, over a few angles.
fn exp_conjugate_error(g: &BlockOperator, h: &BlockOperator) -> f64 {
    let got = exp_conjugate(g, h, 40).unwrap().op;
    let mut worst = 0.0f64;
    for th in [0.0, 0.7, 2.1, 4.4] {
        let want = dense_conjugate(&g.eval_at(&[th]), &h.eval_at(&[th]));
        worst = worst.max(max_abs_diff(&got.eval_at(&[th]), &want) / want.max_abs());
    }
    worst
}

#[test]
fn criterion_2_oracle_equivalence() {
    let start = Instant::now();
    let t = Truncation::new(1, 8, 2).unwrap();
    let params = kam_params();
    let omega = golden();

    let mut kron = 0.0f64;
    for seed in 0..5u64 {
        let p = random_hermitian(t, 300 + seed, 2.0, None);
        let st = KamState::new(perturbed_lambda(&t, 40 + seed), p.clone(), omega.clone(), &params).unwrap();
        let n = 8;
        let g = solve_homological_kam(&st, &params, n).unwrap();
        let c = t.ell_center();
        for idx in 0..t.n_ell() {
            let x = omega.dot(&t.ell_of(idx));
            for i in 0..t.n_blocks() {
                for j in 0..t.n_blocks() {
                    // outside the cutoff G is zero by construction
                    if (idx == c && i == j) || i.abs_diff(j) >= n || t.ell_of(idx)[0].unsigned_abs() as usize >= n {
                        continue;
                    }
                    let want = kronecker_block_solve(x, &st.lambda[i], &st.lambda[j], &p.block(idx, i, j));
                    kron = kron.max(g.block(idx, i, j).sub(&want).spectral_norm());
                }
            }
        }
    }

    // time-independent generator: the series is exact slice by slice
    let mut g0 = random_hermitian(t, 11, 2.0, None);
    for idx in 0..t.n_ell() {
        if idx != t.ell_center() {
            g0.set_slice(idx, None);
        }
    }
    let g0 = g0.scaled(C64::new(0.2 / g0.max_abs(), 0.0));
    let h = random_hermitian(t, 12, 1.0, None);
    let err_static = exp_conjugate_error(&g0, &h);

    // small angle-dependent generator: harmonics beyond L are third order
    let mut g1 = random_hermitian(t, 13, 2.0, None);
    for idx in 0..t.n_ell() {
        if t.ell_of(idx)[0].abs() > 1 {
            g1.set_slice(idx, None);
        }
    }
    let g1 = g1.scaled(C64::new(1e-4 / g1.max_abs(), 0.0));
    let mut h0 = h.clone();
    for idx in 0..t.n_ell() {
        if idx != t.ell_center() {
            h0.set_slice(idx, None);
        }
    }
    let err_dynamic = exp_conjugate_error(&g1, &h0);

    let secs = start.elapsed().as_secs_f64();
    let pass = kron <= 1e-12 && err_static <= 1e-8 && err_dynamic <= 1e-8;
    report(
        2,
        pass,
        format!(
            "kronecker {kron:.2e} (tol 1e-12), exp_conjugate rel {err_static:.2e} / {err_dynamic:.2e} (tol 1e-8, {secs:.1}s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_cutoff_smoothing() {
    let t = Truncation::new(1, 16, 10).unwrap();
    let s = 2.0;
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..20u64 {
        let a = random_operator(t, 500 + seed, 1.0, None);
        for n in [2usize, 4, 8] {
            let (_, tail) = a.cutoff(n);
            for beta in [1.0, 2.0] {
                let lhs = tail.decay_norm(&NormSpec::plain(s));
                let rhs = (n as f64).powf(-beta) * a.decay_norm(&NormSpec::plain(s + beta));
                worst = worst.max(lhs / rhs);
                count += 1;
            }
        }
    }
    let pass = worst <= 1.0;
    report(3, pass, format!("max lhs/rhs {worst:.4} over {count} cases (bound 1)"));
    assert!(pass);
}

#[test]
fn criterion_4_kam_decay() {
    let r = reference();
    let kam = r.outcome.report.kam.as_ref().expect("kam ran");
    let lows: Vec<f64> = kam.report.norm_history.iter().map(|h| h.low).collect();
    let decreasing = lows.windows(2).all(|w| w[1] < w[0]);
    let superlinear = (1..lows.len() - 1).all(|k| lows[k + 1] <= lows[k].powf(1.4));
    let off = r.outcome.report.verify.as_ref().expect("verify ran").off_block.relative_mass;
    let pass = kam.report.resonance_failure.is_none() && decreasing && superlinear && off <= 1e-8;
    let lows_s: Vec<String> = lows.iter().map(|v| format!("{v:.3e}")).collect();
    report(
        4,
        pass,
        format!(
            "|P^k|_low [{}], strictly decreasing {decreasing}, ratio to power 1.4 ok {superlinear}, off-block mass {off:.2e} (tol 1e-8, reference run {:.0}s)",
            lows_s.join(", "),
            r.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_eigenvalue_asymptotics() {
    let r = reference();
    let big = r.outcome.results.regularize.as_ref().expect("regularize ran");
    let mut cfg = r.cfg.clone();
    cfg.j_max = 32;
    let small = stage_regularize(&cfg).unwrap();
    // blocks within K_x of the cutoff are truncation artifacts, see
    // `eigenvalue_asymptotics`; the full sup is printed alongside
    let (c32, c64) = (small.asymptotics.c_r_interior, big.asymptotics.c_r_interior);
    let ratio = c64 / c32;
    let full = big.asymptotics.c_r / small.asymptotics.c_r;
    // measured 2.98e-5 at the reference configuration, frozen with margin
    const C_R_FROZEN: f64 = 5e-5;
    let pass = c32 > 0.0 && (1.0 / 1.5..=1.5).contains(&ratio) && c64 <= C_R_FROZEN;
    report(
        5,
        pass,
        format!(
            "interior C_r(J=32) {c32:.4e}, C_r(J=64) {c64:.4e}, ratio {ratio:.4} (within x1.5, C_r <= {C_R_FROZEN:.0e}); all blocks: {:.4e}, {:.4e}, ratio {full:.4}",
            small.asymptotics.c_r, big.asymptotics.c_r
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_measure_scaling() {
    let r = reference();
    let m = r.outcome.results.measure.as_ref().expect("measure ran");
    let rep = &m.report;
    let exponent = rep.fit.exponent.unwrap_or(f64::NAN);
    let exact = m.exact_fractions.as_ref().expect("d = 1 has an exact oracle");
    let sigmas: Vec<f64> = rep
        .fractions
        .iter()
        .zip(&rep.stderr)
        .zip(exact)
        .map(|((f, s), e)| (f - e).abs() / s)
        .collect();
    let within = sigmas.iter().all(|s| *s <= 3.0);
    let per: Vec<f64> = rep.per_step.iter().map(|p| p.fraction).collect();
    let decreasing = !per.is_empty() && per.windows(2).all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0));
    let pass = (0.8..=1.2).contains(&exponent) && within && decreasing;
    report(
        6,
        pass,
        format!(
            "exponent {exponent:.3} (in [0.8, 1.2]), deviations {sigmas:.2?} stderr (max 3), per-step {per:?} decreasing {decreasing}, {} samples",
            rep.samples
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_dynamics() {
    let r = reference();
    let v = r.outcome.results.verify.as_ref().expect("verify ran");
    let d = r.outcome.report.dynamics.as_ref().expect("evolve ran");
    let h1 = v.boundedness.iter().find(|b| b.r == 1.0).expect("r = 1 recorded");
    let drift_ok = d.l2_drift <= 1e-9 * d.t_final;
    let conj_ok = v.conjugacy.max_relative_error <= v.conjugacy_bound;
    let pass = h1.pass && drift_ok && conj_ok;
    report(
        7,
        pass,
        format!(
            "H^1 ratio [{:.6}, {:.6}] vs C_bound {:.6}, L2 drift {:.2e} (tol {:.2e}), conjugacy {:.2e} (bound {:.2e}), T = {:.1}",
            h1.ratio_min,
            h1.ratio_max,
            h1.c_bound,
            d.l2_drift,
            1e-9 * d.t_final,
            v.conjugacy.max_relative_error,
            v.conjugacy_bound,
            d.t_final
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_structure() {
    let r = reference();
    let c = r.outcome.report.cascade.as_ref().expect("regularize ran");
    let k = r.outcome.report.kam.as_ref().expect("kam ran");
    let herm = c.max_hermitian_deviation.max(k.max_hermitian_deviation);
    // [Z, K] = 0 is checked on the sparsity pattern at every cascade step
    let commute = c.z_commutes_with_k;
    let c0 = r.outcome.results.regularize.as_ref().unwrap().gap_c0;
    let min_gap = k.report.norm_history.iter().map(|h| h.gap).fold(f64::INFINITY, f64::min);
    let gap_ok = k.gap_maintained && min_gap >= 0.5 * c0;
    let lambda_diag = r.outcome.results.kam.as_ref().unwrap().state.lambda_operator().is_time_independent_block_diagonal();
    let pass = herm <= 1e-11 && commute && gap_ok && lambda_diag;
    report(
        8,
        pass,
        format!(
            "hermitian deviation {herm:.2e} (tol 1e-11), [Z,K] = 0 {commute}, min gap {min_gap:.4} vs c0/2 = {:.4}, Lambda block-diagonal {lambda_diag}",
            0.5 * c0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let a = reference();
    let b = run_reference(8);
    let pass = a.report_json == b.report_json;
    report(
        9,
        pass,
        format!("report.json with 1 and 8 threads byte-identical: {pass} ({} bytes)", a.report_json.len()),
    );
    assert!(pass);
}

/// Not a numbered criterion: the cascade example on the reference symbol.
#[test]
fn reference_symbol_four_step_cascade() {
    let mut cfg = reference_config();
    cfg.reg.m_steps = Some(4);
    let out = stage_regularize(&cfg).unwrap();
    let d = 1;
    let s0 = (d as f64 + 3.0) / 2.0;
    let m = 2.0 * cfg.kam.sigma + 2.0;
    let w0 = relkam_core::pdo::matrix_of(&relkam_core::pipeline::load_symbol(&cfg).unwrap()).hermitian_symmetrize();
    let final_norm = out.state.w.decay_norm(&NormSpec::weighted(s0, m));
    let base = w0.decay_norm(&NormSpec::plain(s0));
    let _ = writeln!(
        std::io::stderr(),
        "cascade M=4: |W^M| weighted {final_norm:.3e} vs 1e-2 |W0| {:.3e}",
        1e-2 * base
    );
    assert!(
        final_norm <= 1e-2 * base,
        "weighted |W^4| {final_norm:.3e} exceeds 1e-2 |W0| {:.3e}",
        1e-2 * base
    );
}
