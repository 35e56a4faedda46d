//! Configuration, stage orchestration, checkpoints and report files.
//!
//! Stages are `regularize`, `kam`, `measure`, `evolve` and `verify`. Each
//! writes `checkpoints/<stage>.json` under the output directory, keyed by the
//! configuration it was computed from, and the report is assembled only from
//! stage payloads so that it can be regenerated from checkpoints alone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    c_bound_on, conjugacy_from_trace, evolve, off_block_mass_on, verify_boundedness, BoundednessReport,
    ConjugacyReport, EvolutionConfig, Hamiltonian, NormTrace, OffBlockReport, TransformationGrid,
};
use crate::error::{Error, Result};
use crate::kam::{kam_iterate, kam_step, transformation_bounds_of, KamParams, KamReport, KamState, TransformationBounds};
use crate::measure::{
    excluded_length_d1, measure_kam_steps, measure_omega0, ExclusionReport, LambdaInterpolant, MeasureBox,
    OmegaSampler, SamplerMode,
};
use crate::pdo::{check_condition_c2, matrix_of, C2Report, Symbol, SymbolFile};
use crate::regularization::{
    check_omega0, eigenvalue_asymptotics, gap_constant, run_cascade, EigenAsymptotics, Omega0Check, RegParams,
    RegularizationState,
};
use crate::spectral::{bracket, FrequencyPoint, MassParam, Mode, StateVector, Truncation, C64};
use crate::testing::rng;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    #[serde(rename = "J")]
    pub j_max: usize,
    #[serde(rename = "L")]
    pub l_max: usize,
    #[serde(rename = "K_x")]
    pub k_x: usize,
    pub m_mass: f64,
    pub epsilon: f64,
    pub omega: Vec<f64>,
    /// Torus speed, beta-torus mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub symbol: SymbolSource,
    pub reg: RegSection,
    pub kam: KamParams,
    #[serde(default)]
    pub measure: MeasureSection,
    pub evolution: EvolutionSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SymbolSource {
    Builtin {
        name: String,
        #[serde(default)]
        params: BuilderParams,
    },
    Inline {
        symbol: SymbolFile,
    },
    /// Path to a symbol JSON file, relative paths taken from the config file.
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuilderParams {
    #[serde(default = "default_a0")]
    pub a0: f64,
    /// `c2_cosine` terms `c cos(l.theta) cos(k x)`.
    #[serde(default = "default_terms")]
    pub terms: Vec<CosTerm>,
    /// Size of the random part of the random builders.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Largest `|l|` of the random builders, clipped to `L`.
    #[serde(default = "default_ell_max")]
    pub ell_max: usize,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_a0() -> f64 {
    1.0
}

fn default_terms() -> Vec<CosTerm> {
    vec![
        CosTerm { ell: vec![1], c: 0.5, k: 1 },
        CosTerm { ell: vec![2], c: 0.25, k: 2 },
    ]
}

fn default_amplitude() -> f64 {
    0.3
}

fn default_ell_max() -> usize {
    2
}

impl Default for BuilderParams {
    fn default() -> Self {
        BuilderParams {
            a0: default_a0(),
            terms: default_terms(),
            amplitude: default_amplitude(),
            ell_max: default_ell_max(),
            seed: None,
        }
    }
}

/// `l` shorter than `d` is padded with zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosTerm {
    pub ell: Vec<i32>,
    pub c: f64,
    pub k: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    /// Defaults to `ceil(4 m + 1)` with `m = 2 sigma + 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_steps: Option<usize>,
    #[serde(default = "default_lie_order")]
    pub lie_order: usize,
    pub alpha0: f64,
    #[serde(default = "default_c2_tolerance")]
    pub c2_tolerance: f64,
}

fn default_lie_order() -> usize {
    12
}

fn default_c2_tolerance() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Sampler of the first non-resonance check; the seed defaults to the
    /// run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<OmegaSampler>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub box_: Option<MeasureBox>,
    /// Per-step Melnikov fractions from an eigenvalue interpolant.
    #[serde(default = "default_true")]
    pub per_step: bool,
    /// `alpha` of the per-step conditions, defaults to `kam.alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kam_alpha: Option<f64>,
    #[serde(default = "default_kam_samples")]
    pub kam_samples: usize,
    /// Nodes per parameter dimension, a power of two keeps them off low
    /// order resonances.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Truncation of the interpolant runs, clipped to `J` and `L`.
    #[serde(default = "default_interp_j", rename = "interp_J")]
    pub interp_j: usize,
    #[serde(default = "default_interp_l", rename = "interp_L")]
    pub interp_l: usize,
    /// Cascade steps of the interpolant runs. Nodes close to a first-order
    /// resonance make the full cascade grow instead of contract, while the
    /// spectrum only moves at second order in `epsilon` beyond step one.
    #[serde(default = "default_interp_reg_steps")]
    pub interp_reg_steps: usize,
}

fn default_interp_reg_steps() -> usize {
    2
}

fn default_alphas() -> Vec<f64> {
    vec![0.01, 0.02, 0.04]
}

fn default_true() -> bool {
    true
}

fn default_kam_samples() -> usize {
    20_000
}

fn default_grid_points() -> usize {
    8
}

fn default_interp_j() -> usize {
    8
}

fn default_interp_l() -> usize {
    4
}

impl Default for MeasureSection {
    fn default() -> Self {
        MeasureSection {
            alphas: default_alphas(),
            sampler: None,
            box_: None,
            per_step: true,
            kam_alpha: None,
            kam_samples: default_kam_samples(),
            grid_points: default_grid_points(),
            interp_j: default_interp_j(),
            interp_l: default_interp_l(),
            interp_reg_steps: default_interp_reg_steps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Uniform random coefficients times `<j>^{-decay}`, unit `L2` norm.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default = "default_u0_decay")]
        decay: f64,
    },
    Mode {
        j: i64,
    },
    Coeffs {
        coeffs: Vec<C64>,
    },
}

fn default_u0_decay() -> f64 {
    2.0
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Random { seed: None, decay: default_u0_decay() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSection {
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "default_r_list")]
    pub r_list: Vec<f64>,
    #[serde(default = "default_order")]
    pub integrator_order: usize,
    #[serde(default)]
    pub u0: InitialState,
    #[serde(default = "default_records")]
    pub records: usize,
}

fn default_r_list() -> Vec<f64> {
    vec![0.0, 1.0]
}

fn default_order() -> usize {
    2
}

fn default_records() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Angle grid points per dimension, defaults to `4L + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_points: Option<usize>,
    /// Recorded states at which the conjugacy is checked, spread evenly.
    #[serde(default = "default_conjugacy_points")]
    pub conjugacy_points: usize,
}

fn default_conjugacy_points() -> usize {
    50
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { theta_points: None, conjugacy_points: default_conjugacy_points() }
    }
}

fn finite_positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

/// First backticked name in a serde message such as ``unknown field `x` ``.
fn backticked(msg: &str) -> Option<String> {
    let a = msg.find('`')?;
    let b = msg[a + 1..].find('`')?;
    Some(msg[a + 1..a + 1 + b].to_string())
}

impl RunConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            let msg = e.to_string();
            Error::config(backticked(&msg).unwrap_or_else(|| "config".into()), msg)
        })?;
        if let SymbolSource::File { path: p } = &mut cfg.symbol {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trunc(&self) -> Result<Truncation> {
        Truncation::new(self.d, self.j_max, self.l_max)
    }

    pub fn frequency(&self) -> Result<FrequencyPoint> {
        FrequencyPoint::new(self.omega.clone(), self.v)
    }

    pub fn mass(&self) -> Result<MassParam> {
        MassParam::new(self.m_mass)
    }

    pub fn reg_params(&self) -> RegParams {
        RegParams {
            m_steps: self.reg.m_steps.unwrap_or_else(|| RegParams::default_steps(self.kam.sigma)),
            lie_order: self.reg.lie_order,
            alpha0: self.reg.alpha0,
            mode: self.mode,
            c2_tolerance: self.reg.c2_tolerance,
        }
    }

    pub fn omega0_sampler(&self) -> OmegaSampler {
        self.measure.sampler.clone().unwrap_or(OmegaSampler {
            mode: SamplerMode::MonteCarlo,
            count: 100_000,
            seed: self.seed,
        })
    }

    pub fn theta_points(&self) -> usize {
        self.verify.theta_points.unwrap_or(4 * self.l_max + 1)
    }

    pub fn evolution_config(&self) -> Result<EvolutionConfig> {
        let e = &self.evolution;
        Ok(EvolutionConfig {
            t_final: e.t_final,
            dt: e.dt,
            r_list: e.r_list.clone(),
            integrator_order: e.integrator_order,
            u0: self.initial_state()?,
            records: e.records,
        })
    }

    pub fn initial_state(&self) -> Result<StateVector> {
        let jm = self.j_max;
        match &self.evolution.u0 {
            InitialState::Random { seed, decay } => {
                let mut r = rng(seed.unwrap_or(self.seed));
                let mut coeffs: Vec<C64> = (0..2 * jm + 1)
                    .map(|p| {
                        let w = bracket(p as i64 - jm as i64).powf(-decay);
                        C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)) * w
                    })
                    .collect();
                let n = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                for c in &mut coeffs {
                    *c /= n;
                }
                Ok(StateVector { j_max: jm, coeffs })
            }
            InitialState::Mode { j } => StateVector::single_mode(jm, *j)
                .map_err(|_| Error::config("evolution.u0.j", format!("mode {j} outside [-J, J]"))),
            InitialState::Coeffs { coeffs } => {
                if coeffs.len() != 2 * jm + 1 {
                    return Err(Error::config(
                        "evolution.u0.coeffs",
                        format!("{} coefficients, expected 2J+1 = {}", coeffs.len(), 2 * jm + 1),
                    ));
                }
                Ok(StateVector { j_max: jm, coeffs: coeffs.clone() })
            }
        }
    }

    /// Checks every field before any compute, failing on the first bad one.
    pub fn validate(&self) -> Result<()> {
        let t = self.trunc()?;
        if self.k_x > 2 * self.j_max {
            return Err(Error::config("K_x", format!("{} exceeds 2J", self.k_x)));
        }
        self.mass()?;
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::config("epsilon", format!("{} is not a nonnegative number", self.epsilon)));
        }
        if self.omega.len() != self.d {
            return Err(Error::config("omega", format!("{} components for d = {}", self.omega.len(), self.d)));
        }
        self.frequency()?;
        match (self.mode, self.v) {
            (Mode::BetaTorus, None) => return Err(Error::config("v", "required in beta_torus mode")),
            (Mode::Standard, Some(v)) if v != 1.0 => {
                return Err(Error::config("v", "only beta_torus mode takes a torus speed"))
            }
            _ => {}
        }
        match &self.symbol {
            SymbolSource::Builtin { name, params } => {
                if !BUILDERS.contains(&name.as_str()) {
                    return Err(Error::config("symbol.name", format!("unknown builder `{name}`")));
                }
                if !params.a0.is_finite() {
                    return Err(Error::config("symbol.params.a0", "not finite"));
                }
                if !(params.amplitude >= 0.0 && params.amplitude.is_finite()) {
                    return Err(Error::config("symbol.params.amplitude", "must be a nonnegative number"));
                }
                for term in &params.terms {
                    if term.ell.len() > self.d || term.ell.iter().any(|c| c.unsigned_abs() as usize > self.l_max) {
                        return Err(Error::config("symbol.params.terms", format!("angle mode {:?} outside the box", term.ell)));
                    }
                    if term.k.unsigned_abs() as usize > self.k_x {
                        return Err(Error::config("symbol.params.terms", format!("k = {} exceeds K_x", term.k)));
                    }
                }
            }
            SymbolSource::Inline { symbol } => check_symbol_file(symbol, &t, self.k_x)?,
            SymbolSource::File { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("symbol.path", "empty"));
                }
            }
        }
        let reg = self.reg_params();
        reg.validate().map_err(|e| prefix("reg", e))?;
        if !(self.reg.c2_tolerance >= 0.0) {
            return Err(Error::config("reg.c2_tolerance", "must be nonnegative"));
        }
        self.kam.validate(self.d).map_err(|e| prefix("kam", e))?;
        let m = &self.measure;
        if m.alphas.is_empty() || m.alphas.iter().any(|a| !finite_positive(*a)) {
            return Err(Error::config("measure.alphas", "need positive values"));
        }
        if let Some(s) = &m.sampler {
            if s.count == 0 {
                return Err(Error::config("measure.sampler.count", "must be positive"));
            }
        }
        if let Some(a) = m.kam_alpha {
            if !finite_positive(a) {
                return Err(Error::config("measure.kam_alpha", "must be positive"));
            }
        }
        if m.kam_samples == 0 {
            return Err(Error::config("measure.kam_samples", "must be positive"));
        }
        if m.grid_points < 2 {
            return Err(Error::config("measure.grid_points", "need at least 2"));
        }
        if m.interp_reg_steps == 0 {
            return Err(Error::config("measure.interp_reg_steps", "must be at least 1"));
        }
        if m.interp_j == 0 || m.interp_l == 0 {
            return Err(Error::config("measure.interp_J", "interpolant truncation must be positive"));
        }
        self.evolution_config()?.validate()?;
        if self.theta_points() < 2 {
            return Err(Error::config("verify.theta_points", "need at least 2"));
        }
        if self.verify.conjugacy_points < 2 {
            return Err(Error::config("verify.conjugacy_points", "need at least 2"));
        }
        Ok(())
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config { field: format!("{section}.{field}"), reason },
        other => other,
    }
}

fn check_symbol_file(f: &SymbolFile, t: &Truncation, k_x: usize) -> Result<()> {
    if f.d != t.d || f.j_max != t.j_max || f.l_max != t.l_max || f.k_x != k_x {
        return Err(Error::config(
            "symbol.symbol",
            format!(
                "truncation (d, J, L, K_x) = ({}, {}, {}, {}) differs from the run's ({}, {}, {}, {})",
                f.d, f.j_max, f.l_max, f.k_x, t.d, t.j_max, t.l_max, k_x
            ),
        ));
    }
    Ok(())
}

pub const BUILDERS: [&str; 3] = ["c2_cosine", "c2_random_zero_mean", "free_random"];

fn padded(ell: &[i32], d: usize) -> Vec<i32> {
    let mut out = ell.to_vec();
    out.resize(d, 0);
    out
}

fn for_each_sup_ball(t: &Truncation, radius: usize, mut f: impl FnMut(usize, &[i32])) {
    for idx in 0..t.n_ell() {
        let ell = t.ell_of(idx);
        if crate::spectral::ell_norm(&ell) <= radius {
            f(idx, &ell);
        }
    }
}

/// Named symbol families of order 1/2. `c2_cosine` and `c2_random_zero_mean`
/// are `<j>^{1/2}` times an angle and space dependent factor whose average is
/// `a0`; `free_random` adds a `j` dependent average for beta-torus runs.
pub fn builtin_symbol(name: &str, params: &BuilderParams, t: Truncation, k_x: usize, seed: u64) -> Result<Symbol> {
    let mut s = Symbol::zeros(t, k_x, 0.5);
    let jm = t.j_max as i64;
    let half = |j: i64| bracket(j).sqrt();
    let center = t.ell_center();
    let kx = k_x as i64;
    match name {
        "c2_cosine" => {
            for j in -jm..=jm {
                s.add_to(center, 0, j, C64::new(params.a0 * half(j), 0.0));
            }
            for term in &params.terms {
                let ell = padded(&term.ell, t.d);
                let neg: Vec<i32> = ell.iter().map(|c| -c).collect();
                let (Some(ip), Some(im)) = (t.ell_index(&ell), t.ell_index(&neg)) else {
                    return Err(Error::config("symbol.params.terms", format!("angle mode {ell:?} outside the box")));
                };
                if term.k.abs() > kx {
                    return Err(Error::config("symbol.params.terms", format!("k = {} exceeds K_x", term.k)));
                }
                for idx in [ip, im] {
                    for k in [term.k, -term.k] {
                        for j in -jm..=jm {
                            s.add_to(idx, k, j, C64::new(term.c * half(j) / 4.0, 0.0));
                        }
                    }
                }
            }
        }
        "c2_random_zero_mean" | "free_random" => {
            let mut r = rng(params.seed.unwrap_or(seed));
            let radius = params.ell_max.min(t.l_max);
            // draw for one of each (l, k), (-l, -k) pair and mirror, so the
            // factor is real valued
            let mut draws: Vec<(usize, i64, C64)> = Vec::new();
            for_each_sup_ball(&t, radius, |idx, ell| {
                for k in -kx..=kx {
                    let (mirror_idx, mirror_k) = (t.ell_neg(idx), -k);
                    if (idx, k) == (mirror_idx, mirror_k) {
                        continue;
                    }
                    if (idx, k) > (mirror_idx, mirror_k) {
                        continue;
                    }
                    let size = 1.0 + crate::spectral::ell_norm(ell) as f64 + k.unsigned_abs() as f64;
                    let c = C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)) * (params.amplitude / (size * size));
                    draws.push((idx, k, c));
                }
            });
            for (idx, k, c) in draws {
                for j in -jm..=jm {
                    s.add_to(idx, k, j, c * half(j));
                    s.add_to(t.ell_neg(idx), -k, j, c.conj() * half(j));
                }
            }
            for j in -jm..=jm {
                s.add_to(center, 0, j, C64::new(params.a0 * half(j), 0.0));
            }
            if name == "free_random" {
                // an even, j dependent average breaks the constant leading
                // coefficient
                let extra: Vec<f64> = (0..=jm).map(|_| params.amplitude * r.gen_range(-1.0..1.0)).collect();
                for j in -jm..=jm {
                    s.add_to(center, 0, j, C64::new(extra[j.unsigned_abs() as usize] * half(j), 0.0));
                }
            }
        }
        other => return Err(Error::config("symbol.name", format!("unknown builder `{other}`"))),
    }
    Ok(s)
}

/// Copy of `s` on a smaller truncation.
pub fn restrict_symbol(s: &Symbol, t: Truncation) -> Result<Symbol> {
    if t.d != s.trunc.d || t.j_max > s.trunc.j_max || t.l_max > s.trunc.l_max {
        return Err(Error::TruncationMismatch(format!("cannot restrict {:?} to {t:?}", s.trunc)));
    }
    let mut out = Symbol::zeros(t, s.k_x, s.order);
    let jm = t.j_max as i64;
    for idx in 0..t.n_ell() {
        let src = s.trunc.ell_index(&t.ell_of(idx)).expect("box shrinks");
        for k in -(s.k_x as i64)..=s.k_x as i64 {
            for j in -jm..=jm {
                out.set(idx, k, j, s.get(src, k, j));
            }
        }
    }
    Ok(out)
}

/// The configured symbol at the run's truncation.
pub fn load_symbol(cfg: &RunConfig) -> Result<Symbol> {
    let t = cfg.trunc()?;
    match &cfg.symbol {
        SymbolSource::Builtin { name, params } => builtin_symbol(name, params, t, cfg.k_x, cfg.seed),
        SymbolSource::Inline { symbol } => {
            check_symbol_file(symbol, &t, cfg.k_x)?;
            Symbol::from_file(symbol)
        }
        SymbolSource::File { path } => {
            let f: SymbolFile = read_json(path)?;
            check_symbol_file(&f, &t, cfg.k_x)?;
            Symbol::from_file(&f)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Regularize,
    Kam,
    Measure,
    Evolve,
    Verify,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Regularize, Stage::Kam, Stage::Measure, Stage::Evolve, Stage::Verify];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Regularize => "regularize",
            Stage::Kam => "kam",
            Stage::Measure => "measure",
            Stage::Evolve => "evolve",
            Stage::Verify => "verify",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Regularize | Stage::Measure | Stage::Evolve => &[],
            Stage::Kam => &[Stage::Regularize],
            Stage::Verify => &[Stage::Regularize, Stage::Kam, Stage::Evolve],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizeOutput {
    pub condition_c2: C2Report,
    pub omega0: Omega0Check,
    pub state: RegularizationState,
    pub asymptotics: EigenAsymptotics,
    pub gap_c0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamOutput {
    pub state: KamState,
    pub report: KamReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureOutput {
    pub report: ExclusionReport,
    /// Exact excluded lengths for `d = 1` standard runs.
    pub exact_fractions: Option<Vec<f64>>,
    pub kam_alpha: f64,
    /// Interpolant nodes whose KAM run stopped early near a resonance.
    pub interpolant_fallback_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveOutput {
    pub trace: NormTrace,
    pub t_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub c_bound: Vec<f64>,
    pub boundedness: Vec<BoundednessReport>,
    pub conjugacy: ConjugacyReport,
    /// `10 (|P^K|_low + dt^2 T)`.
    pub conjugacy_bound: f64,
    pub off_block: OffBlockReport,
    pub transformation: TransformationBounds,
}

#[derive(Clone, Debug, Default)]
pub struct StageResults {
    pub regularize: Option<RegularizeOutput>,
    pub kam: Option<KamOutput>,
    pub measure: Option<MeasureOutput>,
    pub evolve: Option<EvolveOutput>,
    pub verify: Option<VerifyOutput>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    schema_version: u32,
    stage: Stage,
    key: String,
    payload: T,
}

/// The part of the configuration a stage result depends on, so that editing
/// one section does not invalidate unrelated checkpoints.
fn config_key(cfg: &RunConfig, stage: Stage) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    let obj = v.as_object_mut().expect("config is an object");
    obj.remove("output_dir");
    let drop: &[&str] = match stage {
        Stage::Regularize => &["kam", "measure", "evolution", "verify"],
        Stage::Kam => &["measure", "evolution", "verify"],
        Stage::Measure => &["evolution", "verify"],
        Stage::Evolve => &["reg", "kam", "measure", "verify"],
        Stage::Verify => &["measure"],
    };
    for k in drop {
        obj.remove(*k);
    }
    if stage == Stage::Regularize {
        // the default step count depends on sigma
        obj.insert("reg".into(), serde_json::to_value(cfg.reg_params()).expect("params serialize"));
    }
    serde_json::to_string(&v).expect("config serializes")
}

fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join("checkpoints").join(format!("{}.json", stage.name()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    // temp files are created 0600; outputs should be readable like any other file
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(io)?;
    }
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
    }
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

fn save_checkpoint<T: Serialize>(out: &Path, stage: Stage, key: &str, payload: &T) -> Result<()> {
    let path = checkpoint_path(out, stage);
    write_atomic(&path, |w| {
        let ck = Checkpoint { schema_version: SCHEMA_VERSION, stage, key: key.to_string(), payload };
        serde_json::to_writer(&mut *w, &ck).map_err(std::io::Error::other)
    })
}

/// A checkpoint of `stage` computed from the same configuration, if any.
fn load_checkpoint<T: DeserializeOwned>(out: &Path, stage: Stage, key: &str) -> Result<Option<T>> {
    let path = checkpoint_path(out, stage);
    if !path.exists() {
        return Ok(None);
    }
    let ck: Checkpoint<T> = read_json(&path)?;
    if ck.schema_version != SCHEMA_VERSION || ck.stage != stage || ck.key != key {
        return Ok(None);
    }
    Ok(Some(ck.payload))
}

pub fn stage_regularize(cfg: &RunConfig) -> Result<RegularizeOutput> {
    let symbol = load_symbol(cfg)?;
    let omega = cfg.frequency()?;
    let params = cfg.reg_params();
    let t = symbol.trunc;
    let condition_c2 = check_condition_c2(&symbol);
    let omega0 = check_omega0(&omega, params.alpha0, t.l_max, 2 * t.j_max, cfg.mode);
    let state = run_cascade(&symbol, &params, &omega, cfg.epsilon, cfg.mass()?)?;
    let asymptotics = eigenvalue_asymptotics(&state, condition_c2.a_coeff, cfg.k_x);
    let eigs: Vec<Vec<f64>> = asymptotics.rows.iter().map(|r| r.lambda.clone()).collect();
    Ok(RegularizeOutput {
        condition_c2,
        omega0,
        state,
        asymptotics,
        gap_c0: gap_constant(&eigs),
    })
}

pub fn stage_kam(cfg: &RunConfig, reg: &RegularizeOutput) -> Result<KamOutput> {
    let state0 = KamState::from_regularization(&reg.state, &cfg.kam)?;
    let (state, report) = kam_iterate(&state0, &cfg.kam)?;
    let finite = state.eigen_table.iter().flatten().all(|v| v.is_finite())
        && report.norm_history.iter().all(|r| r.low.is_finite() && r.high.is_finite());
    if !finite {
        return Err(Error::LieDivergence("non-finite eigenvalues or norms after the KAM iteration".into()));
    }
    Ok(KamOutput { state, report })
}

/// Eigenvalue tables at the KAM steps `0..K` for one frequency, from a short
/// cascade with the divisor thresholds switched off. A step that fails (the node sits near a
/// second-order resonance) repeats the last table for the remaining steps and
/// returns `true` alongside.
fn eigen_tables_at(cfg: &RunConfig, symbol: &Symbol, p: &FrequencyPoint) -> Result<(Vec<Vec<Vec<f64>>>, bool)> {
    let mut reg = cfg.reg_params();
    reg.alpha0 = 0.0;
    reg.m_steps = reg.m_steps.min(cfg.measure.interp_reg_steps);
    let state = run_cascade(symbol, &reg, p, cfg.epsilon, cfg.mass()?)?;
    let kam = KamParams { alpha: f64::MIN_POSITIVE, gate_constant: 0.0, ..cfg.kam.clone() };
    let mut ks = KamState::from_regularization(&state, &kam)?;
    let mut tables = Vec::with_capacity(kam.k_steps);
    let mut fell_back = false;
    for k in 0..kam.k_steps {
        tables.push(ks.eigen_table.clone());
        if k + 1 < kam.k_steps && !fell_back {
            match kam_step(&ks, &kam) {
                Ok(next) => ks = next,
                Err(Error::LieDivergence(_) | Error::SmallDivisor { .. } | Error::Resonance { .. }) => fell_back = true,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((tables, fell_back))
}

pub fn stage_measure(cfg: &RunConfig) -> Result<MeasureOutput> {
    let t = cfg.trunc()?;
    let m = &cfg.measure;
    let b = m.box_.unwrap_or_else(|| MeasureBox::default_for(&t));
    let sampler = cfg.omega0_sampler();
    let mut report = measure_omega0(&m.alphas, &sampler, cfg.d, b, cfg.mode);
    let exact_fractions = (cfg.d == 1 && cfg.mode == Mode::Standard)
        .then(|| m.alphas.iter().map(|&a| excluded_length_d1(a, b.ell_max, b.m_max)).collect());
    let kam_alpha = m.kam_alpha.unwrap_or(cfg.kam.alpha);
    let fallback = AtomicUsize::new(0);
    if m.per_step && cfg.kam.k_steps > 0 {
        let ti = Truncation::new(cfg.d, m.interp_j.min(cfg.j_max), m.interp_l.min(cfg.l_max))?;
        let symbol = restrict_symbol(&load_symbol(cfg)?, ti)?;
        let interp = LambdaInterpolant::build(cfg.d, cfg.mode, m.grid_points, |p| {
            let (tables, fell_back) = eigen_tables_at(cfg, &symbol, p)?;
            if fell_back {
                fallback.fetch_add(1, Ordering::Relaxed);
            }
            Ok(tables)
        })?;
        let params = KamParams { alpha: kam_alpha, ..cfg.kam.clone() };
        let s = OmegaSampler { mode: SamplerMode::MonteCarlo, count: m.kam_samples, seed: sampler.seed.wrapping_add(1) };
        report.per_step = measure_kam_steps(&interp, &params, &s, &ti);
    }
    Ok(MeasureOutput { report, exact_fractions, kam_alpha, interpolant_fallback_nodes: fallback.into_inner() })
}

fn original_hamiltonian(cfg: &RunConfig) -> Result<Hamiltonian> {
    let symbol = load_symbol(cfg)?;
    let w0 = matrix_of(&symbol).hermitian_symmetrize();
    Hamiltonian::original(&w0, cfg.epsilon, &cfg.frequency()?, cfg.mass()?)
}

pub fn stage_evolve(cfg: &RunConfig) -> Result<EvolveOutput> {
    let h = original_hamiltonian(cfg)?;
    let (_, trace) = evolve(&h, &cfg.evolution_config()?)?;
    Ok(EvolveOutput { trace, t_final: cfg.evolution.t_final })
}

pub fn stage_verify(cfg: &RunConfig, reg: &RegularizeOutput, kam: &KamOutput, ev: &EvolveOutput) -> Result<VerifyOutput> {
    let h = original_hamiltonian(cfg)?;
    let grid = TransformationGrid::new(&reg.state, &kam.state, cfg.theta_points());
    let c = c_bound_on(&grid, &ev.trace.r_list);
    let boundedness = verify_boundedness(&ev.trace, &c);
    let conjugacy = conjugacy_from_trace(&h, &reg.state, &kam.state, &ev.trace, cfg.verify.conjugacy_points);
    let p_low = kam.report.norm_history.last().map_or(0.0, |r| r.low);
    let dt = ev.trace.dt;
    Ok(VerifyOutput {
        c_bound: c,
        boundedness,
        conjugacy,
        conjugacy_bound: 10.0 * (p_low + dt * dt * ev.t_final),
        off_block: off_block_mass_on(&h, &kam.state, &grid),
        transformation: transformation_bounds_of(&grid.n),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
    pub resumed: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub results: StageResults,
    pub timings: Vec<StageTiming>,
}

impl PipelineOutcome {
    /// Error for a failed resonance certificate, which the KAM stage
    /// records instead of raising.
    pub fn resonance_error(&self) -> Option<Error> {
        let f = self.results.kam.as_ref()?.report.resonance_failure.as_ref()?;
        let tuple = f
            .certificate
            .worst_tuple
            .as_ref()
            .map_or_else(|| "-".to_string(), |w| format!("l={:?}, i={}, j={}, v={}, v'={}", w.ell, w.i, w.j, w.v, w.vp));
        Some(Error::Resonance { step: f.step, ratio: f.certificate.min_ratio, tuple })
    }
}

/// Runs `requested` stages with their dependencies. Dependencies are taken
/// from matching checkpoints when present; requested stages are recomputed
/// unless `resume` is set.
pub fn run_pipeline(cfg: &RunConfig, requested: &[Stage], resume: bool) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let mut needed: Vec<Stage> = Vec::new();
    for &s in requested {
        for &d in s.deps() {
            needed.push(d);
        }
        needed.push(s);
    }
    needed.sort();
    needed.dedup();
    let mut res = StageResults::default();
    let mut timings = Vec::new();

    macro_rules! stage {
        ($stage:expr, $slot:ident, $compute:expr) => {{
            let reuse = resume || !requested.contains(&$stage);
            let start = Instant::now();
            let key = config_key(cfg, $stage);
            let loaded = if reuse { load_checkpoint(&out, $stage, &key)? } else { None };
            let resumed = loaded.is_some();
            let value = match loaded {
                Some(v) => v,
                None => {
                    let v = $compute;
                    save_checkpoint(&out, $stage, &key, &v)?;
                    v
                }
            };
            timings.push(StageTiming { stage: $stage, seconds: start.elapsed().as_secs_f64(), resumed });
            res.$slot = Some(value);
        }};
    }

    for stage in needed {
        match stage {
            Stage::Regularize => stage!(Stage::Regularize, regularize, stage_regularize(cfg)?),
            Stage::Kam => {
                let reg = res.regularize.as_ref().expect("dependency ran");
                stage!(Stage::Kam, kam, stage_kam(cfg, reg)?)
            }
            Stage::Measure => stage!(Stage::Measure, measure, stage_measure(cfg)?),
            Stage::Evolve => stage!(Stage::Evolve, evolve, stage_evolve(cfg)?),
            Stage::Verify => {
                let kam = res.kam.as_ref().expect("dependency ran");
                if kam.report.resonance_failure.is_some() {
                    continue;
                }
                let reg = res.regularize.as_ref().expect("dependency ran");
                let ev = res.evolve.as_ref().expect("dependency ran");
                stage!(Stage::Verify, verify, stage_verify(cfg, reg, kam, ev)?)
            }
        }
    }
    let report = PipelineReport::assemble(cfg, &res);
    Ok(PipelineOutcome { report, results: res, timings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeSummary {
    pub steps: usize,
    pub decay_report: Vec<crate::regularization::DecayEntry>,
    pub max_hermitian_deviation: f64,
    pub z_commutes_with_k: bool,
    pub asymptotics: EigenAsymptotics,
    pub gap_c0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamSummary {
    #[serde(flatten)]
    pub report: KamReport,
    pub max_hermitian_deviation: f64,
    /// Every recorded gap is at least half the initial one.
    pub gap_maintained: bool,
    pub final_low_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub t_final: f64,
    pub dt: f64,
    pub steps: usize,
    pub l2_drift: f64,
    pub l2_tolerance: f64,
    pub r_list: Vec<f64>,
    pub ratio_max: Vec<f64>,
    pub ratio_min: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub stages: Vec<Stage>,
    pub condition_c2: Option<C2Report>,
    pub omega0: Option<Omega0Check>,
    pub cascade: Option<CascadeSummary>,
    pub kam: Option<KamSummary>,
    pub measure: Option<MeasureOutput>,
    pub dynamics: Option<DynamicsSummary>,
    pub verify: Option<VerifyOutput>,
}

impl PipelineReport {
    pub fn assemble(cfg: &RunConfig, res: &StageResults) -> Self {
        let mut config = serde_json::to_value(cfg).expect("config serializes");
        if let Some(obj) = config.as_object_mut() {
            obj.remove("output_dir");
        }
        let mut stages = Vec::new();
        let cascade = res.regularize.as_ref().map(|r| {
            stages.push(Stage::Regularize);
            CascadeSummary {
                steps: r.state.step,
                decay_report: r.state.decay_report.clone(),
                max_hermitian_deviation: r.state.decay_report.iter().map(|e| e.hermitian_deviation).fold(0.0, f64::max),
                z_commutes_with_k: r.state.decay_report.iter().all(|e| e.z_commutes_with_k),
                asymptotics: r.asymptotics.clone(),
                gap_c0: r.gap_c0,
            }
        });
        let kam = res.kam.as_ref().map(|k| {
            stages.push(Stage::Kam);
            let hist = &k.report.norm_history;
            KamSummary {
                report: k.report.clone(),
                max_hermitian_deviation: hist.iter().map(|r| r.hermitian_deviation).fold(0.0, f64::max),
                gap_maintained: hist.iter().all(|r| r.gap >= 0.5 * k.report.initial_gap),
                final_low_norm: hist.last().map_or(0.0, |r| r.low),
            }
        });
        if res.measure.is_some() {
            stages.push(Stage::Measure);
        }
        let dynamics = res.evolve.as_ref().map(|e| {
            stages.push(Stage::Evolve);
            let tr = &e.trace;
            let col = |k: usize, f: fn(f64, f64) -> f64, init: f64| {
                tr.norms.iter().map(|row| row[k] / tr.norms[0][k]).fold(init, f)
            };
            DynamicsSummary {
                t_final: e.t_final,
                dt: tr.dt,
                steps: tr.steps,
                l2_drift: tr.l2_drift,
                l2_tolerance: 1e-9 * e.t_final,
                r_list: tr.r_list.clone(),
                ratio_max: (0..tr.r_list.len()).map(|k| col(k, f64::max, f64::NEG_INFINITY)).collect(),
                ratio_min: (0..tr.r_list.len()).map(|k| col(k, f64::min, f64::INFINITY)).collect(),
            }
        });
        if res.verify.is_some() {
            stages.push(Stage::Verify);
        }
        PipelineReport {
            schema_version: SCHEMA_VERSION,
            config,
            stages,
            condition_c2: res.regularize.as_ref().map(|r| r.condition_c2),
            omega0: res.regularize.as_ref().map(|r| r.omega0.clone()),
            cascade,
            kam,
            measure: res.measure.clone(),
            dynamics,
            verify: res.verify.clone(),
        }
    }
}

#[derive(Serialize)]
struct MeasureFile<'a> {
    schema_version: u32,
    alpha: &'a [f64],
    fraction: &'a [f64],
    stderr: &'a [f64],
    slope: Option<f64>,
    exponent: Option<f64>,
    seed: u64,
    samples: usize,
    #[serde(rename = "box")]
    box_: Option<MeasureBox>,
    exact_fraction: Option<&'a [f64]>,
    kam_alpha: Option<f64>,
    per_step: &'a [crate::measure::StepFraction],
}

/// Writes `report.json`, `norms.csv`, `trace.csv` and `measure.json`; absent
/// stages give header-only tables and empty arrays.
pub fn emit_reports(report: &PipelineReport, results: &StageResults, out: &Path) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    write_atomic(&out.join("norms.csv"), |w| {
        writeln!(w, "k,n_k,low,high,hermitian_deviation,gap")?;
        if let Some(k) = &report.kam {
            for r in &k.report.norm_history {
                let n = if r.k == 0 { 0 } else { k.report.schedule[r.k - 1] };
                writeln!(w, "{},{},{:e},{:e},{:e},{:e}", r.k, n, r.low, r.high, r.hermitian_deviation, r.gap)?;
            }
        }
        Ok(())
    })?;
    write_atomic(&out.join("trace.csv"), |w| {
        writeln!(w, "time,r,norm,l2_drift")?;
        if let Some(e) = &results.evolve {
            let tr = &e.trace;
            for (t, row) in tr.times.iter().zip(&tr.norms) {
                for (r, v) in tr.r_list.iter().zip(row) {
                    writeln!(w, "{t:e},{r},{v:e},{:e}", tr.l2_drift)?;
                }
            }
        }
        Ok(())
    })?;
    let empty: [f64; 0] = [];
    let m = report.measure.as_ref();
    let file = MeasureFile {
        schema_version: SCHEMA_VERSION,
        alpha: m.map_or(&empty[..], |m| &m.report.alpha_values),
        fraction: m.map_or(&empty[..], |m| &m.report.fractions),
        stderr: m.map_or(&empty[..], |m| &m.report.stderr),
        slope: m.and_then(|m| m.report.fit.slope),
        exponent: m.and_then(|m| m.report.fit.exponent),
        seed: m.map_or(0, |m| m.report.seed),
        samples: m.map_or(0, |m| m.report.samples),
        box_: m.map(|m| m.report.box_),
        exact_fraction: m.and_then(|m| m.exact_fractions.as_deref()),
        kam_alpha: m.map(|m| m.kam_alpha),
        per_step: m.map_or(&[][..], |m| &m.report.per_step),
    };
    write_json(&out.join("measure.json"), &file)
}

/// Wall times, kept apart from the deterministic report.
pub fn emit_timings(timings: &[StageTiming], threads: usize, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Timings<'a> {
        schema_version: u32,
        threads: usize,
        stages: &'a [StageTiming],
    }
    write_json(&out.join("timings.json"), &Timings { schema_version: SCHEMA_VERSION, threads, stages: timings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let cfg: RunConfig = serde_json::from_str(include_str!("../../../configs/small.json")).unwrap();
        cfg.validate().unwrap();
        cfg
    }

    fn in_dir(mut cfg: RunConfig, dir: &Path) -> RunConfig {
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn cosine_without_terms_is_a_multiplier() {
        let t = Truncation::new(1, 6, 2).unwrap();
        let p = BuilderParams { terms: Vec::new(), a0: 0.7, ..BuilderParams::default() };
        let s = builtin_symbol("c2_cosine", &p, t, 2, 0).unwrap();
        let c = t.ell_center();
        for idx in 0..t.n_ell() {
            for k in -2..=2i64 {
                for j in -6..=6i64 {
                    let want = if idx == c && k == 0 { 0.7 * bracket(j).sqrt() } else { 0.0 };
                    assert_eq!(s.get(idx, k, j), C64::new(want, 0.0));
                }
            }
        }
        let m = matrix_of(&s);
        assert!(m.is_time_independent_block_diagonal());
    }

    #[test]
    fn cosine_satisfies_c2() {
        let t = Truncation::new(1, 16, 3).unwrap();
        let s = builtin_symbol("c2_cosine", &BuilderParams::default(), t, 2, 0).unwrap();
        let c2 = check_condition_c2(&s);
        assert!((c2.a_coeff - 1.0).abs() < 1e-12, "{c2:?}");
        assert!(c2.b_bound < 2.0);
    }

    #[test]
    fn random_builders_are_seeded_and_real() {
        let t = Truncation::new(1, 8, 3).unwrap();
        let p = BuilderParams::default();
        for name in ["c2_random_zero_mean", "free_random"] {
            let a = builtin_symbol(name, &p, t, 2, 5).unwrap();
            let b = builtin_symbol(name, &p, t, 2, 5).unwrap();
            let c = builtin_symbol(name, &p, t, 2, 6).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            for idx in 0..t.n_ell() {
                for k in -2..=2i64 {
                    for j in -8..=8i64 {
                        assert_eq!(a.get(t.ell_neg(idx), -k, j), a.get(idx, k, j).conj());
                    }
                }
            }
        }
        let z = builtin_symbol("c2_random_zero_mean", &p, t, 2, 5).unwrap();
        assert!((check_condition_c2(&z).a_coeff - p.a0).abs() < 1e-12);
        assert!(matches!(builtin_symbol("nope", &p, t, 2, 5), Err(Error::Config { .. })));
    }

    #[test]
    fn restriction_keeps_entries() {
        let t = Truncation::new(1, 8, 3).unwrap();
        let s = builtin_symbol("free_random", &BuilderParams::default(), t, 2, 1).unwrap();
        let small = Truncation::new(1, 5, 2).unwrap();
        let r = restrict_symbol(&s, small).unwrap();
        let idx = small.ell_index(&[-2]).unwrap();
        let src = t.ell_index(&[-2]).unwrap();
        assert_eq!(r.get(idx, 1, -5), s.get(src, 1, -5));
        assert!(restrict_symbol(&r, t).is_err());
    }

    #[test]
    fn validation_names_the_first_bad_field() {
        let mut c = small();
        c.epsilon = -1.0;
        c.kam.tau = -1.0;
        assert_eq!(field_of(c.validate().unwrap_err()), "epsilon");
        let mut c = small();
        c.kam.tau = f64::NAN;
        assert!(field_of(c.validate().unwrap_err()).starts_with("kam."));
        let mut c = small();
        c.omega = vec![1.0, 2.0];
        assert_eq!(field_of(c.validate().unwrap_err()), "omega");
        let mut c = small();
        c.measure.alphas.clear();
        assert_eq!(field_of(c.validate().unwrap_err()), "measure.alphas");
        let mut c = small();
        c.verify.conjugacy_points = 1;
        assert_eq!(field_of(c.validate().unwrap_err()), "verify.conjugacy_points");
        let mut c = small();
        c.symbol = SymbolSource::Builtin { name: "x".into(), params: BuilderParams::default() };
        assert_eq!(field_of(c.validate().unwrap_err()), "symbol.name");
    }

    #[test]
    fn load_reports_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(include_str!("../../../configs/small.json")).unwrap();
        v["kam"]["tua"] = serde_json::json!(2.0);
        let path = dir.path().join("c.json");
        std::fs::write(&path, v.to_string()).unwrap();
        assert_eq!(field_of(RunConfig::load(&path).unwrap_err()), "tua");
    }

    #[test]
    fn zero_epsilon_is_trivial() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = in_dir(small(), dir.path());
        cfg.epsilon = 0.0;
        let out = run_pipeline(&cfg, &[Stage::Kam, Stage::Evolve, Stage::Verify], false).unwrap();
        let k = out.report.kam.as_ref().unwrap();
        assert!(k.report.norm_history.iter().all(|h| h.low == 0.0 && h.high == 0.0));
        let d = out.report.dynamics.as_ref().unwrap();
        for (a, b) in d.ratio_max.iter().zip(&d.ratio_min) {
            assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        }
        let v = out.report.verify.as_ref().unwrap();
        assert!(v.conjugacy.max_relative_error < 1e-12);
        assert!(v.off_block.relative_mass < 1e-13);
    }

    #[test]
    fn conjugacy_error_falls_with_more_kam_steps() {
        let dir = tempfile::tempdir().unwrap();
        let mut errs = Vec::new();
        for k in 1..=3 {
            let mut cfg = in_dir(small(), dir.path());
            cfg.kam.k_steps = k;
            cfg.evolution.integrator_order = 4;
            let out = run_pipeline(&cfg, &[Stage::Verify], false).unwrap();
            errs.push(out.report.verify.unwrap().conjugacy.max_relative_error);
        }
        // by K = 2 the residual is below the integrator error
        assert!(errs[1] < 0.1 * errs[0], "{errs:?}");
        assert!(errs[2] <= errs[1] * (1.0 + 1e-3), "{errs:?}");
    }

    #[test]
    fn empty_report_gives_empty_tables() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let res = StageResults::default();
        let rep = PipelineReport::assemble(&cfg, &res);
        emit_reports(&rep, &res, dir.path()).unwrap();
        let norms = std::fs::read_to_string(dir.path().join("norms.csv")).unwrap();
        assert_eq!(norms, "k,n_k,low,high,hermitian_deviation,gap\n");
        let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1);
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("measure.json")).unwrap()).unwrap();
        assert_eq!(m["alpha"], serde_json::json!([]));
        assert_eq!(m["per_step"], serde_json::json!([]));
        assert!(rep.stages.is_empty());
        assert!(rep.config.get("output_dir").is_none());
    }

    #[test]
    fn full_run_resumes_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = in_dir(small(), dir.path());
        let first = run_pipeline(&cfg, &Stage::ALL, false).unwrap();
        assert!(first.timings.iter().all(|t| !t.resumed));
        emit_reports(&first.report, &first.results, dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join("report.json")).unwrap();

        let norms = std::fs::read_to_string(dir.path().join("norms.csv")).unwrap();
        assert_eq!(norms.lines().count(), 1 + cfg.kam.k_steps + 1);
        let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + (cfg.evolution.records) * cfg.evolution.r_list.len());

        let again = run_pipeline(&cfg, &Stage::ALL, true).unwrap();
        assert!(again.timings.iter().all(|t| t.resumed));
        emit_reports(&again.report, &again.results, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("report.json")).unwrap(), bytes);

        // a dynamics-only change keeps the regularization checkpoint
        let mut cfg2 = cfg.clone();
        cfg2.evolution.dt = 0.02;
        let third = run_pipeline(&cfg2, &[Stage::Evolve, Stage::Regularize], true).unwrap();
        let resumed: Vec<(Stage, bool)> = third.timings.iter().map(|t| (t.stage, t.resumed)).collect();
        assert!(resumed.contains(&(Stage::Regularize, true)));
        assert!(resumed.contains(&(Stage::Evolve, false)));
    }

    #[test]
    fn checkpoints_round_trip_and_reject_other_keys() {
        let dir = tempfile::tempdir().unwrap();
        let payload = vec![1.5f64, -2.0, 1e-300];
        save_checkpoint(dir.path(), Stage::Measure, "a", &payload).unwrap();
        let back: Option<Vec<f64>> = load_checkpoint(dir.path(), Stage::Measure, "a").unwrap();
        assert_eq!(back, Some(payload));
        let other: Option<Vec<f64>> = load_checkpoint(dir.path(), Stage::Measure, "b").unwrap();
        assert_eq!(other, None);
        let missing: Option<Vec<f64>> = load_checkpoint(dir.path(), Stage::Kam, "a").unwrap();
        assert_eq!(missing, None);
    }

    #[test]
    fn atomic_writes_replace_whole_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("f.txt");
        write_atomic(&path, |w| w.write_all(b"first version, longer")).unwrap();
        write_atomic(&path, |w| w.write_all(b"second")).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        // a failing writer leaves the old file alone
        let err = write_atomic(&path, |_| Err(std::io::Error::other("boom")));
        assert!(err.is_err());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
