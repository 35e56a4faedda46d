use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relkam_core::pipeline::{emit_reports, emit_timings, run_pipeline, PipelineOutcome, RunConfig, Stage};
use relkam_core::Error;

#[derive(Parser)]
#[command(name = "relkam", version, about = "KAM reducibility pipeline for the forced relativistic Schrodinger equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the regularization cascade.
    Regularize(Common),
    /// Run the KAM iteration, regularizing first if needed.
    Kam(Common),
    /// Estimate excluded frequency fractions.
    Measure(Common),
    /// Integrate the truncated equation.
    Evolve(Common),
    /// Check boundedness, conjugacy and the off-block mass.
    Verify(Common),
    /// All stages in order.
    Full(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse matching stage checkpoints.
    #[arg(long)]
    resume: bool,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "RELKAM_THREADS", default_value_t = 0)]
    threads: usize,
}

fn stages(cmd: &Command) -> (&Common, Vec<Stage>) {
    match cmd {
        Command::Regularize(c) => (c, vec![Stage::Regularize]),
        Command::Kam(c) => (c, vec![Stage::Kam]),
        Command::Measure(c) => (c, vec![Stage::Measure]),
        Command::Evolve(c) => (c, vec![Stage::Evolve]),
        Command::Verify(c) => (c, vec![Stage::Verify]),
        Command::Full(c) => (c, Stage::ALL.to_vec()),
    }
}

fn summarize(o: &PipelineOutcome) {
    let r = &o.report;
    if let Some(c) = &r.cascade {
        eprintln!(
            "regularize: {} steps, final |W| {:.3e}, c0 {:.4}",
            c.steps,
            c.decay_report.last().map_or(0.0, |e| e.w_max_abs),
            c.gap_c0
        );
    }
    if let Some(k) = &r.kam {
        let lows: Vec<String> = k.report.norm_history.iter().map(|h| format!("{:.3e}", h.low)).collect();
        eprintln!("kam: |P^k|_low = [{}]", lows.join(", "));
    }
    if let Some(m) = &r.measure {
        eprintln!(
            "measure: fractions {:?}, exponent {:?}",
            m.report.fractions, m.report.fit.exponent
        );
    }
    if let Some(d) = &r.dynamics {
        eprintln!("evolve: {} steps, L2 drift {:.3e}", d.steps, d.l2_drift);
    }
    if let Some(v) = &r.verify {
        eprintln!(
            "verify: conjugacy {:.3e} (bound {:.3e}), off-block mass {:.3e}, C_bound {:?}",
            v.conjugacy.max_relative_error, v.conjugacy_bound, v.off_block.relative_mass, v.c_bound
        );
    }
    for t in &o.timings {
        eprintln!(
            "  {:<10} {:>9.2}s{}",
            t.stage.name(),
            t.seconds,
            if t.resumed { " (checkpoint)" } else { "" }
        );
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (common, requested) = stages(&cli.command);
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if common.threads > 0 {
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    }
    let outcome = run_pipeline(&cfg, &requested, common.resume)?;
    emit_reports(&outcome.report, &outcome.results, &cfg.output_dir)?;
    emit_timings(&outcome.timings, rayon::current_num_threads(), &cfg.output_dir)?;
    summarize(&outcome);
    match outcome.resonance_error() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
