use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a2d_core::config::{Mode, RunConfig};
use a2d_core::report::{compare_runs, plot_rewards, write_csv};
use a2d_core::run::{EvalArtifact, Phase, PhaseLog, Run, RunOptions};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "a2d", version, about = "Sub-question decomposition and gated in-context distillation on a synthetic arithmetic task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out task suites.
    GenData(RunArgs),
    /// Supervised warm-up of the starting policy.
    Backbone(RunArgs),
    /// Train the decomposer with format and quality rewards.
    TrainDecomposer(RunArgs),
    /// Annotate the training suite with the trained decomposer.
    Annotate(RunArgs),
    /// Train the reasoner in the configured mode.
    TrainReasoner(RunArgs),
    /// Evaluate a checkpoint on the held-out suite.
    Eval(EvalArgs),
    /// Compare finished runs as CSV, optionally with a reward plot.
    Report(ReportArgs),
    /// Run every phase of the configured mode.
    Pipeline(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.mode.
    #[arg(long)]
    mode: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Redo work whose outputs already exist.
    #[arg(long)]
    force: bool,
    /// Skip work whose outputs already exist.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate instead of the run's reasoner; the result is
    /// printed unless --report is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to compare.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// SVG file for the training-reward curves.
    #[arg(long)]
    plot: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Phase(anyhow::Error),
}

impl Failure {
    fn from_core(e: a2d_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Phase(e.into())
        }
    }
}

type Outcome = Result<(), Failure>;

fn config_for(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(Failure::from_core)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(m) = &args.mode {
        cfg.run.mode = m.parse::<Mode>().map_err(Failure::from_core)?;
    }
    cfg.validate().map_err(Failure::from_core)?;
    Ok(cfg)
}

fn overrides_given(args: &RunArgs) -> bool {
    args.config.is_some() || args.seed.is_some() || args.mode.is_some()
}

/// The run for a single-phase command: the recorded one when the directory
/// exists (any explicit config must agree with it), a new one otherwise.
fn open_run(args: &RunArgs) -> Result<Run, Failure> {
    let recorded = args.out.join("config.toml");
    if recorded.exists() {
        let run = Run::open(&args.out).map_err(Failure::from_core)?;
        if overrides_given(args) && config_for(args)?.config_hash() != run.config_hash() {
            return Err(Failure::Config(anyhow::anyhow!(
                "the given config differs from the one recorded in {}",
                args.out.display()
            )));
        }
        Ok(run)
    } else {
        Run::create(config_for(args)?, &args.out, RunOptions::default()).map_err(Failure::from_core)
    }
}

fn print_phase(log: &PhaseLog) {
    let what = match log.outcome {
        a2d_core::run::Outcome::Ran => "done",
        a2d_core::run::Outcome::Skipped => "skipped (already complete)",
    };
    eprintln!("[{}] {what} in {:.1?}", log.phase.name(), log.elapsed);
}

fn print_eval(artifact: &EvalArtifact) {
    for r in &artifact.reports {
        let ks: Vec<String> = r.pass_at_k.iter().map(|(k, v)| format!("pass@{k}={v:.4}")).collect();
        println!("{} {} n={} {}", r.suite, r.style, r.n_samples, ks.join(" "));
    }
}

fn single_phase(args: &RunArgs, phase: Phase) -> Outcome {
    let run = open_run(args)?;
    if run.is_done(phase).map_err(Failure::from_core)? && !args.force {
        if args.resume {
            eprintln!("[{}] skipped (already complete)", phase.name());
            return Ok(());
        }
        return Err(Failure::Config(anyhow::anyhow!(
            "{} already exists; pass --force to redo it or --resume to keep it",
            run.layout.output_of(phase).display()
        )));
    }
    let t = std::time::Instant::now();
    run.run_phase(phase).map_err(|e| Failure::Phase(e.into()))?;
    print_phase(&PhaseLog {
        phase,
        outcome: a2d_core::run::Outcome::Ran,
        elapsed: t.elapsed(),
    });
    if phase == Phase::Eval {
        let a: EvalArtifact = a2d_core::io::read_json(&run.layout.eval_report()).map_err(|e| Failure::Phase(e.into()))?;
        print_eval(&a);
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Outcome {
    let Some(ckpt) = &args.checkpoint else {
        return single_phase(&args.run, Phase::Eval);
    };
    let run = open_run(&args.run)?;
    let artifact = run.evaluate_checkpoint(ckpt).map_err(|e| Failure::Phase(e.into()))?;
    match &args.report {
        Some(p) => a2d_core::io::write_json(p, &artifact).map_err(|e| Failure::Phase(e.into()))?,
        None => print_eval(&artifact),
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Outcome {
    let summaries = compare_runs(&args.runs).map_err(Failure::from_core)?;
    let write = |path: &Path| -> anyhow::Result<()> {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(f, &summaries)?;
        Ok(())
    };
    match &args.out {
        Some(p) => write(p).map_err(Failure::Phase)?,
        None => write_csv(std::io::stdout().lock(), &summaries).map_err(|e| Failure::Phase(e.into()))?,
    }
    if let Some(p) = &args.plot {
        plot_rewards(p, &summaries).map_err(|e| Failure::Phase(e.into()))?;
    }
    Ok(())
}

/// Starts a run directory (refusing an occupied one unless forcing or
/// resuming) and writes the task suites.
fn gen_data(args: &RunArgs) -> Outcome {
    let opts = RunOptions {
        force: args.force,
        resume: args.resume,
    };
    Run::create(config_for(args)?, &args.out, opts).map_err(Failure::from_core)?;
    single_phase(args, Phase::Data)
}

fn pipeline(args: &RunArgs) -> Outcome {
    let cfg = config_for(args)?;
    let opts = RunOptions {
        force: args.force,
        resume: args.resume,
    };
    let run = Run::create(cfg, &args.out, opts).map_err(Failure::from_core)?;
    let artifact = run.pipeline(args.resume, print_phase).map_err(|e| Failure::Phase(e.into()))?;
    print_eval(&artifact);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Backbone(a) => single_phase(a, Phase::Backbone),
        Command::TrainDecomposer(a) => single_phase(a, Phase::Decomposer),
        Command::Annotate(a) => single_phase(a, Phase::Annotate),
        Command::TrainReasoner(a) => single_phase(a, Phase::Reasoner),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Pipeline(a) => pipeline(a),
    };
    finish(res)
}

fn finish(res: Outcome) -> ExitCode {
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Phase(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
