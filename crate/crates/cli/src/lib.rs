//! `underq`: simulations, operator checks, dataset generation, training and
//! evaluation from the command line.
//!
//! Every command writes its outputs to `--out` (default `underq-out`): the
//! primary records, a `run.config` snapshot that repeats the run when passed
//! back through `--config`, and a `run.log` sidecar holding the only
//! wall-clock data. Exit codes: 0 success, 2 invalid input, 3 a numerical
//! check failed, 1 anything else.

mod commands;
mod params;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use underq_core::error::Error;

#[derive(Debug, Parser)]
#[command(name = "underq", version, about = "Overestimation analysis and underestimated offline RL")]
struct Cli {
    /// Seed of the run (for gen-dataset: the dataset seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "underq-out")]
    out: PathBuf,
    /// Named experiment preset (gen-dataset, train, eval, probe-overestimation).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Flat key=value configuration file; run.config snapshots are accepted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte-Carlo overestimation of the nested soft-max chain against the closed forms.
    SimulateError(SimulateArgs),
    /// Samples f(x) = C x gamma^(x - b) on the integers.
    ErrorCurve(CurveArgs),
    /// Checks the contraction modulus of an underestimated operator on a random MDP.
    VerifyContraction(ContractionArgs),
    /// Iterates an underestimated operator to its fixed point.
    FixedPoint(FixedPointArgs),
    /// Writes an offline dataset from the scripted expert and random policies.
    GenDataset,
    /// Trains the diffusion actor and expectile critics.
    Train(TrainArgs),
    /// Evaluates a checkpoint's actor.
    Eval(EvalArgs),
    /// Compares a checkpoint's critic values with Monte-Carlo returns.
    ProbeOverestimation(ProbeArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    /// `analytic` or `fitted`.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// 1 for the action-value curve, 2 for the state-value curve.
    #[arg(long)]
    offset: Option<u8>,
    /// Last sampled x; defaults to ten times the maximiser.
    #[arg(long)]
    x_max: Option<usize>,
}

#[derive(Debug, Args)]
struct MdpArgs {
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    iota: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// `scaling`, `quantile` or `expectile`.
    #[arg(long)]
    interp: Option<String>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    noise_samples: Option<usize>,
    /// Expectile level of the `expectile` reading.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct ContractionArgs {
    #[command(flatten)]
    mdp: MdpArgs,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    q_range: Option<f64>,
}

#[derive(Debug, Args)]
struct FixedPointArgs {
    #[command(flatten)]
    mdp: MdpArgs,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file; generated from the task configuration when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `eval_episodes` of the configuration.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
}

/// Why a command failed, and the exit code that reports it.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
    Core(Error),
    Io(std::io::Error),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 3,
            Failure::Core(e) if e.is_validation() => 2,
            Failure::Core(Error::NoConvergence { .. }) => 3,
            Failure::Core(_) | Failure::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_main<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let result = commands::run(&cli);
    let (code, status) = match &result {
        Ok(()) => (0, "ok".to_string()),
        Err(f) => {
            eprintln!("underq: {f}");
            (f.exit_code(), f.to_string())
        }
    };
    if cli.out.is_dir() {
        let log = format!(
            "started_unix={started}\nelapsed_seconds={:.3}\nexit_code={code}\nstatus={status}\n",
            clock.elapsed().as_secs_f64()
        );
        let _ = std::fs::write(cli.out.join("run.log"), log);
    }
    code
}
