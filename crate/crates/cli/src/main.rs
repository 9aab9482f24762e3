//! `flowinv`: training, sampling, inversion, editing and the experiment
//! harnesses behind one command line.
//!
//! Every parameter can come from a flag, from the `key=value` file given to
//! `--config`, or from its default, in that order of precedence. Exit codes:
//! 0 success, 1 usage or config error, 2 numeric failure, 3 failed check.

mod commands;
mod config;
mod error;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{FloatList, Pow2Float, Resolver};
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "flowinv",
    version,
    about = "Flow-matching inversion and editing laboratory"
)]
struct Cli {
    /// key=value file with parameters; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a conditional velocity field.
    Train(TrainArgs),
    /// Draw samples from a trained field.
    Sample(SampleArgs),
    /// Invert one image to noise.
    Invert(InvertArgs),
    /// Reconstruction benchmark over held-out images.
    Reconstruct(ReconstructArgs),
    /// Edit one held-out image.
    Edit(EditArgs),
    /// Local-error convergence study on the analytic field.
    Converge(ConvergeArgs),
    /// Sweep delay rate and guidance strength on the edit benchmark.
    Ablate(AblateArgs),
    /// Summarize the CSV outputs of earlier runs.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// shapes or gaussians.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability of training an item with the NULL condition.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub data_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Class name such as red_circle, a token number, or null.
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// euler or heun.
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// A .ppm image or a latent file; without it a held-out image is used.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// uni_inv, at_prev or at_target.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Evaluations per pass; two-evaluation rules get half as many steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Data scale of the analytic setting used for the DDIM rows.
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EditArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Source class; defaults to the image's class.
    #[arg(long)]
    pub source: Option<String>,
    /// Target class; defaults to the next colour of the source.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// none, delayed, direct or fusion.
    #[arg(long)]
    pub baseline: Option<String>,
    /// absolute, signed, or a constant in [0, 1].
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConvergeArgs {
    /// euler, heun or ddim.
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Time of the exact state the single steps start from.
    #[arg(long)]
    pub t: Option<f64>,
    /// Smallest step; accepts 2^k.
    #[arg(long)]
    pub dt_min: Option<Pow2Float>,
    /// Largest step; accepts 2^k.
    #[arg(long)]
    pub dt_max: Option<Pow2Float>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fail when the predictor-corrector slope is below this.
    #[arg(long)]
    pub min_slope: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Comma-separated delay rates.
    #[arg(long)]
    pub alphas: Option<FloatList>,
    /// Comma-separated guidance strengths.
    #[arg(long)]
    pub omegas: Option<FloatList>,
    /// Guidance strength whose α trend is checked.
    #[arg(long)]
    pub gate_omega: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory holding earlier outputs.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let r = Resolver::new(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => commands::train::train(a, r),
        Command::Sample(a) => commands::train::sample(a, r),
        Command::Invert(a) => commands::train::invert(a, r),
        Command::Reconstruct(a) => commands::recon::reconstruct(a, r),
        Command::Edit(a) => commands::edit::edit(a, r),
        Command::Converge(a) => commands::converge::converge(a, r),
        Command::Ablate(a) => commands::edit::ablate(a, r),
        Command::Report(a) => commands::report::report(a, r),
    }
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
    let pool = flowinv_core::experiments::thread_pool();
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
