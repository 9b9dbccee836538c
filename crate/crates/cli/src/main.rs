use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eqlab::commands::{self, EvalInputs, Source};
use eqlab::config::{ExperimentConfig, Overrides};
use eqlab::CliResult;
use eqsim::losses::EqSimMode;

#[derive(Parser)]
#[command(name = "eqlab", version, about = "Train and evaluate dual encoders with equivariant similarity regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    run: RunArgs,
    /// off | hybrid | v1_all | v2_all | v2_close_only
    #[arg(long = "eqsim-mode")]
    eqsim_mode: Option<EqSimMode>,
    /// Checkpoint to evaluate (default: the run's checkpoint for the mode).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Eval set to use (default: the run's eval_set.jsonl).
    #[arg(long = "eval-set")]
    eval_set: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Ag,
    Gebc,
    Youcook2,
}

#[derive(Subcommand)]
enum Command {
    /// Write the eval set and the train-stream spec.
    Generate(RunArgs),
    /// Train and write a checkpoint plus per-step loss history.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "eqsim-mode")]
        eqsim_mode: Option<EqSimMode>,
    },
    /// Evaluate a checkpoint on an eval set and write a report.
    Eval(ModelArgs),
    /// Write equivariance-score histograms for a checkpoint.
    Eqscore {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Filter annotation records into a candidate manifest.
    Benchbuild {
        #[arg(long, value_enum)]
        source: SourceArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Frame ids the face filter rejects (cooking source only).
        #[arg(long = "reject-frames", value_delimiter = ',')]
        reject_frames: Vec<u64>,
    },
}

fn load(run: &RunArgs, mode: Option<EqSimMode>) -> CliResult<ExperimentConfig> {
    let overrides = Overrides {
        seed: run.seed,
        mode,
        out: run.out.clone(),
    };
    ExperimentConfig::load(&run.config, &overrides)
}

fn inputs(m: &ModelArgs) -> EvalInputs {
    EvalInputs {
        checkpoint: m.checkpoint.clone(),
        eval_set: m.eval_set.clone(),
    }
}

fn dispatch(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Generate(run) => commands::generate(&load(&run, None)?),
        Command::Train { run, eqsim_mode } => commands::train(&load(&run, eqsim_mode)?),
        Command::Eval(m) => commands::eval(&load(&m.run, m.eqsim_mode)?, &inputs(&m)),
        Command::Eqscore { model, bins } => commands::eqscore(&load(&model.run, model.eqsim_mode)?, &inputs(&model), bins),
        Command::Benchbuild {
            source,
            input,
            out,
            reject_frames,
        } => {
            let source = match source {
                SourceArg::Ag => Source::Ag,
                SourceArg::Gebc => Source::Gebc,
                SourceArg::Youcook2 => Source::Youcook2,
            };
            commands::benchbuild(source, &input, &out, &reject_frames)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
