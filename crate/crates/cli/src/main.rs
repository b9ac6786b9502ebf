//! `ocnet`: synthetic data generation, encoder pretraining, episodic training,
//! evaluation, ablations and qualitative panels.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Few-shot segmentation with object-level correlation.
///
/// Every run resolves its settings in this order: built-in defaults, the config
/// stored in `--ckpt` (eval, viz), `--config`, subcommand flags, then `--set`.
/// The resolved key=value config is written as `config.txt` into the output dir.
#[derive(Parser, Debug)]
#[command(name = "ocnet", version)]
pub struct Cli {
    /// key=value config file; flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Worker threads. Defaults to all cores.
    #[arg(long, global = true, env = "OCNET_THREADS", value_name = "N")]
    pub threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic benchmark as `<out>/<class>/<id>.img.png` + `.mask.png`.
    GenData(GenDataArgs),
    /// Pretrain and freeze the encoder on the fold's base classes.
    Pretrain(PretrainArgs),
    /// Episodic training of one variant; writes checkpoints and metrics.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the fold's novel classes; writes results.csv.
    Eval(EvalArgs),
    /// Train and evaluate several variants over several seeds.
    Ablate(AblateArgs),
    /// Render qualitative panels for a few evaluation episodes.
    Viz(VizArgs),
}

/// Dataset selection shared by most subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset root in the folder layout. Without it, the synthetic set described
    /// by the `synth.*` keys is generated in memory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Cross-validation fold (0..4).
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of classes (multiple of 4, at least 8).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub images_per_class: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Support shots per episode.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// baseline, gomm_only, ccm_only, full, mean, cosine, fore, fore_back.
    #[arg(long)]
    pub variant: Option<String>,
    /// Pretrained encoder checkpoint; without it the encoder is pretrained first.
    #[arg(long, value_name = "CKPT")]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Training checkpoint; `.ckpt` is appended when the path does not exist.
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of evaluation episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Episode sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Training seeds 0..N per variant.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated variant names.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long, value_name = "CKPT")]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    /// Evaluation episodes per run.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of episodes to render.
    #[arg(long)]
    pub count: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; everything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
