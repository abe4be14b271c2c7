//! The `segflow` command line: data generation, training, fine-tuning,
//! evaluation and visualisation, each driven by one [`RunConfig`].

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{Ablation, DataPaths, EvalSettings, GenerateConfig, RunConfig, RUN_CONFIG_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] segflow_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use segflow_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => EXIT_USAGE,
            CliError::Core(E::Diverged { .. }) => EXIT_DIVERGED,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "segflow", version, about = "Joint video object segmentation and optical flow")]
pub struct Cli {
    /// TOML run configuration; flags and --set win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// `--set` may appear before and after the subcommand. A clap global would
/// let the later occurrences replace the earlier ones, so both levels carry
/// their own list and the two are joined in command-line order.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Override any config key, e.g. `--set train.lr_seg=1e-5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic moving-shapes corpus into `<out>/train` and `<out>/val`.
    GenData(GenDataArgs),
    /// Offline training; resumes from the last finished phase in `<out>`.
    Train(TrainArgs),
    /// Adapt a checkpoint to one sequence from its first-frame mask.
    Finetune(FinetuneArgs),
    /// Score a checkpoint (or stored predictions) on a dataset.
    Eval(EvalArgs),
    /// Render mask overlay and flow color images for one frame pair.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub train_sequences: Option<usize>,
    #[arg(long)]
    pub val_sequences: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Segmentation training root.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Flow training root (defaults to the segmentation root).
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub disable_fusion: bool,
    #[arg(long)]
    pub disable_offline: bool,
    #[arg(long)]
    pub disable_iterative: bool,
    #[arg(long)]
    pub disable_seg_augmentation: bool,
    #[arg(long)]
    pub disable_flow_augmentation: bool,
    /// Ignore finished phases in the output directory.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Offline checkpoint (default `<out>/model.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root holding the sequence.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sequence: String,
    /// First-frame mask (default: the sequence's first annotation).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub disable_online: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub flip_ensemble: bool,
    /// Fine-tune on each sequence's first mask before predicting it.
    #[arg(long)]
    pub online: bool,
    #[arg(long)]
    pub disable_online: bool,
    /// Score masks from `<dir>/<seq>/<frame>.png` instead of running a model.
    #[arg(long, value_name = "DIR")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Frame t.
    #[arg(long)]
    pub frame: PathBuf,
    /// Frame t+1.
    #[arg(long)]
    pub next: PathBuf,
    /// Opacity of the mask overlay.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

impl Cli {
    /// Every `--set`, in command-line order.
    pub fn all_overrides(&self) -> Vec<String> {
        let inner = match &self.command {
            Command::GenData(a) => &a.overrides,
            Command::Train(a) => &a.overrides,
            Command::Finetune(a) => &a.overrides,
            Command::Eval(a) => &a.overrides,
            Command::Viz(a) => &a.overrides,
        };
        self.overrides.set.iter().chain(&inner.set).cloned().collect()
    }
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_from_both_levels_are_kept_in_order() {
        let cli = Cli::try_parse_from(["segflow", "--set", "a=1", "--set", "b=2", "train", "--set", "a=3"]).unwrap();
        assert_eq!(cli.all_overrides(), ["a=1", "b=2", "a=3"]);
    }
}
