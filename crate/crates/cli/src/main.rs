mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Single-pass super-resolution with a frozen generative latent bank.
#[derive(Parser, Debug)]
#[command(name = "glean", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct Global {
    /// Seed for every random choice; overrides any seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded, replayable execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene corpus as PNGs plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of training scenes.
        #[arg(long)]
        count: usize,
        /// Number of validation scenes.
        #[arg(long, default_value_t = 0)]
        val_count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Pretrain the latent bank as a GAN on a corpus.
    PretrainBank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Train encoder and decoder around a pretrained, frozen bank.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Super-resolve one PNG or every PNG of a directory.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected model scale; refused if the checkpoint differs.
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Super-resolve by latent optimisation over the bank.
    Invert {
        /// Bank checkpoint, or a model checkpoint whose bank is used.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Multi)]
        mode: ModeArg,
        /// Initial Adam step size [default: 0.1, annealed to 0.05]
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a method on a corpus split.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Bank for the inversion method when no model is given.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        report: PathBuf,
        /// Scale for bicubic or bank-only inversion.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Score only the first N images of the split.
        #[arg(long)]
        count: Option<usize>,
        /// Inversion steps.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Round images to 8 bits before scoring.
        #[arg(long)]
        quantize: bool,
    },
    /// Train and score a grid of structural variants around one bank.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Directory for per-cell checkpoints and logs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Downsample a photo by the model's scale and restore it.
    Retouch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Single,
    Multi,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Glean,
    Inversion,
    Bicubic,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
