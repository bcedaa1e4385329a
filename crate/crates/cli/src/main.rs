use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stn_core::dataset::SplitRole;
use stn_core::models::ModelKind;
use stn_core::train::{self, Scale, TrainConfig};

#[derive(Parser)]
#[command(name = "lstm-stn", version, about = "LSTM-driven spatial transformer on cluttered MNIST sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/val/test canvases from MNIST IDX files.
    GenData {
        #[arg(long, default_value = "data/mnist")]
        mnist_dir: PathBuf,
        #[arg(long, default_value = "data/sqmn")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model; writes metrics.csv, best.ckpt and final.ckpt.
    Train(TrainArgs),
    /// Per-digit error of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/sqmn")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Write the canvas and the glimpses of one example as PGM images.
    DumpGlimpses {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/sqmn")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "glimpses")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::LstmStnCnn)]
    model: ModelArg,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=4))]
    d: u8,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    /// Defaults to 64 at desk scale and 256 at full scale.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/sqmn")]
    data_dir: PathBuf,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    /// Write wall_seconds as 0 so repeated runs give identical metrics.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    LstmStnCnn,
    FfnStnCnn,
    Cnn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::LstmStnCnn => ModelKind::LstmStnCnn,
            ModelArg::FfnStnCnn => ModelKind::FfnStnCnn,
            ModelArg::Cnn => ModelKind::Cnn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitRole {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitRole::Train,
            SplitArg::Val => SplitRole::Val,
            SplitArg::Test => SplitRole::Test,
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            mnist_dir,
            data_dir,
            scale,
            seed,
        } => {
            let files = train::cmd_gen_data(&mnist_dir, &data_dir, scale.into(), seed)
                .with_context(|| format!("generating data from {}", mnist_dir.display()))?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Train(a) => {
            let scale: Scale = a.scale.into();
            let cfg = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size.unwrap_or(scale.batch_size()),
                lr: a.lr,
                momentum: a.momentum,
                seed: a.seed,
                deterministic: a.deterministic,
                ..TrainConfig::new(a.model.into(), a.d as usize, scale)
            };
            let started = std::time::Instant::now();
            let out = train::cmd_train(&cfg, &a.data_dir, &a.out_dir).context("training failed")?;
            log::info!("training took {:.1}s", started.elapsed().as_secs_f64());
            println!("best checkpoint: {}", out.best_checkpoint.display());
            println!("best val error: {}", train::format_percent(out.best_val_error));
            println!("test error: {}", train::format_percent(out.test_error));
        }
        Command::Eval {
            checkpoint,
            data_dir,
            split,
        } => {
            let err = train::cmd_eval(&checkpoint, &data_dir, split.into())
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{}", train::format_percent(err));
        }
        Command::DumpGlimpses {
            checkpoint,
            data_dir,
            split,
            index,
            out_dir,
        } => {
            let files = train::cmd_dump_glimpses(&checkpoint, &data_dir, split.into(), index, &out_dir)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
