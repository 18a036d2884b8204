use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tinr_cli::commands::{self, AnalyzeCommand, InferArgs, TrainOptions};
use tinr_cli::{Checkpoint, CliError, Config, Result};
use tinr_core::data::Split;
use tinr_core::Precision;

#[derive(Parser)]
#[command(name = "tinr", version, about = "Transformer hypernetworks for implicit neural representations")]
struct Cli {
    /// Overrides the training seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rendering, evaluation and data generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Arithmetic width. Defaults to f32 for new runs and to the stored
    /// precision for checkpoints.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a hypernetwork from a TOML config.
    Train {
        config: Option<PathBuf>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate an INR from observations and write reconstructions.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (image checkpoints); repeatable.
        #[arg(long)]
        input: Vec<PathBuf>,
        /// Scene index in the checkpoint's dataset (view-synthesis checkpoints).
        #[arg(long)]
        scene: Option<usize>,
        /// Input view indices, comma separated.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        /// Held-out view indices to render, comma separated.
        #[arg(long, value_delimiter = ',')]
        novel: Vec<usize>,
        /// Test-time optimization steps on the inputs after generation.
        #[arg(long, default_value_t = 0)]
        tto_steps: usize,
        #[arg(long)]
        tto_lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reports and artifacts from a trained checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
    #[command(subcommand)]
    what: AnalyzeWhat,
}

#[derive(Subcommand)]
enum AnalyzeWhat {
    /// Per-item PSNR on a split.
    Psnr {
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// TTO steps for scene reports; defaults to the config's.
        #[arg(long)]
        tto_steps: Option<usize>,
    },
    /// Retrain with each group count and report test PSNR.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        groups: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Export attention masks of weight tokens over data tokens.
    Attn {
        /// Test-split image index.
        #[arg(long)]
        index: Option<usize>,
        /// Use this PNG instead of a dataset image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Token indices within each layer; all when empty.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<usize>,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
    }
}

fn stored_precision(path: &Path) -> Result<Precision> {
    Ok(Checkpoint::load(path)?.header.precision)
}

macro_rules! dispatch {
    ($precision:expr, $f:ident ( $($arg:expr),* )) => {
        match $precision {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train {
            config,
            resume,
            max_steps,
            out_dir,
        } => {
            let cfg = match (&config, &resume) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Usage("give either a config or --resume, not both".into()));
                }
                (Some(path), None) => Some(Config::load(path)?),
                (None, _) => None,
            };
            let precision = match (cli.precision, &resume) {
                (Some(p), _) => p,
                (None, Some(path)) => stored_precision(path)?,
                (None, None) => Precision::F32,
            };
            let opts = TrainOptions {
                resume,
                max_steps,
                out_dir,
                seed: cli.seed,
            };
            let s = dispatch!(precision, train(cfg, &opts))?;
            println!("trained {} steps", s.steps);
            if let Some(l) = s.final_loss {
                println!("final batch loss {l:.6}");
            }
            match (s.test_psnr, s.test_baseline) {
                (Some(p), Some(b)) => println!("test PSNR {p:.3} dB (best constant colour {b:.3} dB)"),
                (Some(p), None) => println!("test novel-view PSNR {p:.3} dB"),
                _ => {}
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Infer {
            checkpoint,
            input,
            scene,
            views,
            novel,
            tto_steps,
            tto_lr,
            out,
        } => {
            let precision = match cli.precision {
                Some(p) => p,
                None => stored_precision(&checkpoint)?,
            };
            let args = InferArgs {
                checkpoint,
                inputs: input,
                scene,
                views,
                novel,
                tto_steps,
                tto_lr,
                out,
            };
            let report = dispatch!(precision, infer(&args))?;
            for (name, p) in &report.rows {
                println!("{name}: PSNR {p:.3} dB");
            }
        }
        Command::Analyze(a) => {
            let precision = match cli.precision {
                Some(p) => p,
                None => stored_precision(&a.checkpoint)?,
            };
            let cmd = match a.what {
                AnalyzeWhat::Psnr { split, tto_steps } => AnalyzeCommand::Psnr { split, tto_steps },
                AnalyzeWhat::Ablate { groups, steps } => AnalyzeCommand::Ablate {
                    groups,
                    steps,
                    seed: cli.seed,
                },
                AnalyzeWhat::Attn { index, image, tokens } => AnalyzeCommand::Attn { index, image, tokens },
            };
            let written = dispatch!(precision, analyze(&a.checkpoint, &cmd, &a.out))?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
