use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use issc_cli::commands::{cmd_cliff_gallery, cmd_eval, cmd_gen_data, cmd_train, cmd_verify_row, EvalChannel};
use issc_cli::config::{RunConfig, UsageError};
use issc_cli::sweep::run_sweep;
use issc_core::datasets::Split;

#[derive(Parser)]
#[command(name = "issc", version, about = "Semantic segmentation over noisy channels: experiments")]
struct Cli {
    /// TOML run configuration (toy defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and history.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-class IoU report of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Channel SNR in dB; noiseless when omitted.
        #[arg(long, allow_negative_numbers = true)]
        snr_db: Option<f64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Evaluate every (system, value, repeat) cell of the configured sweep.
    Sweep,
    /// Baseline reconstructions and both systems' masks for one image.
    CliffGallery {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        snrs: Option<Vec<f64>>,
        #[arg(long)]
        image_index: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as PNG files.
    GenData,
    /// Re-run one results row and compare.
    VerifyRow {
        #[arg(long)]
        csv: PathBuf,
        /// 0-based data row; sampled from the seed when omitted.
        #[arg(long)]
        row: Option<usize>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if cli.workers == 0 {
        return Err(UsageError("--workers must be at least 1".into()).into());
    }
    match cli.command {
        Command::Train { steps } => {
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            let (_, outcome, train_miou) = cmd_train(&cfg, &cli.out)?;
            let n = outcome.history.len();
            println!(
                "trained {n} steps: first-100 loss {:.4}, last-100 loss {:.4}, training-set mIoU {train_miou:.4}",
                outcome.mean_loss(0, 100),
                outcome.mean_loss(n.saturating_sub(100), n)
            );
        }
        Command::Eval { checkpoint, snr_db, split } => {
            let channel = snr_db.map_or(EvalChannel::Noiseless, EvalChannel::Awgn);
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let cm = cmd_eval(&cfg, &checkpoint, channel, split, &cli.out)?;
            let (miou, excluded) = cm.miou_with_excluded()?;
            println!("mIoU {miou:.6} ({excluded} classes excluded), {} pixels", cm.total());
        }
        Command::Sweep => {
            let rows = run_sweep(&cfg, &cli.out, cli.workers)?;
            println!("{} rows appended to {}", rows.len(), cli.out.join("results.csv").display());
        }
        Command::CliffGallery { snrs, image_index, checkpoint, segmenter } => {
            if let Some(s) = snrs {
                cfg.gallery.snrs = s;
            }
            if let Some(i) = image_index {
                cfg.gallery.image_index = i;
            }
            for r in cmd_cliff_gallery(&cfg, checkpoint.as_deref(), segmenter.as_deref(), &cli.out)? {
                let status = if r.decode_failure { "decode failure" } else { "decoded" };
                println!("{} dB: {status}, {} residual bit errors", r.snr_db, r.residual_bit_errors);
            }
        }
        Command::GenData => {
            let (tr, te) = cmd_gen_data(&cfg, &cli.out)?;
            println!("wrote {tr} training and {te} test pairs under {}", cli.out.display());
        }
        Command::VerifyRow { csv, row } => {
            let v = cmd_verify_row(&cfg, &csv, row)?;
            if !v.matches() {
                anyhow::bail!("row {} differs: stored {:?}, recomputed {:?}", v.row, v.stored, v.fresh);
            }
            println!("row {} reproduced: mIoU {}", v.row, v.fresh.miou);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<issc_core::Error>(), Some(issc_core::Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
