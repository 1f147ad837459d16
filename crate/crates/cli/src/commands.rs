//! Subcommand bodies, callable without going through argument parsing.

use std::path::{Path, PathBuf};

use anyhow::Context;

use issc_core::checkpoint;
use issc_core::datamodel::{read_records, ExperimentRecord};
use issc_core::datasets::{materialize, Split};
use issc_core::metrics::ConfusionMatrix;
use issc_core::model::{ChannelState, IsscModel};
use issc_core::seeds::{derive, tag};
use issc_core::train::{evaluate, train, TrainOutcome};

use crate::config::{usage, RunConfig};
use crate::gallery::{cliff_gallery, GalleryRow};
use crate::sweep::{load_checkpoint, reproduce, SweepContext};

const EVAL_BATCH: usize = 8;

pub fn init_seed(cfg: &RunConfig) -> u64 {
    derive(cfg.seed, &[tag("init")])
}

/// Trains from a fresh initialization. Writes the history CSVs,
/// `model.safetensors` (tagged with its noiseless training-set mIoU) and
/// the effective `run_config.toml` under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<(IsscModel<f32>, TrainOutcome, f64)> {
    let train_set = cfg.data.load(&cfg.model, Split::Train)?;
    let test_set = cfg.data.load(&cfg.model, Split::Test)?;
    let mut model = IsscModel::<f32>::new(&cfg.model, init_seed(cfg))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("run_config.toml"), toml::to_string(cfg)?).context("writing run_config.toml")?;
    let outcome = train(&mut model, &train_set, Some(&test_set), &cfg.train, Some(out))?;
    let train_miou = evaluate(&model, &train_set, ChannelState::Noiseless, EVAL_BATCH)?.miou()?;
    checkpoint::save(
        &model,
        &out.join("model.safetensors"),
        &[("step", cfg.train.steps.to_string()), ("train_miou", train_miou.to_string())],
    )?;
    Ok((model, outcome, train_miou))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalChannel {
    Noiseless,
    Awgn(f64),
}

/// Scores a checkpoint on a dataset split and writes `<out>/eval_report.csv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    channel: EvalChannel,
    split: Split,
    out: &Path,
) -> anyhow::Result<ConfusionMatrix> {
    let model = load_checkpoint(checkpoint_path)?;
    let ds = cfg.data.load(&model.config, split)?;
    if ds.n_cls != model.config.n_cls {
        anyhow::bail!("checkpoint predicts {} classes but the dataset has {}", model.config.n_cls, ds.n_cls);
    }
    let state = match channel {
        EvalChannel::Noiseless => ChannelState::Noiseless,
        EvalChannel::Awgn(snr_db) => ChannelState::Awgn { snr_db, seed: derive(cfg.seed, &[tag("eval"), snr_db.to_bits()]) },
    };
    let cm = evaluate(&model, &ds, state, EVAL_BATCH)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cm.write_report(&out.join("eval_report.csv"))?;
    Ok(cm)
}

/// Writes the configured train and test splits as PNG pairs under
/// `out/images/<split>` and `out/masks/<split>`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<(usize, usize)> {
    let train = cfg.data.load(&cfg.model, Split::Train)?;
    let test = cfg.data.load(&cfg.model, Split::Test)?;
    materialize(&train, out, Split::Train)?;
    materialize(&test, out, Split::Test)?;
    Ok((train.len(), test.len()))
}

pub fn cmd_cliff_gallery(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    segmenter_path: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Vec<GalleryRow>> {
    let ckpt = checkpoint_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.sweep.checkpoint.clone())
        .ok_or_else(|| usage!("cliff-gallery needs --checkpoint or sweep.checkpoint"))?;
    let seg: PathBuf = segmenter_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.sweep.segmenter.clone())
        .unwrap_or_else(|| ckpt.clone());
    let model = load_checkpoint(&ckpt)?;
    let segmenter = load_checkpoint(&seg)?;
    let test = cfg.data.load(&model.config, Split::Test)?;
    let idx = cfg.gallery.image_index;
    let sample = test
        .samples
        .get(idx)
        .ok_or_else(|| usage!("image index {idx} outside the {} test images", test.len()))?;
    cliff_gallery(&model, &segmenter, &cfg.baseline, sample, &cfg.gallery.snrs, cfg.seed, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub row: usize,
    pub stored: ExperimentRecord,
    pub fresh: ExperimentRecord,
}

impl Verification {
    pub fn matches(&self) -> bool {
        self.stored == self.fresh
    }
}

/// Re-runs one CSV row (0-based among data rows; sampled from the seed when
/// `row` is `None`) from the configuration and its seed schedule alone.
pub fn cmd_verify_row(cfg: &RunConfig, csv_path: &Path, row: Option<usize>) -> anyhow::Result<Verification> {
    let records = read_records(csv_path)?;
    if records.is_empty() {
        anyhow::bail!("{} has no rows", csv_path.display());
    }
    let row = row.unwrap_or_else(|| (derive(cfg.seed, &[tag("verify")]) % records.len() as u64) as usize);
    let stored = records
        .get(row)
        .cloned()
        .ok_or_else(|| usage!("row {row} outside the {} rows of {}", records.len(), csv_path.display()))?;
    let ctx = SweepContext::prepare(cfg)?;
    let fresh = reproduce(&ctx, &stored)?;
    Ok(Verification { row, stored, fresh })
}
