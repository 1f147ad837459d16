//! End-to-end training under a random channel SNR, and dataset evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::channel::NoiseDraw;
use crate::checkpoint;
use crate::datamodel::SegMask;
use crate::datasets::{stack_samples, BatchMode, Batcher, Dataset, Sample};
use crate::error::{config_err, Error, Result};
use crate::loss::{loss_and_grad, Ohem};
use crate::metrics::ConfusionMatrix;
use crate::model::{ChannelState, Encoded, IsscModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::Parameters;
use crate::seeds::{derive, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Per-batch SNR is drawn uniformly from this range (dB).
    pub snr_range_db: (f64, f64),
    pub ohem_threshold: f64,
    /// `min_kept` as a fraction of the batch's labelled pixels.
    pub ohem_min_kept_fraction: f64,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_size: (usize, usize),
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on the held-out set every this many steps (0: never).
    pub eval_every: usize,
    pub eval_snr_db: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            snr_range_db: (1.0, 20.0),
            ohem_threshold: 0.7,
            ohem_min_kept_fraction: 0.05,
            optimizer: AdamConfig::default(),
            steps: 3000,
            batch_size: 8,
            crop_size: (64, 64),
            seed: 0,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
            eval_every: 0,
            eval_snr_db: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range_db;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(config_err!("snr_range_db needs finite low <= high, got ({lo}, {hi})"));
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold < 1.0) {
            return Err(config_err!("ohem_threshold must lie in (0, 1), got {}", self.ohem_threshold));
        }
        if !(self.ohem_min_kept_fraction > 0.0 && self.ohem_min_kept_fraction <= 1.0) {
            return Err(config_err!("ohem_min_kept_fraction must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        self.optimizer.validate()
    }
}

/// The SNR used at `step`.
pub fn sample_snr(cfg: &TrainConfig, step: usize) -> f64 {
    let (lo, hi) = cfg.snr_range_db;
    if lo == hi {
        return lo;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[tag("snr"), step as u64]));
    rng.random_range(lo..hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub snr_db: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub evals: Vec<(usize, f64)>,
}

impl TrainOutcome {
    /// Mean loss over history rows `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let rows = &self.history[from.min(self.history.len())..to.min(self.history.len())];
        rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64
    }
}

struct HistoryFiles {
    loss: BufWriter<File>,
    eval: BufWriter<File>,
    dir: PathBuf,
}

impl HistoryFiles {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(w)
        };
        Ok(HistoryFiles {
            loss: open("history.csv", "step,loss,snr_db,lr")?,
            eval: open("eval_history.csv", "step,miou")?,
            dir: dir.to_path_buf(),
        })
    }

    fn io<T>(&self, r: std::io::Result<T>) -> Result<T> {
        r.map_err(|e| Error::io(&self.dir, e))
    }
}

/// One augmented training batch for `step`; each item's augmentation seed
/// depends only on (master seed, step, slot).
pub fn training_batch(
    ds: &Dataset,
    batcher: &Batcher,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Tensor<f32>, SegMask)> {
    let idx = batcher.at_step(step);
    let items = idx
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let seed = derive(cfg.seed, &[tag("augment"), step as u64, slot as u64]);
            augment(&ds.samples[i], cfg.crop_size, &cfg.augment, seed)
        })
        .collect::<Result<Vec<Sample>>>()?;
    stack_samples(&items.iter().collect::<Vec<_>>())
}

/// Trains `model` in place. With `out`, writes `history.csv`,
/// `eval_history.csv`, periodic `checkpoints/step_<n>.safetensors` and
/// `model.safetensors`.
pub fn train(
    model: &mut IsscModel<f32>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.n_cls != model.config.n_cls {
        return Err(config_err!("dataset has {} classes, model {}", train_set.n_cls, model.config.n_cls));
    }
    if cfg.crop_size != (model.config.height, model.config.width) {
        return Err(config_err!(
            "crop {:?} must match the model input {}x{}",
            cfg.crop_size,
            model.config.height,
            model.config.width
        ));
    }
    let batcher = Batcher::new(train_set.len(), cfg.batch_size, derive(cfg.seed, &[tag("shuffle")]), BatchMode::Train)?;
    let mut adam = Adam::new(cfg.optimizer, &*model)?;
    let mut files = out.map(HistoryFiles::create).transpose()?;
    let mut outcome = TrainOutcome::default();
    let (h, w) = (model.config.height / 16, model.config.width / 16);

    for step in 0..cfg.steps {
        let (image, labels) = training_batch(train_set, &batcher, cfg, step)?;
        let snr_db = sample_snr(cfg, step);
        let noise_seed = derive(cfg.seed, &[tag("noise"), step as u64]);
        let noise = NoiseDraw::<f32>::for_snr(&[cfg.batch_size, h, w, model.config.k], snr_db, noise_seed)?.realization;
        let (logits, cache) = model.forward_train(&image, Some(&noise))?;
        let valid = labels.data.iter().filter(|&&l| l != labels.ignore_index).count();
        let min_kept = ((cfg.ohem_min_kept_fraction * valid as f64).ceil() as usize).max(1);
        let ohem = Ohem { threshold: cfg.ohem_threshold, min_kept };
        let lo = loss_and_grad(&logits, &labels, Some(ohem))?;
        let loss = lo.loss as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, snr_db, detail: format!("loss is {loss}") });
        }
        let grad = model.backward(&cache, &lo.dlogits)?;
        if !params_finite(&grad) {
            return Err(Error::Diverged { step, snr_db, detail: "non-finite gradient".into() });
        }
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        adam.step(model, &grad, lr);

        let row = HistoryRow { step, loss, snr_db, lr };
        if let Some(f) = files.as_mut() {
            let r = writeln!(f.loss, "{},{},{},{}", row.step, row.loss, row.snr_db, row.lr);
            f.io(r)?;
        }
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.4} snr {snr_db:.2} dB lr {lr:.2e}");
        }
        outcome.history.push(row);

        let done = step + 1;
        if let (Some(ev), true) = (eval_set, cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let cm = evaluate(model, ev, ChannelState::Awgn { snr_db: cfg.eval_snr_db, seed: cfg.seed }, cfg.batch_size)?;
            let miou = cm.miou()?;
            log::info!("step {done} eval mIoU {miou:.4} at {} dB", cfg.eval_snr_db);
            if let Some(f) = files.as_mut() {
                let r = writeln!(f.eval, "{done},{miou}");
                f.io(r)?;
            }
            outcome.evals.push((done, miou));
        }
        if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            let p = dir.join("checkpoints").join(format!("step_{done}.safetensors"));
            checkpoint::save(model, &p, &[("step", done.to_string())])?;
        }
    }
    if let Some(mut f) = files {
        let r = f.loss.flush().and_then(|_| f.eval.flush());
        f.io(r)?;
    }
    if let Some(dir) = out {
        checkpoint::save(model, &dir.join("model.safetensors"), &[("step", cfg.steps.to_string())])?;
    }
    Ok(outcome)
}

fn params_finite(model: &IsscModel<f32>) -> bool {
    let mut ok = true;
    model.visit("", &mut |_, t| ok &= t.all_finite());
    ok
}

/// Per-batch channel state: batch `b` under `channel` draws its own noise.
fn batch_channel(channel: ChannelState, b: usize) -> ChannelState {
    match channel {
        ChannelState::Noiseless => ChannelState::Noiseless,
        ChannelState::Awgn { snr_db, seed } => ChannelState::Awgn { snr_db, seed: derive(seed, &[tag("eval"), b as u64]) },
    }
}

/// Confusion matrix of the full pipeline over a dataset.
pub fn evaluate(model: &IsscModel<f32>, ds: &Dataset, channel: ChannelState, batch: usize) -> Result<ConfusionMatrix> {
    let encoded = encode_dataset(model, ds, batch)?;
    evaluate_encoded(model, ds, &encoded, channel, batch)
}

/// Transmitter outputs for every eval batch, reusable across channel draws.
pub fn encode_dataset(model: &IsscModel<f32>, ds: &Dataset, batch: usize) -> Result<Vec<Encoded<f32>>> {
    if ds.n_cls != model.config.n_cls {
        return Err(config_err!("dataset has {} classes, model {}", ds.n_cls, model.config.n_cls));
    }
    let batcher = Batcher::new(ds.len(), batch, 0, BatchMode::Eval)?;
    batcher.epoch(0).iter().map(|idx| model.encode(&ds.batch::<f32>(idx)?.0)).collect()
}

pub fn evaluate_encoded(
    model: &IsscModel<f32>,
    ds: &Dataset,
    encoded: &[Encoded<f32>],
    channel: ChannelState,
    batch: usize,
) -> Result<ConfusionMatrix> {
    let batcher = Batcher::new(ds.len(), batch, 0, BatchMode::Eval)?;
    let mut cm = ConfusionMatrix::new(ds.n_cls);
    for (b, (idx, enc)) in batcher.epoch(0).iter().zip(encoded).enumerate() {
        let probs = model.decode(&model.receive(enc, batch_channel(channel, b))?)?;
        let pred = crate::decoder::argmax_mask(&probs)?;
        let (_, gt) = ds.batch::<f32>(idx)?;
        cm.accumulate(&pred, &gt)?;
    }
    Ok(cm)
}

/// Constant predictor that labels every pixel with `class`.
pub fn constant_predictor_miou(ds: &Dataset, class: u8) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(ds.n_cls);
    for s in &ds.samples {
        let gt = s.seg_mask();
        let pred = SegMask::filled(1, s.height, s.width, class);
        cm.accumulate(&pred, &gt)?;
    }
    cm.miou()
}
