//! Sweep cells, the deterministic seed schedule, and the sweep runner.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;

use issc_core::checkpoint;
use issc_core::datamodel::{append_records, compression_ratio, Codec, ExperimentRecord, Modulation, System};
use issc_core::datasets::{Dataset, Split};
use issc_core::metrics::ConfusionMatrix;
use issc_core::model::{ChannelState, Encoded, IsscModel};
use issc_core::seeds::{derive, tag};
use issc_core::train::{encode_dataset, evaluate_encoded};
use issc_phy::baseline::{accumulate_baseline, baseline_segment, BaselineChain, BaselineConfig};
use issc_phy::source::{RawImage, SourceEncoded};

use crate::config::{usage, Axis, RunConfig, SweepSpec, SweepSystem};

const EVAL_BATCH: usize = 8;

/// One plotted series: a system with its codec and modulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entry {
    pub system: System,
    pub codec: Codec,
    pub modulation: Modulation,
}

impl Entry {
    pub const ISSC: Entry = Entry { system: System::Issc, codec: Codec::None, modulation: Modulation::None };

    pub fn baseline(codec: Codec, modulation: Modulation) -> Self {
        Entry { system: System::Baseline, codec, modulation }
    }

    pub fn of(record: &ExperimentRecord) -> Self {
        Entry { system: record.system, codec: record.codec, modulation: record.modulation }
    }

    pub fn label(&self) -> String {
        match self.system {
            System::Issc => "issc".into(),
            System::Baseline => format!("baseline-{}-{}", self.codec, self.modulation),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub entry: Entry,
    pub value: f64,
    pub repeat: usize,
    /// Which of the value's ISSC checkpoints (always 0 otherwise).
    pub slot: usize,
}

/// Per-cell seed from (system, axis value, repeat, checkpoint slot); adding
/// repeats or values never changes the seeds of existing cells.
pub fn cell_seed(master: u64, cell: &Cell) -> u64 {
    derive(master, &[tag(&cell.entry.label()), cell.value.to_bits(), cell.repeat as u64, cell.slot as u64])
}

pub fn entries(spec: &SweepSpec) -> Vec<Entry> {
    let mut out = Vec::new();
    for s in &spec.systems {
        match s {
            SweepSystem::Issc => out.push(Entry::ISSC),
            SweepSystem::BaselineJpeg => out.extend(spec.modulations.iter().map(|&m| Entry::baseline(Codec::Jpeg, m))),
            SweepSystem::BaselinePng => out.extend(spec.modulations.iter().map(|&m| Entry::baseline(Codec::Png, m))),
        }
    }
    out.dedup();
    out
}

struct IsscPrepared {
    model: IsscModel<f32>,
    encoded: Vec<Encoded<f32>>,
}

struct BaselinePrepared {
    chain: BaselineChain,
    sources: Vec<SourceEncoded>,
}

/// Everything a cell needs, loaded and validated before any evaluation.
pub struct SweepContext {
    pub spec: SweepSpec,
    pub master: u64,
    pub test: Dataset,
    issc: HashMap<(u64, usize), IsscPrepared>,
    baseline: HashMap<(Entry, u64), BaselinePrepared>,
    segmenter: Option<IsscModel<f32>>,
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<IsscModel<f32>> {
    if !path.is_file() {
        anyhow::bail!("checkpoint {} does not exist", path.display());
    }
    let (model, _) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

pub fn raw_image(s: &issc_core::datasets::Sample) -> RawImage {
    RawImage { width: s.width, height: s.height, rgb: s.image.clone() }
}

impl SweepContext {
    /// Loads the test subset, every checkpoint and every source encoding.
    /// Missing checkpoints fail here, before any cell runs.
    pub fn prepare(cfg: &RunConfig) -> anyhow::Result<Self> {
        let spec = cfg.sweep.clone();
        spec.validate()?;
        let entries = entries(&spec);
        let has_issc = entries.contains(&Entry::ISSC);
        let has_baseline = entries.iter().any(|e| e.system == System::Baseline);

        let mut issc_paths: Vec<((u64, usize), PathBuf)> = Vec::new();
        if has_issc {
            match spec.axis {
                Axis::SnrDb => {
                    let p = spec.checkpoint.clone().ok_or_else(|| usage!("sweep.checkpoint is required for issc"))?;
                    issc_paths.push(((0, 0), p));
                }
                Axis::CompressionRatio => {
                    for &v in &spec.values {
                        let list = spec
                            .checkpoints_for(v)
                            .filter(|l| !l.is_empty())
                            .ok_or_else(|| usage!("sweep.checkpoints has no entry for ratio {v}"))?;
                        for (slot, p) in list.iter().enumerate() {
                            issc_paths.push(((v.to_bits(), slot), p.clone()));
                        }
                    }
                }
            }
        }
        let seg_path = if has_baseline {
            Some(
                spec.segmenter
                    .clone()
                    .or_else(|| spec.checkpoint.clone())
                    .ok_or_else(|| usage!("sweep.segmenter is required for baseline entries"))?,
            )
        } else {
            None
        };
        for p in issc_paths.iter().map(|(_, p)| p).chain(seg_path.iter()) {
            if !p.is_file() {
                anyhow::bail!("checkpoint {} does not exist", p.display());
            }
        }

        let mut test = cfg.data.load(&cfg.model, Split::Test)?;
        if let Some(n) = spec.eval_images {
            test.samples.truncate(n);
        }

        let mut issc = HashMap::new();
        for (key, path) in issc_paths {
            let model = load_checkpoint(&path)?;
            if spec.axis == Axis::CompressionRatio {
                let r = compression_ratio(&model.config)?;
                let want = f64::from_bits(key.0);
                if (r - want).abs() > 1e-9 {
                    anyhow::bail!("{} has compression ratio {r}, listed under {want}", path.display());
                }
            }
            let encoded = encode_dataset(&model, &test, EVAL_BATCH)?;
            issc.insert(key, IsscPrepared { model, encoded });
        }

        let segmenter = seg_path.as_deref().map(load_checkpoint).transpose()?;
        if let Some(s) = &segmenter {
            if s.config.n_cls != test.n_cls {
                anyhow::bail!("segmenter has {} classes, dataset {}", s.config.n_cls, test.n_cls);
            }
        }

        let mut baseline = HashMap::new();
        let images: Vec<RawImage> = test.samples.iter().map(raw_image).collect();
        for e in entries.iter().filter(|e| e.system == System::Baseline) {
            let ratios: Vec<f64> = match spec.axis {
                Axis::SnrDb => vec![cfg.baseline.target_ratio],
                Axis::CompressionRatio => spec.values.clone(),
            };
            for r in ratios {
                let chain = BaselineChain::new(BaselineConfig {
                    codec: e.codec,
                    modulation: e.modulation,
                    target_ratio: r,
                    ..cfg.baseline.clone()
                })?;
                let sources = images.iter().map(|img| chain.source(img)).collect::<issc_core::Result<Vec<_>>>()?;
                baseline.insert((*e, r.to_bits()), BaselinePrepared { chain, sources });
            }
        }
        Ok(SweepContext { spec, master: cfg.seed, test, issc, baseline, segmenter })
    }

    /// Every cell in output order: entry, then value, then slot, then repeat.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for entry in entries(&self.spec) {
            for &value in &self.spec.values {
                let slots = match (entry.system, self.spec.axis) {
                    (System::Issc, Axis::CompressionRatio) => self.spec.checkpoints_for(value).map_or(0, |l| l.len()),
                    _ => 1,
                };
                for slot in 0..slots {
                    for repeat in 0..self.spec.repeats {
                        out.push(Cell { entry, value, repeat, slot });
                    }
                }
            }
        }
        out
    }

    fn snr_and_ratio_key(&self, cell: &Cell, baseline_ratio: f64) -> (f64, u64) {
        match self.spec.axis {
            Axis::SnrDb => (cell.value, baseline_ratio.to_bits()),
            Axis::CompressionRatio => (self.spec.snr_db, cell.value.to_bits()),
        }
    }

    pub fn eval_cell(&self, cell: &Cell) -> anyhow::Result<ExperimentRecord> {
        let seed = cell_seed(self.master, cell);
        let e = cell.entry;
        let (snr_db, ratio, miou) = match e.system {
            System::Issc => {
                let key = match self.spec.axis {
                    Axis::SnrDb => (0, 0),
                    Axis::CompressionRatio => (cell.value.to_bits(), cell.slot),
                };
                let p = self.issc.get(&key).context("cell has no prepared checkpoint")?;
                let (snr_db, _) = self.snr_and_ratio_key(cell, 0.0);
                let cm = evaluate_encoded(&p.model, &self.test, &p.encoded, ChannelState::Awgn { snr_db, seed }, EVAL_BATCH)?;
                (snr_db, compression_ratio(&p.model.config)?, cm.miou()?)
            }
            System::Baseline => {
                let any_ratio = self
                    .baseline
                    .keys()
                    .find(|(be, _)| *be == e)
                    .map(|(_, r)| f64::from_bits(*r))
                    .context("cell has no prepared baseline")?;
                let (snr_db, key) = self.snr_and_ratio_key(cell, any_ratio);
                let p = self.baseline.get(&(e, key)).context("cell has no prepared baseline")?;
                let seg = self.segmenter.as_ref().context("baseline cells need a segmenter")?;
                let cm = baseline_confusion(&p.chain, &p.sources, &self.test, seg, snr_db, seed)?;
                let ratio = p.sources.iter().map(|s| s.ratio()).sum::<f64>() / p.sources.len() as f64;
                (snr_db, ratio, cm.miou()?)
            }
        };
        Ok(ExperimentRecord { system: e.system, codec: e.codec, modulation: e.modulation, snr_db, ratio, seed, miou })
    }

    /// Evaluates `cells` on a pool of `workers` threads, in input order.
    pub fn eval_cells(&self, cells: &[Cell], workers: usize) -> anyhow::Result<Vec<ExperimentRecord>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
        pool.install(|| cells.par_iter().map(|c| self.eval_cell(c)).collect())
    }
}

/// Baseline transmissions of every image at one SNR, segmented and scored;
/// image `i` uses noise seed `derive(seed, [i])`.
pub fn baseline_confusion(
    chain: &BaselineChain,
    sources: &[SourceEncoded],
    ds: &Dataset,
    segmenter: &IsscModel<f32>,
    snr_db: f64,
    seed: u64,
) -> anyhow::Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(ds.n_cls);
    for (i, (src, sample)) in sources.iter().zip(&ds.samples).enumerate() {
        let rec = chain.transmit_source(src, snr_db, derive(seed, &[i as u64]));
        let pred = baseline_segment(&rec.output, segmenter)?;
        accumulate_baseline(&mut cm, pred.as_ref(), &sample.seg_mask())?;
    }
    Ok(cm)
}

/// Runs every cell, appends the rows to `<out>/results.csv` through a single
/// writer, and draws `<out>/sweep.svg` from the file.
pub fn run_sweep(cfg: &RunConfig, out: &Path, workers: usize) -> anyhow::Result<Vec<ExperimentRecord>> {
    let ctx = SweepContext::prepare(cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("results.csv");
    let cells = ctx.cells();
    let mut records = Vec::with_capacity(cells.len());
    // Chunks keep partial results on disk during long sweeps.
    for chunk in cells.chunks(workers.max(1) * 4) {
        let rows = ctx.eval_cells(chunk, workers)?;
        append_records(&csv_path, &rows)?;
        for r in &rows {
            log::info!("{} value {} seed {:016x}: mIoU {:.4}", Entry::of(r).label(), axis_value(cfg.sweep.axis, r), r.seed, r.miou);
        }
        records.extend(rows);
    }
    let all = issc_core::datamodel::read_records(&csv_path)?;
    crate::plot::plot_sweep(&all, cfg.sweep.axis, &out.join("sweep.svg"))?;
    Ok(records)
}

pub fn axis_value(axis: Axis, r: &ExperimentRecord) -> f64 {
    match axis {
        Axis::SnrDb => r.snr_db,
        Axis::CompressionRatio => r.ratio,
    }
}

/// Re-runs the cell that produced `record` and returns the fresh row.
pub fn reproduce(ctx: &SweepContext, record: &ExperimentRecord) -> anyhow::Result<ExperimentRecord> {
    let cell = ctx
        .cells()
        .into_iter()
        .find(|c| Entry::of(record) == c.entry && cell_seed(ctx.master, c) == record.seed)
        .ok_or_else(|| anyhow::anyhow!("no cell of this configuration has seed {:016x}", record.seed))?;
    ctx.eval_cell(&cell)
}
