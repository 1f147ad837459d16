//! TOML run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use issc_core::datamodel::{Codec, Modulation, ModelConfig};
use issc_core::datasets::{generate_synthetic, load_layout, Dataset, Split, SyntheticSpec};
use issc_core::seeds::{derive, tag};
use issc_core::train::TrainConfig;
use issc_phy::baseline::BaselineConfig;

/// A bad invocation or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

macro_rules! usage {
    ($($arg:tt)*) => { anyhow::Error::new($crate::config::UsageError(format!($($arg)*))) };
}
pub(crate) use usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub sweep: SweepSpec,
    pub gallery: GalleryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::toy(),
            data: DataConfig::default(),
            train: TrainConfig { optimizer: toy_optimizer(), ..TrainConfig::default() },
            baseline: BaselineConfig::default(),
            sweep: SweepSpec::default(),
            gallery: GalleryConfig::default(),
        }
    }
}

/// Learning rate used for the 64×64 synthetic runs.
pub const TOY_LR: f64 = 2e-4;

fn toy_optimizer() -> issc_core::optim::AdamConfig {
    issc_core::optim::AdamConfig { lr: TOY_LR, ..Default::default() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    /// Cityscapes-style or flat `images/`+`masks/` directory tree.
    Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub density: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Synthetic, root: None, n_train: 2000, n_test: 200, density: 0.7, seed: 1 }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self, model: &ModelConfig, split: Split) -> SyntheticSpec {
        let (n_images, seed) = match split {
            Split::Train => (self.n_train, self.seed),
            Split::Test => (self.n_test, derive(self.seed, &[tag("test")])),
        };
        SyntheticSpec { n_images, height: model.height, width: model.width, n_cls: model.n_cls, density: self.density, seed }
    }

    pub fn load(&self, model: &ModelConfig, split: Split) -> anyhow::Result<Dataset> {
        match self.source {
            DataSource::Synthetic => Ok(generate_synthetic(&self.synthetic_spec(model, split))?),
            DataSource::Layout => {
                let root = self.root.as_ref().ok_or_else(|| usage!("data.root is required for source = \"layout\""))?;
                let (ds, skipped) = load_layout(root, split, model.n_cls);
                for s in &skipped {
                    log::warn!("skipped {}: {}", s.path.display(), s.reason);
                }
                if ds.is_empty() {
                    anyhow::bail!("no usable {} pairs under {}", split.dir_name(), root.display());
                }
                Ok(ds)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SnrDb,
    CompressionRatio,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::SnrDb => "SNR (dB)",
            Axis::CompressionRatio => "compression ratio r",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSystem {
    Issc,
    BaselineJpeg,
    BaselinePng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub systems: Vec<SweepSystem>,
    /// Modulations paired with every baseline system.
    pub modulations: Vec<Modulation>,
    pub repeats: usize,
    /// Channel SNR held fixed on the compression-ratio axis.
    pub snr_db: f64,
    /// Evaluate on the first `eval_images` test images (all when unset).
    pub eval_images: Option<usize>,
    /// ISSC checkpoint for the SNR axis.
    pub checkpoint: Option<PathBuf>,
    /// ISSC checkpoints per ratio (keyed by the ratio as written in `values`).
    pub checkpoints: BTreeMap<String, Vec<PathBuf>>,
    /// Frozen reference segmenter applied to baseline reconstructions.
    pub segmenter: Option<PathBuf>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            axis: Axis::SnrDb,
            values: (0..=15).map(|i| 2.0 * i as f64).collect(),
            systems: vec![SweepSystem::Issc, SweepSystem::BaselineJpeg],
            modulations: vec![Modulation::Qam16],
            repeats: 20,
            snr_db: 10.0,
            eval_images: None,
            checkpoint: None,
            checkpoints: BTreeMap::new(),
            segmenter: None,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.values.is_empty() {
            return Err(usage!("sweep.values must not be empty"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(usage!("sweep.values must be finite"));
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(usage!("sweep.values must be strictly increasing"));
        }
        if self.repeats == 0 {
            return Err(usage!("sweep.repeats must be at least 1"));
        }
        if self.systems.is_empty() {
            return Err(usage!("sweep.systems must not be empty"));
        }
        let baseline = self.systems.iter().any(|s| *s != SweepSystem::Issc);
        if baseline && self.modulations.is_empty() {
            return Err(usage!("sweep.modulations must not be empty when a baseline is swept"));
        }
        if self.modulations.contains(&Modulation::None) {
            return Err(usage!("sweep.modulations: the baseline needs a QAM order"));
        }
        if self.axis == Axis::CompressionRatio {
            if self.systems.contains(&SweepSystem::BaselinePng) {
                return Err(usage!("sweep.systems: PNG is lossless and cannot follow a compression-ratio axis"));
            }
            if let Some(v) = self.values.iter().find(|v| **v < 1.0) {
                return Err(usage!("sweep.values: compression ratio {v} is below 1"));
            }
        }
        if self.eval_images == Some(0) {
            return Err(usage!("sweep.eval_images must be at least 1"));
        }
        Ok(())
    }

    /// Checkpoints for a ratio value, matched numerically against the keys.
    pub fn checkpoints_for(&self, value: f64) -> Option<&Vec<PathBuf>> {
        self.checkpoints
            .iter()
            .find(|(k, _)| k.trim().parse::<f64>().is_ok_and(|r| (r - value).abs() < 1e-9))
            .map(|(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GalleryConfig {
    pub snrs: Vec<f64>,
    pub image_index: usize,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        GalleryConfig { snrs: vec![18.0, 19.0, 20.0, 21.0], image_index: 0 }
    }
}

impl RunConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| usage!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| usage!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(|e| usage!("model: {e}"))?;
        self.train.validate().map_err(|e| usage!("train: {e}"))?;
        self.sweep.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data
                .synthetic_spec(&self.model, Split::Train)
                .validate()
                .map_err(|e| usage!("data: {e}"))?;
        }
        if self.baseline.codec == Codec::None {
            return Err(usage!("baseline.codec must be jpeg or png"));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.root.as_mut() {
            fix(p);
        }
        if let Some(p) = self.sweep.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.sweep.segmenter.as_mut() {
            fix(p);
        }
        for list in self.sweep.checkpoints.values_mut() {
            list.iter_mut().for_each(fix);
        }
    }

    /// Applies `--seed`: the master seed also seeds training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}
