//! Shared domain types: model/channel configuration, shape derivation and
//! the experiment record persisted by the sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pixel value marking "no label" in masks.
pub const IGNORE_INDEX: u8 = 255;

/// Multiple every image side must be divisible by (patch 4 × three halvings).
pub const SIDE_MULTIPLE: usize = 32;

/// Batch of RGB images, `(B, H, W, 3)`, intensities in `[0, 1]`.
pub type ImageBatch<F> = Tensor<F>;

/// Channel-last feature map `(B, h, w, c)`.
pub type FeatureMap<F> = Tensor<F>;

/// Per-pixel class indices, `(B, H, W)`, with [`IGNORE_INDEX`] for unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub ignore_index: u8,
}

impl SegMask {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "mask ({batch},{height},{width}) needs {} values, got {}",
                batch * height * width,
                data.len()
            )));
        }
        Ok(SegMask { batch, height, width, data, ignore_index: IGNORE_INDEX })
    }

    pub fn filled(batch: usize, height: usize, width: usize, class: u8) -> Self {
        SegMask {
            batch,
            height,
            width,
            data: vec![class; batch * height * width],
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn item(&self, b: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    /// Checks every non-ignored label lies in `[0, n_cls)`.
    pub fn validate(&self, n_cls: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != self.ignore_index && v as usize >= n_cls) {
            Some(v) => Err(Error::Validation(format!("mask label {v} outside [0, {n_cls})"))),
            None => Ok(()),
        }
    }

    /// Stacks single-item masks into one batch.
    pub fn stack(items: &[SegMask]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("empty mask stack".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.height * first.width);
        for m in items {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::Shape("masks of different sizes in one batch".into()));
            }
            data.extend_from_slice(&m.data);
        }
        let batch = data.len() / (first.height * first.width);
        Ok(SegMask { batch, height: first.height, width: first.width, data, ignore_index: first.ignore_index })
    }
}

/// Stacks `(1, H, W, 3)` images (or bare `(H, W, 3)`) into a batch.
pub fn stack_images<F: Scalar>(items: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = items.first().ok_or_else(|| Error::Shape("empty image stack".into()))?;
    let per = first.len();
    let (h, w) = match first.shape() {
        [1, h, w, 3] | [h, w, 3] => (*h, *w),
        s => return Err(Error::Shape(format!("not an image: {s:?}"))),
    };
    let mut data = Vec::with_capacity(per * items.len());
    for t in items {
        if t.len() != per {
            return Err(Error::Shape("images of different sizes in one batch".into()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[items.len(), h, w, 3], data)
}

/// Fails if any value lies outside `[0, 1]` (or is not finite).
pub fn validate_normalized<F: Scalar>(image: &Tensor<F>) -> Result<()> {
    let bad = image.data().iter().position(|&v| !(v >= F::zero() && v <= F::one()));
    match bad {
        Some(i) => Err(Error::Validation(format!(
            "image not normalized to [0,1]: value {} at flat index {i}",
            image.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Architecture hyperparameters. Key names follow the simulation-parameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    #[serde(rename = "embedding_dimension", alias = "embed_dim")]
    pub embed_dim: usize,
    pub depths: [usize; 4],
    #[serde(rename = "head_number", alias = "num_heads")]
    pub num_heads: [usize; 4],
    pub window_size: usize,
    pub mlp_ratio: f64,
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
    #[serde(rename = "N_cls", alias = "n_cls")]
    pub n_cls: usize,
    #[serde(rename = "H", alias = "height")]
    pub height: usize,
    #[serde(rename = "W", alias = "width")]
    pub width: usize,
}

impl ModelConfig {
    /// The full-size layout: 224×224 crops, Swin-S depths, K = 256, 19 classes.
    pub fn table_one() -> Self {
        ModelConfig {
            patch_size: 4,
            embed_dim: 96,
            depths: [2, 2, 18, 2],
            num_heads: [3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4.0,
            k: 256,
            n_cls: 19,
            height: 224,
            width: 224,
        }
    }

    /// Desk-scale configuration used by the synthetic experiments.
    pub fn toy() -> Self {
        ModelConfig {
            patch_size: 4,
            embed_dim: 32,
            depths: [2, 2, 2, 2],
            num_heads: [2, 2, 4, 4],
            window_size: 4,
            mlp_ratio: 4.0,
            k: 256,
            n_cls: 5,
            height: 64,
            width: 64,
        }
    }

    /// Smallest configuration used for finite-difference gradient checks (< 5k parameters).
    pub fn tiny() -> Self {
        ModelConfig {
            patch_size: 4,
            embed_dim: 2,
            depths: [2, 2, 2, 2],
            num_heads: [1, 1, 2, 2],
            window_size: 2,
            mlp_ratio: 0.25,
            k: 6,
            n_cls: 3,
            height: 32,
            width: 32,
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        (self.mlp_ratio * channels as f64).round() as usize
    }

    /// Window size and shift actually used at a stage of spatial size `(h, w)`.
    ///
    /// A stage no larger than the configured window is covered by a single
    /// window, and shifting is disabled there.
    pub fn stage_window(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.window_size;
        let side = h.min(w);
        if side <= m {
            (side, 0)
        } else {
            (m, m / 2)
        }
    }

    /// Channel count of the concatenated multi-scale features (15C).
    pub fn concat_channels(&self) -> usize {
        (0..4).map(|s| self.stage_channels(s)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size != 4 {
            return Err(config_err!("patch_size must be 4 (got {})", self.patch_size));
        }
        if self.height == 0 || self.height % SIDE_MULTIPLE != 0 {
            return Err(config_err!("H = {} is not divisible by {SIDE_MULTIPLE}", self.height));
        }
        if self.width == 0 || self.width % SIDE_MULTIPLE != 0 {
            return Err(config_err!("W = {} is not divisible by {SIDE_MULTIPLE}", self.width));
        }
        if self.embed_dim == 0 {
            return Err(config_err!("embedding_dimension must be positive"));
        }
        if self.k == 0 {
            return Err(config_err!("K must be at least 1"));
        }
        if self.n_cls < 2 || self.n_cls > 255 {
            return Err(config_err!("N_cls = {} outside [2, 255]", self.n_cls));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(config_err!("mlp_ratio must be positive"));
        }
        if self.window_size == 0 {
            return Err(config_err!("window_size must be positive"));
        }
        for (s, (h, w, c)) in self.stage_shapes_unchecked().into_iter().enumerate() {
            let depth = self.depths[s];
            if depth == 0 || depth % 2 != 0 {
                return Err(config_err!("depths[{s}] = {depth} must be even and positive"));
            }
            let heads = self.num_heads[s];
            if heads == 0 || c % heads != 0 {
                return Err(config_err!("stage {} channels {c} not divisible by head_number {heads}", s + 1));
            }
            let (m, _) = self.stage_window(h, w);
            if h % m != 0 || w % m != 0 {
                return Err(config_err!("stage {} size {h}x{w} not divisible by window {m}", s + 1));
            }
            if self.mlp_hidden(c) == 0 {
                return Err(config_err!("mlp_ratio gives zero hidden width at stage {}", s + 1));
            }
        }
        Ok(())
    }

    fn stage_shapes_unchecked(&self) -> [(usize, usize, usize); 4] {
        let mut out = [(0, 0, 0); 4];
        for (s, slot) in out.iter_mut().enumerate() {
            let down = self.patch_size << s;
            *slot = (self.height / down, self.width / down, self.stage_channels(s));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = toml::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(h, w, c)` of the four stage outputs F1..F4.
pub fn derive_stage_shapes(config: &ModelConfig) -> Result<[(usize, usize, usize); 4]> {
    if config.height % SIDE_MULTIPLE != 0 {
        return Err(config_err!("H = {} is not divisible by {SIDE_MULTIPLE}", config.height));
    }
    if config.width % SIDE_MULTIPLE != 0 {
        return Err(config_err!("W = {} is not divisible by {SIDE_MULTIPLE}", config.width));
    }
    Ok(config.stage_shapes_unchecked())
}

/// Source real values per transmitted real value: `(H·W·3) / ((H/16)·(W/16)·K) = 768 / K`.
pub fn compression_ratio(config: &ModelConfig) -> Result<f64> {
    if config.k == 0 {
        return Err(config_err!("K must be at least 1"));
    }
    Ok(768.0 / config.k as f64)
}

/// Aggregator width giving a target ratio, `K = 768 / r` (must be integral).
pub fn k_for_ratio(ratio: f64) -> Result<usize> {
    let k = 768.0 / ratio;
    if !(k >= 1.0) || (k - k.round()).abs() > 1e-9 {
        return Err(config_err!("ratio {ratio} does not give an integral K"));
    }
    Ok(k.round() as usize)
}

/// Real values transmitted per image on the semantic path.
pub fn transmitted_elements(config: &ModelConfig) -> usize {
    (config.height / 16) * (config.width / 16) * config.k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    /// Channel gain; 1.0 for AWGN.
    pub fading_coefficient: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        ChannelConfig { snr_db, fading_coefficient: 1.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Domain(format!("snr_db must be finite, got {}", self.snr_db)));
        }
        if !(self.fading_coefficient > 0.0) {
            return Err(Error::Domain(format!("fading coefficient must be > 0, got {}", self.fading_coefficient)));
        }
        Ok(())
    }
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(config_err!("unknown {} '{other}'", stringify!($name))),
                }
            }
        }
    };
}

text_enum!(System { Issc => "issc", Baseline => "baseline" });
text_enum!(Codec { None => "none", Jpeg => "jpeg", Png => "png" });
text_enum!(Modulation { None => "none", Qam4 => "qam4", Qam16 => "qam16", Qam64 => "qam64" });

impl Modulation {
    pub fn order(self) -> Option<usize> {
        match self {
            Modulation::None => None,
            Modulation::Qam4 => Some(4),
            Modulation::Qam16 => Some(16),
            Modulation::Qam64 => Some(64),
        }
    }
}

/// One `(system, SNR, ratio, seed) → mIoU` result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub system: System,
    pub codec: Codec,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub ratio: f64,
    pub seed: u64,
    pub miou: f64,
}

pub const RECORD_HEADER: &str = "system,codec,modulation,snr_db,ratio,seed,miou";

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miou) {
            return Err(Error::Validation(format!("miou {} outside [0,1]", self.miou)));
        }
        Ok(())
    }
}

/// Appends records to a CSV, writing the header when the file is new or empty.
pub fn append_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        r.validate()?;
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
