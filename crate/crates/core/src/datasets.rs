//! Procedural toy scenes, the Cityscapes-style directory layout, and batching.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{SegMask, IGNORE_INDEX};
use crate::error::{config_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One image with its mask, both row-major; the image is interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn image_tensor<F: Scalar>(&self) -> Tensor<F> {
        let scale = F::from_f64_lossy(1.0 / 255.0);
        Tensor::from_vec(
            &[1, self.height, self.width, 3],
            self.image.iter().map(|&v| F::from_u8(v).unwrap() * scale).collect(),
        )
        .expect("sample sizes are consistent")
    }

    pub fn seg_mask(&self) -> SegMask {
        SegMask::new(1, self.height, self.width, self.mask.clone()).expect("sample sizes are consistent")
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub n_cls: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the listed samples into an image batch and a mask batch.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<F>, SegMask)> {
        let items: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        stack_samples(&items)
    }

    /// Pixel count per class over every labelled pixel.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.n_cls];
        for s in &self.samples {
            for &v in &s.mask {
                if v != IGNORE_INDEX && (v as usize) < self.n_cls {
                    hist[v as usize] += 1;
                }
            }
        }
        hist
    }

    /// The most frequent class (lowest index on ties).
    pub fn majority_class(&self) -> u8 {
        let hist = self.class_histogram();
        let mut best = 0;
        for (i, &c) in hist.iter().enumerate() {
            if c > hist[best] {
                best = i;
            }
        }
        best as u8
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(v) = s.mask.iter().find(|&&v| v != IGNORE_INDEX && v as usize >= self.n_cls) {
                return Err(Error::Dataset(format!("sample {i}: mask value {v} outside [0, {})", self.n_cls)));
            }
        }
        Ok(())
    }
}

pub fn stack_samples<F: Scalar>(items: &[&Sample]) -> Result<(Tensor<F>, SegMask)> {
    let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let scale = F::from_f64_lossy(1.0 / 255.0);
    let mut img = Vec::with_capacity(items.len() * h * w * 3);
    let mut mask = Vec::with_capacity(items.len() * h * w);
    for s in items {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Shape(format!("batch mixes {h}x{w} and {}x{}", s.height, s.width)));
        }
        img.extend(s.image.iter().map(|&v| F::from_u8(v).unwrap() * scale));
        mask.extend_from_slice(&s.mask);
    }
    Ok((Tensor::from_vec(&[items.len(), h, w, 3], img)?, SegMask::new(items.len(), h, w, mask)?))
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub n_cls: usize,
    /// Probability that each foreground class appears in an image.
    pub density: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Toy defaults: 5 classes at 64×64.
    pub fn toy(n_images: usize, seed: u64) -> Self {
        SyntheticSpec { n_images, height: 64, width: 64, n_cls: 5, density: 0.7, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cls < 2 || self.n_cls > 255 {
            return Err(config_err!("synthetic n_cls must lie in [2, 255], got {}", self.n_cls));
        }
        if self.height != self.width || ![32, 64, 128].contains(&self.height) {
            return Err(config_err!("synthetic images must be square with side 32, 64 or 128"));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(config_err!("density must lie in [0, 1], got {}", self.density));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    /// Full-width horizontal band, rows `[y0, y1)`.
    Band { y0: usize, y1: usize },
    /// Pixels with `x0 <= x < x1`, `y0 <= y < y1`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Geometry {
    /// Whether the pixel centred at `(x + 0.5, y + 0.5)` is covered.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Geometry::Band { y0, y1 } => y >= y0 && y < y1,
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Geometry::Ellipse { cx, cy, rx, ry } => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
            Geometry::Triangle { pts: [a, b, c] } => {
                let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
                let (d0, d1, d2) = (side(a, b), side(b, c), side(c, a));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub class: u8,
    pub geometry: Geometry,
    pub color: [f64; 3],
}

/// Everything needed to re-render one synthetic image and its mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    /// Painted in order; later shapes occlude earlier ones.
    pub shapes: Vec<Shape>,
    pub texture_seed: u64,
}

const BASE_COLORS: [[f64; 3]; 5] = [
    [0.42, 0.55, 0.40], // background: grass
    [0.30, 0.30, 0.33], // road
    [0.20, 0.35, 0.75], // vehicle
    [0.80, 0.25, 0.25], // pedestrian
    [0.85, 0.75, 0.20], // obstacle
];

fn base_color(class: usize) -> [f64; 3] {
    if class < BASE_COLORS.len() {
        return BASE_COLORS[class];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn jitter(c: [f64; 3], amount: f64, rng: &mut impl Rng) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

fn random_geometry(class: usize, h: usize, w: usize, rng: &mut impl Rng) -> Geometry {
    let (hf, wf) = (h as f64, w as f64);
    match (class - 1) % 4 {
        0 => {
            let y0 = rng.random_range((0.55 * hf) as usize..=(0.75 * hf) as usize);
            Geometry::Band { y0, y1: h }
        }
        1 => {
            let rw = rng.random_range((0.15 * wf) as usize..=(0.35 * wf) as usize);
            let rh = rng.random_range((0.10 * hf) as usize..=(0.25 * hf) as usize);
            let x0 = rng.random_range(0..=w - rw);
            let y0 = rng.random_range(0..=h - rh);
            Geometry::Rect { x0, y0, x1: x0 + rw, y1: y0 + rh }
        }
        2 => Geometry::Ellipse {
            cx: rng.random_range(0.1 * wf..0.9 * wf),
            cy: rng.random_range(0.1 * hf..0.9 * hf),
            rx: rng.random_range(0.05 * wf..0.12 * wf),
            ry: rng.random_range(0.10 * hf..0.20 * hf),
        },
        _ => {
            let cx = rng.random_range(0.15 * wf..0.85 * wf);
            let cy = rng.random_range(0.15 * hf..0.85 * hf);
            let s = rng.random_range(0.10 * wf..0.25 * wf);
            let mut pts = [(0.0, 0.0); 3];
            for (k, p) in pts.iter_mut().enumerate() {
                let a = k as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.4..0.4) - std::f64::consts::FRAC_PI_2;
                let r = s * rng.random_range(0.7..1.0);
                *p = (cx + r * a.cos(), cy + r * a.sin());
            }
            Geometry::Triangle { pts }
        }
    }
}

/// Exact mask of a scene: the class of the topmost shape covering each pixel.
pub fn rasterize(scene: &Scene) -> Vec<u8> {
    let mut mask = vec![0u8; scene.height * scene.width];
    for s in &scene.shapes {
        for y in 0..scene.height {
            for x in 0..scene.width {
                if s.geometry.covers(x, y) {
                    mask[y * scene.width + x] = s.class;
                }
            }
        }
    }
    mask
}

/// Paints the scene with per-pixel texture noise.
pub fn render(scene: &Scene) -> Sample {
    let (h, w) = (scene.height, scene.width);
    let mask = rasterize(scene);
    let mut colors = vec![scene.background; h * w];
    for (y, row) in colors.chunks_exact_mut(w).enumerate() {
        // vertical shading on the background
        let shade = 0.12 * (y as f64 / h as f64 - 0.5);
        for c in row.iter_mut() {
            *c = c.map(|v| v + shade);
        }
    }
    for s in &scene.shapes {
        for (i, c) in colors.iter_mut().enumerate() {
            if s.geometry.covers(i % w, i / w) {
                *c = s.color;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.texture_seed);
    let image = colors
        .iter()
        .flat_map(|c| *c)
        .map(|v| {
            let noisy: f64 = v + rng.random_range(-0.08..0.08);
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Sample { height: h, width: w, image, mask }
}

/// Scene `index` of a synthetic spec; every scene has its own stream so
/// any subset can be regenerated independently.
pub fn generate_scene(spec: &SyntheticSpec, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let present: Vec<usize> = (1..spec.n_cls).filter(|_| rng.random::<f64>() < spec.density).collect();
    let background = jitter(base_color(0), 0.08, &mut rng);
    let colors: Vec<[f64; 3]> = present.iter().map(|&c| jitter(base_color(c), 0.12, &mut rng)).collect();
    let texture_seed = rng.random();

    // Re-draw geometry until every chosen class stays visible.
    let mut shapes = Vec::new();
    for attempt in 0..50 {
        shapes = present
            .iter()
            .zip(&colors)
            .map(|(&c, &color)| Shape { class: c as u8, geometry: random_geometry(c, h, w, &mut rng), color })
            .collect();
        let scene = Scene { height: h, width: w, background, shapes: shapes.clone(), texture_seed };
        let mask = rasterize(&scene);
        let all_visible = present.iter().all(|&c| mask.iter().any(|&v| v as usize == c));
        if all_visible || attempt == 49 {
            break;
        }
    }
    Scene { height: h, width: w, background, shapes, texture_seed }
}

pub fn generate_scenes(spec: &SyntheticSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    Ok((0..spec.n_images).map(|i| generate_scene(spec, i)).collect())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let scenes = generate_scenes(spec)?;
    Ok(Dataset { n_cls: spec.n_cls, samples: scenes.iter().map(render).collect() })
}

// ---------------------------------------------------------------------------
// Directory layouts

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Cityscapes `labelId` → 19-class `trainId`; everything else is ignored.
pub fn cityscapes_train_id(label_id: u8) -> u8 {
    const TABLE: [(u8, u8); 19] = [
        (7, 0),
        (8, 1),
        (11, 2),
        (12, 3),
        (13, 4),
        (17, 5),
        (19, 6),
        (20, 7),
        (21, 8),
        (22, 9),
        (23, 10),
        (24, 11),
        (25, 12),
        (26, 13),
        (27, 14),
        (28, 15),
        (31, 16),
        (32, 17),
        (33, 18),
    ];
    TABLE.iter().find(|(l, _)| *l == label_id).map_or(IGNORE_INDEX, |&(_, t)| t)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipEntry {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Mask holds raw Cityscapes label ids that need remapping.
    pub remap: bool,
}

/// Paired files found under a dataset root, plus the files that could not be paired.
#[derive(Clone, Debug, Default)]
pub struct LayoutScan {
    pub pairs: Vec<ImagePair>,
    pub skipped: Vec<SkipEntry>,
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    out.sort();
    out
}

/// Scans either the Cityscapes layout (`leftImg8bit/<split>/<city>/*_leftImg8bit.png`
/// with `gtFine/<split>/<city>/*_gtFine_{labelTrainIds,labelIds}.png`) or the
/// flat layout (`images/<split>/<name>.png` with `masks/<split>/<name>.png`).
pub fn scan_layout(root: &Path, split: Split) -> LayoutScan {
    let mut scan = LayoutScan::default();
    let cityscapes = root.join("leftImg8bit");
    if cityscapes.is_dir() {
        for img in files_under(&cityscapes.join(split.dir_name())) {
            let Some(name) = img.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(stem) = name.strip_suffix("_leftImg8bit.png") else { continue };
            let rel = img.parent().and_then(|p| p.strip_prefix(&cityscapes).ok()).map(Path::to_path_buf);
            let dir = root.join("gtFine").join(rel.unwrap_or_default());
            let train_ids = dir.join(format!("{stem}_gtFine_labelTrainIds.png"));
            let label_ids = dir.join(format!("{stem}_gtFine_labelIds.png"));
            if train_ids.is_file() {
                scan.pairs.push(ImagePair { image: img, mask: train_ids, remap: false });
            } else if label_ids.is_file() {
                scan.pairs.push(ImagePair { image: img, mask: label_ids, remap: true });
            } else {
                scan.skipped.push(SkipEntry { path: img, reason: "no matching gtFine mask".into() });
            }
        }
    } else {
        let mask_dir = root.join("masks").join(split.dir_name());
        for img in files_under(&root.join("images").join(split.dir_name())) {
            let Some(name) = img.file_name() else { continue };
            let mask = mask_dir.join(name);
            if mask.is_file() {
                scan.pairs.push(ImagePair { image: img, mask, remap: false });
            } else {
                scan.skipped.push(SkipEntry { path: img, reason: "no matching mask".into() });
            }
        }
    }
    if scan.pairs.is_empty() {
        log::warn!("no image/mask pairs under {} for split {}", root.display(), split.dir_name());
    }
    scan
}

/// Decodes one pair; dimension mismatches and unreadable files become skip entries.
pub fn load_pair(pair: &ImagePair) -> std::result::Result<Sample, SkipEntry> {
    let skip = |reason: String| SkipEntry { path: pair.image.clone(), reason };
    let img = image::open(&pair.image).map_err(|e| skip(format!("unreadable image: {e}")))?.to_rgb8();
    let mask = image::open(&pair.mask).map_err(|e| skip(format!("unreadable mask: {e}")))?.to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(skip(format!("image is {:?} but mask is {:?}", img.dimensions(), mask.dimensions())));
    }
    let (w, h) = img.dimensions();
    let mut labels = mask.into_raw();
    if pair.remap {
        labels.iter_mut().for_each(|v| *v = cityscapes_train_id(*v));
    }
    Ok(Sample { height: h as usize, width: w as usize, image: img.into_raw(), mask: labels })
}

impl LayoutScan {
    /// Lazily decodes pairs in order.
    pub fn iter(&self) -> impl Iterator<Item = std::result::Result<Sample, SkipEntry>> + '_ {
        self.pairs.iter().map(load_pair)
    }
}

/// Loads a whole split into memory, returning the combined skip report.
pub fn load_layout(root: &Path, split: Split, n_cls: usize) -> (Dataset, Vec<SkipEntry>) {
    let scan = scan_layout(root, split);
    let mut skipped = scan.skipped.clone();
    let mut samples = Vec::new();
    for item in scan.iter() {
        match item {
            Ok(s) => samples.push(s),
            Err(e) => skipped.push(e),
        }
    }
    for s in &skipped {
        log::warn!("skipping {}: {}", s.path.display(), s.reason);
    }
    (Dataset { n_cls, samples }, skipped)
}

/// Writes a dataset in the flat layout (`images/<split>`, `masks/<split>`).
pub fn materialize(dataset: &Dataset, root: &Path, split: Split) -> Result<()> {
    let img_dir = root.join("images").join(split.dir_name());
    let mask_dir = root.join("masks").join(split.dir_name());
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        let img = RgbImage::from_raw(s.width as u32, s.height as u32, s.image.clone())
            .ok_or_else(|| Error::Dataset(format!("sample {i} has inconsistent size")))?;
        img.save(img_dir.join(&name))?;
        let mask = GrayImage::from_raw(s.width as u32, s.height as u32, s.mask.clone())
            .ok_or_else(|| Error::Dataset(format!("sample {i} has inconsistent size")))?;
        mask.save(mask_dir.join(&name))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batching

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled every epoch; the last partial batch is dropped.
    Train,
    /// Dataset order; the last partial batch is kept.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    batch: usize,
    seed: u64,
    mode: BatchMode,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64, mode: BatchMode) -> Result<Self> {
        if batch == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if mode == BatchMode::Train && batch > n {
            return Err(config_err!("training batch size {batch} exceeds dataset size {n}"));
        }
        Ok(Batcher { n, batch, seed, mode })
    }

    pub fn batches_per_epoch(&self) -> usize {
        match self.mode {
            BatchMode::Train => self.n / self.batch,
            BatchMode::Eval => self.n.div_ceil(self.batch),
        }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        if self.mode == BatchMode::Train {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        order.chunks(self.batch).take(self.batches_per_epoch()).map(|c| c.to_vec()).collect()
    }

    /// The batch used at global training step `step`.
    pub fn at_step(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch().max(1);
        self.epoch(step / per).swap_remove(step % per)
    }
}
