//! Side-by-side reconstructions and masks of one image at a few SNRs.

use std::path::Path;

use anyhow::Context;
use image::{Rgb, RgbImage};

use issc_core::datamodel::IGNORE_INDEX;
use issc_core::datasets::Sample;
use issc_core::model::{ChannelState, IsscModel};
use issc_core::seeds::{derive, tag};
use issc_phy::baseline::{baseline_segment, BaselineChain, BaselineConfig};

use crate::sweep::raw_image;

const PALETTE: [[u8; 3]; 8] = [
    [128, 64, 128],
    [220, 20, 60],
    [70, 130, 180],
    [107, 142, 35],
    [250, 170, 30],
    [0, 0, 142],
    [153, 153, 153],
    [190, 153, 153],
];

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryRow {
    pub snr_db: f64,
    pub decode_failure: bool,
    pub residual_bit_errors: usize,
    pub failed_blocks: usize,
    pub reason: String,
}

pub fn colorize(mask: &[u8], width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = mask[y as usize * width + x as usize];
        if v == IGNORE_INDEX {
            Rgb([0, 0, 0])
        } else {
            Rgb(PALETTE[v as usize % PALETTE.len()])
        }
    })
}

/// Grey tile crossed in red: the receiver produced no image.
pub fn failure_placard(width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let (x, y, w, h) = (x as i64, y as i64, width as i64, height as i64);
        let on_diag = (x * h - y * w).abs() <= w.max(h) || (x * h - (h - 1 - y) * w).abs() <= w.max(h);
        if on_diag {
            Rgb([200, 0, 0])
        } else {
            Rgb([96, 96, 96])
        }
    })
}

fn from_sample(s: &Sample) -> RgbImage {
    RgbImage::from_raw(s.width as u32, s.height as u32, s.image.clone()).expect("sample sizes are consistent")
}

fn save(img: &RgbImage, path: &Path) -> anyhow::Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Writes per-SNR tiles, `panel.png` (one row per SNR: original,
/// baseline reconstruction, baseline mask, ISSC mask, ground truth) and
/// `captions.csv`.
pub fn cliff_gallery(
    model: &IsscModel<f32>,
    segmenter: &IsscModel<f32>,
    baseline: &BaselineConfig,
    sample: &Sample,
    snrs: &[f64],
    master: u64,
    out: &Path,
) -> anyhow::Result<Vec<GalleryRow>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let chain = BaselineChain::new(baseline.clone())?;
    let src = chain.source(&raw_image(sample))?;
    let (w, h) = (sample.width, sample.height);
    let original = from_sample(sample);
    let truth = colorize(&sample.mask, w, h);
    save(&original, &out.join("original.png"))?;
    save(&truth, &out.join("ground_truth.png"))?;

    let mut panel = RgbImage::new(5 * w as u32, (h * snrs.len().max(1)) as u32);
    let mut rows = Vec::new();
    let mut captions = csv::Writer::from_path(out.join("captions.csv"))?;
    captions.write_record(["snr_db", "decode_failure", "residual_bit_errors", "failed_blocks", "reason"])?;
    for (i, &snr_db) in snrs.iter().enumerate() {
        let seed = derive(master, &[tag("gallery"), snr_db.to_bits()]);
        let rec = chain.transmit_source(&src, snr_db, seed);
        let (recon, base_mask) = match &rec.output {
            Ok(img) => {
                let m = baseline_segment(&rec.output, segmenter)?.context("decoded image has a mask")?;
                let recon = RgbImage::from_raw(w as u32, h as u32, img.rgb.clone()).context("reconstruction size")?;
                (recon, colorize(&m.data, w, h))
            }
            Err(_) => (failure_placard(w, h), failure_placard(w, h)),
        };
        let (_, issc_mask) = model.issc_forward(&sample.image_tensor(), ChannelState::Awgn { snr_db, seed })?;
        let issc_mask = colorize(&issc_mask.data, w, h);

        let tag = format!("snr_{snr_db}");
        save(&recon, &out.join(format!("{tag}_baseline_reconstruction.png")))?;
        save(&base_mask, &out.join(format!("{tag}_baseline_mask.png")))?;
        save(&issc_mask, &out.join(format!("{tag}_issc_mask.png")))?;
        for (j, tile) in [&original, &recon, &base_mask, &issc_mask, &truth].into_iter().enumerate() {
            image::imageops::replace(&mut panel, tile, (j * w) as i64, (i * h) as i64);
        }

        let row = GalleryRow {
            snr_db,
            decode_failure: rec.output.is_err(),
            residual_bit_errors: rec.residual_bit_errors,
            failed_blocks: rec.failed_blocks,
            reason: rec.output.as_ref().err().map(|f| f.reason.clone()).unwrap_or_default(),
        };
        captions.write_record([
            row.snr_db.to_string(),
            row.decode_failure.to_string(),
            row.residual_bit_errors.to_string(),
            row.failed_blocks.to_string(),
            row.reason.clone(),
        ])?;
        rows.push(row);
    }
    captions.flush()?;
    save(&panel, &out.join("panel.png"))?;
    Ok(rows)
}
