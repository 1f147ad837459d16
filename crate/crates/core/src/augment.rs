//! Random crop, horizontal flip and photometric distortion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Sample;
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub photometric: bool,
    /// Maximum additive brightness shift, in `[0, 1]` intensity units.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            photometric: true,
            brightness: 32.0 / 255.0,
            contrast: (0.5, 1.5),
            saturation: (0.5, 1.5),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { flip: false, photometric: false, ..Default::default() }
    }
}

/// Crops `(h, w)` starting at `(top, left)`.
pub fn crop(s: &Sample, top: usize, left: usize, h: usize, w: usize) -> Sample {
    let mut image = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for y in top..top + h {
        let row = y * s.width;
        image.extend_from_slice(&s.image[(row + left) * 3..(row + left + w) * 3]);
        mask.extend_from_slice(&s.mask[row + left..row + left + w]);
    }
    Sample { height: h, width: w, image, mask }
}

pub fn hflip(s: &Sample) -> Sample {
    let mut out = s.clone();
    for y in 0..s.height {
        for x in 0..s.width {
            let (dst, src) = (y * s.width + x, y * s.width + s.width - 1 - x);
            out.mask[dst] = s.mask[src];
            out.image[dst * 3..dst * 3 + 3].copy_from_slice(&s.image[src * 3..src * 3 + 3]);
        }
    }
    out
}

fn photometric(image: &mut [u8], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let mut px: Vec<f64> = image.iter().map(|&v| v as f64 / 255.0).collect();
    if rng.random::<bool>() {
        let delta = rng.random_range(-cfg.brightness..=cfg.brightness);
        px.iter_mut().for_each(|v| *v += delta);
    }
    if rng.random::<bool>() {
        let f = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        px.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
    }
    if rng.random::<bool>() {
        let f = rng.random_range(cfg.saturation.0..=cfg.saturation.1);
        for p in px.chunks_exact_mut(3) {
            let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            p.iter_mut().for_each(|v| *v = gray + f * (*v - gray));
        }
    }
    for (o, v) in image.iter_mut().zip(px) {
        *o = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
}

/// One augmented view of `s`. The crop and flip move image and mask
/// together; photometric changes touch the image only.
pub fn augment(s: &Sample, crop_size: (usize, usize), cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    let (ch, cw) = crop_size;
    if ch > s.height || cw > s.width || ch == 0 || cw == 0 {
        return Err(config_err!("crop {ch}x{cw} does not fit a {}x{} image", s.height, s.width));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=s.height - ch);
    let left = rng.random_range(0..=s.width - cw);
    let mut out = crop(s, top, left, ch, cw);
    if cfg.flip && rng.random::<bool>() {
        out = hflip(&out);
    }
    if cfg.photometric {
        photometric(&mut out.image, cfg, &mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticSpec};
    use std::collections::BTreeSet;

    fn sample() -> Sample {
        generate_synthetic(&SyntheticSpec::toy(1, 4)).unwrap().samples.remove(0)
    }

    #[test]
    fn flip_is_an_involution() {
        let s = crop(&sample(), 5, 7, 32, 40);
        assert_eq!(hflip(&hflip(&s)), s);
        assert_ne!(hflip(&s), s);
    }

    #[test]
    fn labels_are_preserved_and_seeded() {
        let s = sample();
        for seed in 0..20 {
            let a = augment(&s, (32, 32), &AugmentConfig::default(), seed).unwrap();
            let b = augment(&s, (32, 32), &AugmentConfig::default(), seed).unwrap();
            assert_eq!(a, b);
            let src: BTreeSet<u8> = s.mask.iter().copied().collect();
            assert!(a.mask.iter().all(|v| src.contains(v)));
        }
    }

    #[test]
    fn mask_follows_the_spatial_transform() {
        let s = sample();
        let full = augment(&s, (64, 64), &AugmentConfig { photometric: false, ..Default::default() }, 3).unwrap();
        assert!(full.mask == s.mask || full.mask == hflip(&s).mask);
        let plain = augment(&s, (64, 64), &AugmentConfig::none(), 3).unwrap();
        assert_eq!(plain, s);
        assert!(augment(&s, (65, 64), &AugmentConfig::none(), 0).is_err());
    }
}
