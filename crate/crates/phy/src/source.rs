//! JPEG/PNG source coding and the bit framing used over the coded link.

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use issc_core::datamodel::Codec;
use issc_core::error::{Error, Result};

/// An RGB image as raw interleaved bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl RawImage {
    pub fn raw_bytes(&self) -> usize {
        self.rgb.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceEncoded {
    pub codec: Codec,
    pub bytes: Vec<u8>,
    /// JPEG quality selected to meet the target ratio.
    pub quality: Option<u8>,
    pub raw_bytes: usize,
    pub width: usize,
    pub height: usize,
}

impl SourceEncoded {
    /// Achieved compression ratio `raw / compressed`.
    pub fn ratio(&self) -> f64 {
        self.raw_bytes as f64 / self.bytes.len() as f64
    }

    pub fn bits(&self) -> usize {
        8 * self.bytes.len()
    }
}

pub fn jpeg_encode(img: &RawImage, quality: u8) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).write_image(
        &img.rgb,
        img.width as u32,
        img.height as u32,
        ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

pub fn png_encode(img: &RawImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(&img.rgb, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)?;
    Ok(buf)
}

/// JPEG: the highest quality whose size is at most `raw / target_ratio`
/// (binary search over qualities 1..=100). PNG: lossless, ratio as achieved.
pub fn source_encode(img: &RawImage, codec: Codec, target_ratio: f64) -> Result<SourceEncoded> {
    if !(target_ratio >= 1.0) {
        return Err(Error::Config(format!("compression ratio must be >= 1, got {target_ratio}")));
    }
    let done = |bytes, quality| SourceEncoded {
        codec,
        bytes,
        quality,
        raw_bytes: img.raw_bytes(),
        width: img.width,
        height: img.height,
    };
    match codec {
        Codec::Png => Ok(done(png_encode(img)?, None)),
        Codec::Jpeg => {
            let budget = (img.raw_bytes() as f64 / target_ratio).floor() as usize;
            let smallest = jpeg_encode(img, 1)?;
            if smallest.len() > budget {
                return Err(Error::Config(format!(
                    "JPEG cannot reach ratio {target_ratio}; best achievable is {:.3}",
                    img.raw_bytes() as f64 / smallest.len() as f64
                )));
            }
            let (mut lo, mut hi) = (1u8, 100u8);
            let mut best = (1u8, smallest);
            while lo < hi {
                let mid = lo + (hi - lo).div_ceil(2);
                let bytes = jpeg_encode(img, mid)?;
                if bytes.len() <= budget {
                    best = (mid, bytes);
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            Ok(done(best.1, Some(best.0)))
        }
        Codec::None => Err(Error::Config("the baseline needs a source codec".into())),
    }
}

/// Decodes a possibly corrupted bitstream. Decoder errors (and panics)
/// and wrong dimensions are reported as `Err` with a reason.
pub fn source_decode(bytes: &[u8], codec: Codec, width: usize, height: usize) -> std::result::Result<RawImage, String> {
    let format = match codec {
        Codec::Jpeg => ImageFormat::Jpeg,
        Codec::Png => ImageFormat::Png,
        Codec::None => return Err("no source codec".into()),
    };
    let decoded = catch_unwind(AssertUnwindSafe(|| image::load(Cursor::new(bytes), format)))
        .map_err(|_| "decoder panicked".to_string())?
        .map_err(|e| e.to_string())?
        .to_rgb8();
    if decoded.dimensions() != (width as u32, height as u32) {
        return Err(format!("decoded size {:?}, expected {width}x{height}", decoded.dimensions()));
    }
    Ok(RawImage { width, height, rgb: decoded.into_raw() })
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|&b| (0..8).rev().map(move |j| (b >> j) & 1)).collect()
}

pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8).map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | (b & 1))).collect()
}

/// `[32-bit pad length | payload bits | zero pad]`, filling whole `k`-bit blocks.
pub fn frame(payload: &[u8], k: usize) -> Vec<u8> {
    let body = 32 + 8 * payload.len();
    let blocks = body.div_ceil(k);
    let pad = blocks * k - body;
    let mut bits = Vec::with_capacity(blocks * k);
    bits.extend((0..32).rev().map(|j| ((pad as u32 >> j) & 1) as u8));
    bits.extend(bytes_to_bits(payload));
    bits.resize(blocks * k, 0);
    bits
}

/// Inverse of [`frame`]; a corrupted header that does not describe a whole
/// number of payload bytes is an error.
pub fn unframe(bits: &[u8]) -> std::result::Result<Vec<u8>, String> {
    if bits.len() < 32 {
        return Err("frame shorter than its header".into());
    }
    let pad = bits[..32].iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
    let body = bits.len() - 32;
    if pad > body || (body - pad) % 8 != 0 {
        return Err(format!("corrupted frame header (pad {pad} of {body} bits)"));
    }
    Ok(bits_to_bytes(&bits[32..32 + body - pad]))
}
