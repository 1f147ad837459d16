//! The separated digital chain: source code → LDPC → interleave → QAM →
//! AWGN → LLRs → BP decode → source decode → reference segmentation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use issc_core::channel::{awgn_transmit_complex, sigma_from_snr};
use issc_core::datamodel::{Codec, Modulation, SegMask};
use issc_core::error::{Error, Result};
use issc_core::metrics::ConfusionMatrix;
use issc_core::model::{ChannelState, IsscModel};
use issc_core::tensor::Tensor;

use crate::ldpc::{Interleaver, LdpcCode};
use crate::qam::Constellation;
use crate::source::{frame, source_decode, source_encode, unframe, RawImage, SourceEncoded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub codec: Codec,
    pub modulation: Modulation,
    pub target_ratio: f64,
    pub max_iters: usize,
    /// Seed of the frame-wide bit interleaver (`None` disables it).
    pub interleaver_seed: Option<u64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            codec: Codec::Jpeg,
            modulation: Modulation::Qam16,
            target_ratio: 3.0,
            max_iters: 50,
            interleaver_seed: Some(0x1D_1EAF),
        }
    }
}

/// The receiver could not produce an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeFailure {
    /// Message-bit errors left after channel decoding.
    pub residual_bit_errors: usize,
    pub reason: String,
}

impl fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "decode failure ({} residual bit errors): {}", self.residual_bit_errors, self.reason)
    }
}

#[derive(Clone, Debug)]
pub struct TransmitRecord {
    pub output: std::result::Result<RawImage, DecodeFailure>,
    pub compressed_bytes: usize,
    pub achieved_ratio: f64,
    pub quality: Option<u8>,
    pub coded_bits: usize,
    pub channel_symbols: usize,
    pub residual_bit_errors: usize,
    pub failed_blocks: usize,
}

pub struct BaselineChain {
    pub config: BaselineConfig,
    pub code: LdpcCode,
    pub constellation: Constellation,
}

impl BaselineChain {
    pub fn new(config: BaselineConfig) -> Result<Self> {
        let order = config
            .modulation
            .order()
            .ok_or_else(|| Error::Config("the baseline needs a QAM modulation".into()))?;
        if config.codec == Codec::None {
            return Err(Error::Config("the baseline needs a source codec".into()));
        }
        Ok(BaselineChain { constellation: Constellation::new(order)?, code: LdpcCode::standard(), config })
    }

    /// Source coding is deterministic, so sweeps encode once and reuse it.
    pub fn source(&self, img: &RawImage) -> Result<SourceEncoded> {
        source_encode(img, self.config.codec, self.config.target_ratio)
    }

    /// `ceil(coded bits / log2 M)` symbols for a payload of `bytes` bytes.
    pub fn channel_symbols(&self, bytes: usize) -> usize {
        let blocks = (32 + 8 * bytes).div_ceil(self.code.k);
        (blocks * self.code.n).div_ceil(self.constellation.bits_per_symbol)
    }

    pub fn transmit(&self, img: &RawImage, snr_db: f64, seed: u64) -> Result<TransmitRecord> {
        let src = self.source(img)?;
        Ok(self.transmit_source(&src, snr_db, seed))
    }

    pub fn transmit_source(&self, src: &SourceEncoded, snr_db: f64, seed: u64) -> TransmitRecord {
        let (k, n) = (self.code.k, self.code.n);
        let msg = frame(&src.bytes, k);
        let blocks = msg.len() / k;
        let mut coded = Vec::with_capacity(blocks * n);
        for b in msg.chunks_exact(k) {
            coded.extend(self.code.encode(b));
        }
        let interleaver = self.config.interleaver_seed.map(|s| Interleaver::new(coded.len(), s));
        let sent = match &interleaver {
            Some(il) => il.interleave(&coded),
            None => coded.clone(),
        };
        let (symbols, _pad) = self.constellation.modulate(&sent);
        let (rx, sigma) = awgn_transmit_complex(&symbols, snr_db, seed).expect("finite SNR");
        let mut llr = self.constellation.llr(&rx, sigma * sigma);
        llr.truncate(coded.len());
        if let Some(il) = &interleaver {
            llr = il.deinterleave(&llr);
        }
        let mut decoded = Vec::with_capacity(msg.len());
        let mut failed_blocks = 0;
        for block in llr.chunks_exact(n) {
            let (bits, converged, _) = self.code.decode(block, self.config.max_iters);
            failed_blocks += usize::from(!converged);
            decoded.extend_from_slice(&bits[..k]);
        }
        let residual = decoded.iter().zip(&msg).filter(|(a, b)| a != b).count();
        let output = unframe(&decoded)
            .and_then(|bytes| source_decode(&bytes, src.codec, src.width, src.height))
            .map_err(|reason| DecodeFailure { residual_bit_errors: residual, reason });
        TransmitRecord {
            output,
            compressed_bytes: src.bytes.len(),
            achieved_ratio: src.ratio(),
            quality: src.quality,
            coded_bits: coded.len(),
            channel_symbols: symbols.len(),
            residual_bit_errors: residual,
            failed_blocks,
        }
    }
}

fn image_tensor(img: &RawImage) -> Tensor<f32> {
    Tensor::from_vec(&[1, img.height, img.width, 3], img.rgb.iter().map(|&v| v as f32 / 255.0).collect())
        .expect("raw image sizes are consistent")
}

/// Segments a received image with the frozen reference segmenter; a
/// decode failure yields `None`.
pub fn baseline_segment(
    output: &std::result::Result<RawImage, DecodeFailure>,
    segmenter: &IsscModel<f32>,
) -> Result<Option<SegMask>> {
    match output {
        Ok(img) => Ok(Some(segmenter.issc_forward(&image_tensor(img), ChannelState::Noiseless)?.1)),
        Err(_) => Ok(None),
    }
}

/// Adds one received image to the confusion matrix; failures count every
/// labelled pixel as missed.
pub fn accumulate_baseline(cm: &mut ConfusionMatrix, pred: Option<&SegMask>, gt: &SegMask) -> Result<()> {
    match pred {
        Some(p) => cm.accumulate(p, gt),
        None => cm.accumulate_failure(gt),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BerRow {
    pub snr_db: f64,
    pub uncoded_ber: f64,
    pub coded_ber: f64,
    pub frame_failures: usize,
}

pub const BER_HEADER: &str = "snr_db,uncoded_ber,coded_ber,frame_failures";

/// Monte Carlo bit error rates at symbol SNR `snr_db`: hard-decision
/// uncoded QAM against LDPC-coded QAM, over at least `min_bits` message bits.
pub fn ber_point(code: &LdpcCode, qam: &Constellation, snr_db: f64, min_bits: usize, seed: u64) -> BerRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = min_bits.div_ceil(code.k);
    let noise_var = sigma_from_snr(snr_db, 1.0).expect("finite SNR").powi(2);
    let (mut unc_err, mut cod_err, mut failures) = (0usize, 0usize, 0usize);
    for _ in 0..blocks {
        let msg: Vec<u8> = (0..code.k).map(|_| rng.random_range(0..2)).collect();
        let (sym, _) = qam.modulate(&msg);
        let (rx, _) = awgn_transmit_complex(&sym, snr_db, rng.random()).expect("finite SNR");
        let hard = qam.demodulate_hard(&rx);
        unc_err += hard.iter().zip(&msg).filter(|(a, b)| a != b).count();

        let cw = code.encode(&msg);
        let (sym, _) = qam.modulate(&cw);
        let (rx, _) = awgn_transmit_complex(&sym, snr_db, rng.random()).expect("finite SNR");
        let mut llr = qam.llr(&rx, noise_var);
        llr.truncate(code.n);
        let (bits, converged, _) = code.decode(&llr, 50);
        let errs = bits[..code.k].iter().zip(&msg).filter(|(a, b)| a != b).count();
        cod_err += errs;
        failures += usize::from(!converged || errs > 0);
    }
    let total = (blocks * code.k) as f64;
    BerRow { snr_db, uncoded_ber: unc_err as f64 / total, coded_ber: cod_err as f64 / total, frame_failures: failures }
}

pub fn write_ber_csv(rows: &[BerRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BER_HEADER.split(','))?;
    for r in rows {
        w.write_record([r.snr_db.to_string(), r.uncoded_ber.to_string(), r.coded_ber.to_string(), r.frame_failures.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
