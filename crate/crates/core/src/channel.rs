//! Additive white Gaussian noise channel `y = h·x + ρ`, `ρ ~ N(0, σ²I)`,
//! for real-valued feature maps and complex modulation symbols.
//!
//! SNR is referenced to average element power (per real value on the
//! semantic path, per complex symbol on the digital path).

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Noise standard deviation for a target SNR: `σ² = P / 10^(snr/10)`.
pub fn sigma_from_snr(snr_db: f64, signal_power: f64) -> Result<f64> {
    if !(signal_power > 0.0) {
        return Err(Error::Domain(format!("signal power must be positive, got {signal_power}")));
    }
    if snr_db.is_nan() {
        return Err(Error::Domain("snr_db is NaN".into()));
    }
    Ok((signal_power / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// A seeded i.i.d. Gaussian noise realization.
#[derive(Clone, Debug)]
pub struct NoiseDraw<F> {
    pub sigma: f64,
    pub seed: u64,
    pub realization: Tensor<F>,
}

impl<F: Scalar> NoiseDraw<F> {
    pub fn new(shape: &[usize], sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let realization = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            F::from_f64_lossy(z * sigma)
        });
        NoiseDraw { sigma, seed, realization }
    }

    /// Noise for a unit-power signal at `snr_db`.
    pub fn for_snr(shape: &[usize], snr_db: f64, seed: u64) -> Result<Self> {
        Ok(Self::new(shape, sigma_from_snr(snr_db, 1.0)?, seed))
    }
}

/// `y = x + ρ` with noise calibrated for unit signal power.
///
/// `snr_db = +∞` gives a noiseless channel.
pub fn awgn_transmit<F: Scalar>(x: &Tensor<F>, snr_db: f64, seed: u64) -> Result<Tensor<F>> {
    fading_transmit(x, 1.0, snr_db, seed)
}

/// `y = h·x + ρ` with noise calibrated for unit signal power.
pub fn fading_transmit<F: Scalar>(x: &Tensor<F>, h: f64, snr_db: f64, seed: u64) -> Result<Tensor<F>> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("channel coefficient must be > 0, got {h}")));
    }
    let sigma = sigma_from_snr(snr_db, 1.0)?;
    let hf = F::from_f64_lossy(h);
    let mut y = x.map(|v| v * hf);
    if sigma > 0.0 {
        y.add_assign(&NoiseDraw::new(x.shape(), sigma, seed).realization);
    }
    Ok(y)
}

/// Gradient of `y = h·x + ρ` with respect to `x` (noise is a constant).
pub fn transmit_backward<F: Scalar>(dy: &Tensor<F>, h: f64) -> Tensor<F> {
    let hf = F::from_f64_lossy(h);
    dy.map(|v| v * hf)
}

/// Complex AWGN for unit-energy symbols: each real component gets variance `σ²/2`.
pub fn awgn_transmit_complex(symbols: &[Complex64], snr_db: f64, seed: u64) -> Result<(Vec<Complex64>, f64)> {
    let sigma = sigma_from_snr(snr_db, 1.0)?;
    let per_axis = sigma / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = symbols
        .iter()
        .map(|&s| {
            if sigma == 0.0 {
                return s;
            }
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            s + Complex64::new(re * per_axis, im * per_axis)
        })
        .collect();
    Ok((out, sigma))
}

/// `10·log10(P_signal / P_noise)` from a clean/noisy pair.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let ps: f64 = clean.iter().map(|v| v * v).sum();
    let pn: f64 = clean.iter().zip(noisy).map(|(a, b)| (b - a) * (b - a)).sum();
    10.0 * (ps / pn).log10()
}
