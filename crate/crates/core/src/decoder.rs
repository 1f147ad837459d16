//! Receiver: three 1×1 convolutions that clean up the noisy features, then
//! the reconstructor `conv → up×2 → up×2 → up×4 → conv → softmax → argmax`.

use rand::Rng;

use crate::datamodel::SegMask;
use crate::error::{config_err, Result};
use crate::nn::{gelu, gelu_backward, softmax_rows, upsample_bilinear, upsample_bilinear_backward, Linear};
use crate::params::{join, Parameters};
use crate::tensor::{Scalar, Tensor};

pub const UPSAMPLE_RATES: [usize; 3] = [2, 2, 4];

#[derive(Clone, Debug)]
pub struct Decoder<F> {
    /// Three `K → K` convolutions; GELU follows the first two.
    pub denoise: [Linear<F>; 3],
    /// `K → K`, followed by GELU.
    pub recon_in: Linear<F>,
    /// `K → N_cls`, emits logits.
    pub recon_out: Linear<F>,
}

pub struct DecoderCache<F> {
    inputs: [Tensor<F>; 3],
    pre_act: [Tensor<F>; 2],
    recon_in_x: Tensor<F>,
    recon_in_pre: Tensor<F>,
    up_in_shapes: [Vec<usize>; 3],
    recon_out_x: Tensor<F>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new<R: Rng + ?Sized>(k: usize, n_cls: usize, rng: &mut R) -> Self {
        Decoder {
            denoise: [
                Linear::fan_in_uniform(k, k, rng),
                Linear::fan_in_uniform(k, k, rng),
                Linear::fan_in_uniform(k, k, rng),
            ],
            recon_in: Linear::fan_in_uniform(k, k, rng),
            recon_out: Linear::fan_in_uniform(k, n_cls, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.recon_in.in_dim()
    }

    pub fn n_cls(&self) -> usize {
        self.recon_out.out_dim()
    }

    fn check_k(&self, y: &Tensor<F>) -> Result<()> {
        if y.last_dim() != self.k() {
            return Err(config_err!("decoder expects K = {} channels, got {}", self.k(), y.last_dim()));
        }
        Ok(())
    }

    /// Noise-suppressing feature decoder; shape preserving.
    pub fn feature_decode(&self, y: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_k(y)?;
        let h1 = gelu(&self.denoise[0].forward(y)?);
        let h2 = gelu(&self.denoise[1].forward(&h1)?);
        self.denoise[2].forward(&h2)
    }

    /// Full-resolution class logits `(B, 16h, 16w, N_cls)`.
    pub fn reconstruct_logits(&self, f: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_k(f)?;
        let mut u = gelu(&self.recon_in.forward(f)?);
        for r in UPSAMPLE_RATES {
            u = upsample_bilinear(&u, r)?;
        }
        self.recon_out.forward(&u)
    }

    /// Per-pixel class probabilities.
    pub fn reconstruct_probs(&self, f: &Tensor<F>) -> Result<Tensor<F>> {
        let mut p = self.reconstruct_logits(f)?;
        softmax(&mut p);
        Ok(p)
    }

    /// Received features → logits, keeping what backward needs.
    pub fn forward_cached(&self, y: &Tensor<F>) -> Result<(Tensor<F>, DecoderCache<F>)> {
        self.check_k(y)?;
        let a0 = self.denoise[0].forward(y)?;
        let h1 = gelu(&a0);
        let a1 = self.denoise[1].forward(&h1)?;
        let h2 = gelu(&a1);
        let f = self.denoise[2].forward(&h2)?;
        let r_pre = self.recon_in.forward(&f)?;
        let mut u = gelu(&r_pre);
        let mut shapes: [Vec<usize>; 3] = Default::default();
        for (i, r) in UPSAMPLE_RATES.into_iter().enumerate() {
            shapes[i] = u.shape().to_vec();
            u = upsample_bilinear(&u, r)?;
        }
        let logits = self.recon_out.forward(&u)?;
        let cache = DecoderCache {
            inputs: [y.clone(), h1, h2],
            pre_act: [a0, a1],
            recon_in_x: f,
            recon_in_pre: r_pre,
            up_in_shapes: shapes,
            recon_out_x: u,
        };
        Ok((logits, cache))
    }

    /// Returns the gradient with respect to the received features.
    pub fn backward(&self, cache: &DecoderCache<F>, dlogits: &Tensor<F>, grad: &mut Decoder<F>) -> Result<Tensor<F>> {
        let mut du = self.recon_out.backward(&cache.recon_out_x, dlogits, &mut grad.recon_out)?;
        for (i, r) in UPSAMPLE_RATES.into_iter().enumerate().rev() {
            du = upsample_bilinear_backward(&du, r)?;
            debug_assert_eq!(du.shape(), &cache.up_in_shapes[i][..]);
        }
        let dr = gelu_backward(&cache.recon_in_pre, &du);
        let df = self.recon_in.backward(&cache.recon_in_x, &dr, &mut grad.recon_in)?;
        let dh2 = self.denoise[2].backward(&cache.inputs[2], &df, &mut grad.denoise[2])?;
        let da1 = gelu_backward(&cache.pre_act[1], &dh2);
        let dh1 = self.denoise[1].backward(&cache.inputs[1], &da1, &mut grad.denoise[1])?;
        let da0 = gelu_backward(&cache.pre_act[0], &dh1);
        self.denoise[0].backward(&cache.inputs[0], &da0, &mut grad.denoise[0])
    }
}

impl<F: Scalar> Parameters<F> for Decoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        for (i, l) in self.denoise.iter().enumerate() {
            l.visit(&join(prefix, &format!("denoise{i}")), f);
        }
        self.recon_in.visit(&join(prefix, "recon_in"), f);
        self.recon_out.visit(&join(prefix, "recon_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for (i, l) in self.denoise.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("denoise{i}")), f);
        }
        self.recon_in.visit_mut(&join(prefix, "recon_in"), f);
        self.recon_out.visit_mut(&join(prefix, "recon_out"), f);
    }
}

/// Softmax over the class (trailing) axis, in place.
pub fn softmax<F: Scalar>(logits: &mut Tensor<F>) {
    let n = logits.last_dim();
    softmax_rows(logits.data_mut(), n);
}

/// Per-pixel argmax over classes; ties go to the lowest class index.
pub fn argmax_mask<F: Scalar>(probs: &Tensor<F>) -> Result<SegMask> {
    let (b, h, w, n) = probs.dims4()?;
    let data = probs
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    SegMask::new(b, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_denoiser_passes_positive_features() {
        // GELU is near-identity for large positive inputs; use the exact
        // pass-through by checking the linear path with zero pre-activations.
        let k = 3;
        let dec = Decoder::<f64> {
            denoise: [Linear::identity(k), Linear::identity(k), Linear::identity(k)],
            recon_in: Linear::identity(k),
            recon_out: Linear::identity(k),
        };
        let y = Tensor::full(&[1, 1, 1, k], 0.0);
        assert_eq!(dec.feature_decode(&y).unwrap(), y);
        let y = Tensor::full(&[1, 1, 1, k], 40.0);
        assert!(dec.feature_decode(&y).unwrap().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = Decoder::<f64>::new(4, 3, &mut rng);
        for l in dec.denoise.iter_mut() {
            l.weight.fill(0.0);
        }
        let y: Tensor<f64> = uniform(&[2, 2, 2, 4], 1.0, &mut rng);
        let out = dec.feature_decode(&y).unwrap();
        let bias = dec.denoise[2].bias.as_ref().unwrap().data().to_vec();
        for row in out.data().chunks(4) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn probabilities_are_full_resolution_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::<f64>::new(4, 5, &mut rng);
        let f: Tensor<f64> = uniform(&[1, 2, 3, 4], 2.0, &mut rng);
        let p = dec.reconstruct_probs(&f).unwrap();
        assert_eq!(p.shape(), &[1, 32, 48, 5]);
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(dec.reconstruct_probs(&Tensor::zeros(&[1, 2, 3, 5])).is_err());
    }

    #[test]
    fn zero_logits_are_uniform_and_ties_pick_class_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dec = Decoder::<f64>::new(4, 5, &mut rng);
        dec.recon_out.weight.fill(0.0);
        dec.recon_out.bias.as_mut().unwrap().fill(0.0);
        let f: Tensor<f64> = uniform(&[1, 1, 1, 4], 1.0, &mut rng);
        let p = dec.reconstruct_probs(&f).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(argmax_mask(&p).unwrap().data.iter().all(|&c| c == 0));
    }

    #[test]
    fn argmax_recovers_one_hot() {
        let labels = [3u8, 0, 1, 2];
        let p = Tensor::<f64>::from_fn(&[1, 2, 2, 4], |i| if labels[i / 4] as usize == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(argmax_mask(&p).unwrap().data, labels.to_vec());
    }
}
