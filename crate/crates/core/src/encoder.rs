//! Semantic feature aggregator: brings F1, F2 and F4 to F3's resolution,
//! concatenates all four in (F1, F2, F3, F4) order and projects to `K`
//! channels with a 1×1 convolution. Also hosts transmit power normalization.

use rand::Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{
    avg_pool, avg_pool_backward, concat_channels, split_channels, upsample_bilinear, upsample_bilinear_backward,
    Linear,
};
use crate::params::{join, Parameters};
use crate::tensor::{Scalar, Tensor};

/// Spatial resampling applied to one stage output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down(usize),
    Identity,
    Up(usize),
}

fn resample_plan<F: Scalar>(feats: &[Tensor<F>; 4]) -> Result<[Resample; 4]> {
    let (b, h3, w3, _) = feats[2].dims4()?;
    let mut plan = [Resample::Identity; 4];
    for (s, f) in feats.iter().enumerate() {
        let (fb, h, w, _) = f.dims4()?;
        if fb != b {
            return Err(shape_err!("stage {} batch {fb} vs {b}", s + 1));
        }
        plan[s] = if (h, w) == (h3, w3) {
            Resample::Identity
        } else if h > h3 && h % h3 == 0 && w % w3 == 0 && h / h3 == w / w3 {
            Resample::Down(h / h3)
        } else if h < h3 && h3 % h == 0 && w3 % w == 0 && h3 / h == w3 / w {
            Resample::Up(h3 / h)
        } else {
            return Err(shape_err!("stage {} size {h}x{w} cannot be resampled to {h3}x{w3}", s + 1));
        };
    }
    let expected = [Resample::Down(4), Resample::Down(2), Resample::Identity, Resample::Up(2)];
    if plan != expected {
        return Err(shape_err!("stage shapes inconsistent with one backbone pass: {plan:?}"));
    }
    Ok(plan)
}

/// Resamples `F1..F4` to F3's spatial size: average pooling ×1/4 and ×1/2,
/// identity, bilinear ×2.
pub fn resample_multi_scale<F: Scalar>(feats: &[Tensor<F>; 4]) -> Result<[Tensor<F>; 4]> {
    let plan = resample_plan(feats)?;
    let mut out = Vec::with_capacity(4);
    for (f, r) in feats.iter().zip(plan) {
        out.push(match r {
            Resample::Down(k) => avg_pool(f, k)?,
            Resample::Identity => f.clone(),
            Resample::Up(k) => upsample_bilinear(f, k)?,
        });
    }
    Ok(out.try_into().expect("four stages"))
}

fn resample_backward<F: Scalar>(grads: Vec<Tensor<F>>) -> Result<[Tensor<F>; 4]> {
    let plan = [Resample::Down(4), Resample::Down(2), Resample::Identity, Resample::Up(2)];
    let mut out = Vec::with_capacity(4);
    for (g, r) in grads.into_iter().zip(plan) {
        out.push(match r {
            Resample::Down(k) => avg_pool_backward(&g, k)?,
            Resample::Identity => g,
            Resample::Up(k) => upsample_bilinear_backward(&g, k)?,
        });
    }
    Ok(out.try_into().expect("four stages"))
}

#[derive(Clone, Debug)]
pub struct Aggregator<F> {
    /// 1×1 convolution `15C → K`.
    pub projection: Linear<F>,
}

pub struct AggregatorCache<F> {
    concat: Tensor<F>,
    widths: Vec<usize>,
}

impl<F: Scalar> Aggregator<F> {
    pub fn new<R: Rng + ?Sized>(concat_channels: usize, k: usize, rng: &mut R) -> Self {
        Aggregator { projection: Linear::fan_in_uniform(concat_channels, k, rng) }
    }

    pub fn k(&self) -> usize {
        self.projection.out_dim()
    }

    /// `x = conv1×1(concat(F1↓, F2↓, F3, F4↑))`.
    pub fn forward(&self, feats: &[Tensor<F>; 4]) -> Result<Tensor<F>> {
        Ok(self.forward_cached(feats)?.0)
    }

    pub fn forward_cached(&self, feats: &[Tensor<F>; 4]) -> Result<(Tensor<F>, AggregatorCache<F>)> {
        let resampled = resample_multi_scale(feats)?;
        let widths: Vec<usize> = resampled.iter().map(|t| t.last_dim()).collect();
        if widths.iter().sum::<usize>() != self.projection.in_dim() {
            return Err(config_err!(
                "aggregator expects {} concatenated channels, got {}",
                self.projection.in_dim(),
                widths.iter().sum::<usize>()
            ));
        }
        let refs: Vec<&Tensor<F>> = resampled.iter().collect();
        let concat = concat_channels(&refs)?;
        let x = self.projection.forward(&concat)?;
        Ok((x, AggregatorCache { concat, widths }))
    }

    pub fn backward(&self, cache: &AggregatorCache<F>, dx: &Tensor<F>, grad: &mut Aggregator<F>) -> Result<[Tensor<F>; 4]> {
        let dcat = self.projection.backward(&cache.concat, dx, &mut grad.projection)?;
        resample_backward(split_channels(&dcat, &cache.widths)?)
    }
}

impl<F: Scalar> Parameters<F> for Aggregator<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.projection.visit(&join(prefix, "projection"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
    }
}

/// Per-item gains applied by [`power_normalize`]: `x̂ = gain · x`.
#[derive(Clone, Debug)]
pub struct PowerScale<F> {
    pub gains: Vec<F>,
}

/// Scales each batch item to unit mean square, `x̂ = x / sqrt(mean(x²))`.
pub fn power_normalize<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, PowerScale<F>)> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b == 0 || x.is_empty() {
        return Err(Error::Normalization("empty feature map".into()));
    }
    let per = x.len() / b;
    let mut out = x.clone();
    let mut gains = Vec::with_capacity(b);
    for (i, item) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let ms = item.iter().map(|&v| v * v).sum::<F>() / F::from_usize(per).unwrap();
        if !(ms > F::zero()) || !ms.is_finite() {
            return Err(Error::Normalization(format!("batch item {i} has mean power {ms}")));
        }
        let g = F::one() / ms.sqrt();
        for v in item.iter_mut() {
            *v *= g;
        }
        gains.push(g);
    }
    Ok((out, PowerScale { gains }))
}

pub fn power_normalize_backward<F: Scalar>(x: &Tensor<F>, scale: &PowerScale<F>, dxhat: &Tensor<F>) -> Tensor<F> {
    let b = scale.gains.len();
    let per = x.len() / b;
    let n = F::from_usize(per).unwrap();
    let mut dx = dxhat.clone();
    for ((dxi, xi), &g) in dx.data_mut().chunks_exact_mut(per).zip(x.data().chunks_exact(per)).zip(&scale.gains) {
        let dot: F = dxi.iter().zip(xi).map(|(&d, &v)| d * v).sum();
        let k = g * g * g / n * dot;
        for (d, &v) in dxi.iter_mut().zip(xi) {
            *d = g * *d - k * v;
        }
    }
    dx
}

/// Gradient through `ŷ = (x̂ + ρ) / g(x) = x + ρ · rms(x)`, where the
/// receiver divides by the same gain the transmitter applied.
pub fn rescaled_channel_backward<F: Scalar>(
    x: &Tensor<F>,
    scale: &PowerScale<F>,
    noise: Option<&Tensor<F>>,
    dy: &Tensor<F>,
) -> Tensor<F> {
    let mut dx = dy.clone();
    let Some(noise) = noise else { return dx };
    let per = x.len() / scale.gains.len();
    let n = F::from_usize(per).unwrap();
    for (((dxi, xi), ni), &g) in dx
        .data_mut()
        .chunks_exact_mut(per)
        .zip(x.data().chunks_exact(per))
        .zip(noise.data().chunks_exact(per))
        .zip(&scale.gains)
    {
        let dot: F = dxi.iter().zip(ni).map(|(&d, &r)| d * r).sum();
        let k = dot * g / n;
        for (d, &v) in dxi.iter_mut().zip(xi) {
            *d += k * v;
        }
    }
    dx
}

/// Receiver-side inverse of the transmit gain (known out of band).
pub fn power_denormalize<F: Scalar>(y: &Tensor<F>, scale: &PowerScale<F>) -> Tensor<F> {
    let per = y.len() / scale.gains.len();
    let mut out = y.clone();
    for (item, &g) in out.data_mut().chunks_exact_mut(per).zip(&scale.gains) {
        for v in item.iter_mut() {
            *v /= g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(c: usize, side3: usize, seed: u64) -> [Tensor<f64>; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            uniform(&[1, side3 * 4, side3 * 4, c], 1.0, &mut rng),
            uniform(&[1, side3 * 2, side3 * 2, 2 * c], 1.0, &mut rng),
            uniform(&[1, side3, side3, 4 * c], 1.0, &mut rng),
            uniform(&[1, side3 / 2, side3 / 2, 8 * c], 1.0, &mut rng),
        ]
    }

    #[test]
    fn resampling_contract() {
        let f = feats(2, 4, 1);
        let r = resample_multi_scale(&f).unwrap();
        assert_eq!(r[2], f[2]);
        for (s, t) in r.iter().enumerate() {
            assert_eq!(&t.shape()[..3], &[1, 4, 4]);
            assert_eq!(t.last_dim(), 2 << s);
        }
        // F1 pooled: explicit 4×4 block average
        let c = 2;
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            acc += f[0].data()[((y * 4 + dy) * 16 + x * 4 + dx) * c + ch];
                        }
                    }
                    let got = r[0].data()[(y * 4 + x) * c + ch];
                    assert!((got - acc / 16.0).abs() < 1e-12);
                }
            }
        }
        let mut bad = f.clone();
        bad[3] = Tensor::zeros(&[1, 3, 3, 16]);
        assert!(resample_multi_scale(&bad).is_err());
    }

    #[test]
    fn aggregator_linear_cases() {
        let f = feats(1, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agg = Aggregator::<f64>::new(15, 4, &mut rng);
        agg.projection.weight.fill(0.0);
        agg.projection.bias.as_mut().unwrap().fill(0.0);
        assert!(agg.forward(&f).unwrap().data().iter().all(|&v| v == 0.0));

        let ident = Aggregator { projection: Linear::identity(15) };
        let x = ident.forward(&f).unwrap();
        let r = resample_multi_scale(&f).unwrap();
        let refs: Vec<&Tensor<f64>> = r.iter().collect();
        assert_eq!(x, concat_channels(&refs).unwrap());

        let wrong = Aggregator::<f64>::new(16, 4, &mut rng);
        assert!(matches!(wrong.forward(&f), Err(Error::Config(_))));
    }

    #[test]
    fn power_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = uniform(&[3, 2, 2, 5], 3.0, &mut rng);
        let (xn, _) = power_normalize(&x).unwrap();
        for item in xn.data().chunks(20) {
            let ms: f64 = item.iter().map(|v| v * v).sum::<f64>() / 20.0;
            assert!((ms - 1.0).abs() < 1e-12);
        }
        let (again, _) = power_normalize(&xn).unwrap();
        assert!(again.max_abs_diff(&xn) < 1e-12);
        let (halved, _) = power_normalize(&xn.map(|v| 2.0 * v)).unwrap();
        assert!(halved.max_abs_diff(&xn) < 1e-12);
        assert!(matches!(power_normalize(&Tensor::<f64>::zeros(&[1, 2, 2, 2])), Err(Error::Normalization(_))));
    }

    #[test]
    fn power_normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = uniform(&[2, 1, 2, 3], 1.0, &mut rng);
        let probe: Tensor<f64> = uniform(x.shape(), 1.0, &mut rng);
        let f = |x: &Tensor<f64>| -> f64 {
            let (xn, _) = power_normalize(x).unwrap();
            xn.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, scale) = power_normalize(&x).unwrap();
        let analytic = power_normalize_backward(&x, &scale, &probe);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - analytic.data()[i]).abs() < 1e-7);
        }
    }
}
