//! Layer primitives with hand-written backward passes.
//!
//! Every layer works on channel-last tensors: the trailing axis is the
//! feature axis and all leading axes are flattened into rows.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::params::{join, Parameters};
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Truncated normal (resampled outside ±2 std).
pub fn trunc_normal<F: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break F::from_f64_lossy(z * std);
        }
    })
}

pub fn uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.random_range(-bound..=bound)))
}

/// Affine map over the trailing axis; doubles as a 1×1 stride-1 convolution.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    /// `(in, out)`, row-major.
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

impl<F: Scalar> Linear<F> {
    /// Truncated-normal weights (std 0.02), zero bias.
    pub fn trunc_normal<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        Linear {
            weight: trunc_normal(&[input, output], 0.02, rng),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    /// Uniform `±1/sqrt(in)` weights and bias, the usual default for convolutions.
    pub fn fan_in_uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear { weight: uniform(&[input, output], bound, rng), bias: Some(uniform(&[output], bound, rng)) }
    }

    pub fn identity(n: usize) -> Self {
        let mut weight = Tensor::zeros(&[n, n]);
        for i in 0..n {
            weight.data_mut()[i * n + i] = F::one();
        }
        Linear { weight, bias: Some(Tensor::zeros(&[n])) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut y = x.matmul_last(&self.weight)?;
        if let Some(b) = &self.bias {
            let n = b.len();
            for row in y.data_mut().chunks_exact_mut(n) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    pub fn backward(&self, x: &Tensor<F>, dy: &Tensor<F>, grad: &mut Linear<F>) -> Result<Tensor<F>> {
        self.backward_params(x, dy, grad)?;
        let mut dx_shape = dy.shape().to_vec();
        *dx_shape.last_mut().unwrap() = self.in_dim();
        let mut dx = Tensor::zeros(&dx_shape);
        let rows = dy.rows();
        gemm(dy.as_mat(), self.weight.as_mat().t(), MatMut::new(dx.data_mut(), rows, self.in_dim()), false);
        Ok(dx)
    }

    /// Parameter gradients only (for layers whose input needs no gradient).
    pub fn backward_params(&self, x: &Tensor<F>, dy: &Tensor<F>, grad: &mut Linear<F>) -> Result<()> {
        if x.last_dim() != self.in_dim() || dy.last_dim() != self.out_dim() || x.rows() != dy.rows() {
            return Err(shape_err!(
                "linear backward: x {:?}, dy {:?}, weight {:?}",
                x.shape(),
                dy.shape(),
                self.weight.shape()
            ));
        }
        let (i, o) = (self.in_dim(), self.out_dim());
        gemm(x.as_mat().t(), dy.as_mat(), MatMut::new(grad.weight.data_mut(), i, o), true);
        if let Some(gb) = grad.bias.as_mut() {
            let gb = gb.data_mut();
            for row in dy.data().chunks_exact(o) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Parameters<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Per-token normalization over the trailing axis with learnable scale/shift.
#[derive(Clone, Debug)]
pub struct LayerNorm<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

pub struct LayerNormCache<F> {
    xhat: Tensor<F>,
    rstd: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(channels: usize) -> Self {
        LayerNorm { gamma: Tensor::full(&[channels], F::one()), beta: Tensor::zeros(&[channels]) }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<(Tensor<F>, LayerNormCache<F>)> {
        let c = self.gamma.len();
        if x.last_dim() != c {
            return Err(shape_err!("layer norm over {c} channels got {:?}", x.shape()));
        }
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let inv_c = F::one() / F::from_usize(c).unwrap();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for (xr, yr) in xhat.data_mut().chunks_exact_mut(c).zip(y.data_mut().chunks_exact_mut(c)) {
            let mean = xr.iter().copied().sum::<F>() * inv_c;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((xv, yv), (&g, &b)) in xr.iter_mut().zip(yr.iter_mut()).zip(self.gamma.data().iter().zip(self.beta.data())) {
                *xv = (*xv - mean) * r;
                *yv = *xv * g + b;
            }
        }
        Ok((y, LayerNormCache { xhat, rstd }))
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Tensor<F>, grad: &mut LayerNorm<F>) -> Tensor<F> {
        let c = self.gamma.len();
        let inv_c = F::one() / F::from_usize(c).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![F::zero(); c];
        for (((dyr, xr), dxr), &r) in dy
            .data()
            .chunks_exact(c)
            .zip(cache.xhat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
            .zip(&cache.rstd)
        {
            let gg = grad.gamma.data_mut();
            for j in 0..c {
                gg[j] += dyr[j] * xr[j];
            }
            let gb = grad.beta.data_mut();
            for j in 0..c {
                gb[j] += dyr[j];
            }
            let mut mean_d = F::zero();
            let mut mean_dx = F::zero();
            for j in 0..c {
                dxhat[j] = dyr[j] * self.gamma.data()[j];
                mean_d += dxhat[j];
                mean_dx += dxhat[j] * xr[j];
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for j in 0..c {
                dxr[j] = r * (dxhat[j] - mean_d - xr[j] * mean_dx);
            }
        }
        dx
    }
}

impl<F: Scalar> Parameters<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(join(prefix, "weight"), &self.gamma);
        f(join(prefix, "bias"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(join(prefix, "weight"), &mut self.gamma);
        f(join(prefix, "bias"), &mut self.beta);
    }
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (F::one() + (x * inv_sqrt2).erf())
}

#[inline]
fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (F::one() + (x * inv_sqrt2).erf());
    cdf + x * inv_sqrt_2pi * (-half * x * x).exp()
}

pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad_scalar(v);
    }
    dx
}

/// In-place numerically stable softmax over each contiguous row of length `n`.
pub fn softmax_rows<F: Scalar>(data: &mut [F], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Average pooling over non-overlapping `factor × factor` blocks.
pub fn avg_pool<F: Scalar>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (b, h, w, c) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("avg_pool factor {factor} does not divide {h}x{w}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let scale = F::one() / F::from_usize(factor * factor).unwrap();
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * oh + y / factor) * ow + xx / factor) * c;
                for ch in 0..c {
                    od[dst + ch] += xd[src + ch] * scale;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<F: Scalar>(dy: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (b, oh, ow, c) = dy.dims4()?;
    let (h, w) = (oh * factor, ow * factor);
    let scale = F::one() / F::from_usize(factor * factor).unwrap();
    let mut dx = Tensor::zeros(&[b, h, w, c]);
    let dd = dy.data();
    let xd = dx.data_mut();
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((bi * h + y) * w + xx) * c;
                let src = ((bi * oh + y / factor) * ow + xx / factor) * c;
                for ch in 0..c {
                    xd[dst + ch] = dd[src + ch] * scale;
                }
            }
        }
    }
    Ok(dx)
}

/// Source taps for half-pixel-centred (corner-unaligned) linear interpolation.
fn linear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, corner alignment disabled.
pub fn upsample_bilinear<F: Scalar>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (b, h, w, c) = x.dims4()?;
    if factor == 0 {
        return Err(shape_err!("upsample factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = linear_taps(oh, h);
    let tx = linear_taps(ow, w);
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = F::from_f64_lossy(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = F::from_f64_lossy(lx);
                let w00 = (F::one() - ly) * (F::one() - lx);
                let w01 = (F::one() - ly) * lx;
                let w10 = ly * (F::one() - lx);
                let w11 = ly * lx;
                let p00 = ((bi * h + y0) * w + x0) * c;
                let p01 = ((bi * h + y0) * w + x1) * c;
                let p10 = ((bi * h + y1) * w + x0) * c;
                let p11 = ((bi * h + y1) * w + x1) * c;
                let dst = ((bi * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    od[dst + ch] =
                        w00 * xd[p00 + ch] + w01 * xd[p01 + ch] + w10 * xd[p10 + ch] + w11 * xd[p11 + ch];
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<F: Scalar>(dy: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (b, oh, ow, c) = dy.dims4()?;
    let (h, w) = (oh / factor, ow / factor);
    let ty = linear_taps(oh, h);
    let tx = linear_taps(ow, w);
    let mut dx = Tensor::zeros(&[b, h, w, c]);
    let dd = dy.data();
    let xd = dx.data_mut();
    for bi in 0..b {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = F::from_f64_lossy(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = F::from_f64_lossy(lx);
                let w00 = (F::one() - ly) * (F::one() - lx);
                let w01 = (F::one() - ly) * lx;
                let w10 = ly * (F::one() - lx);
                let w11 = ly * lx;
                let src = ((bi * oh + oy) * ow + ox) * c;
                let p00 = ((bi * h + y0) * w + x0) * c;
                let p01 = ((bi * h + y0) * w + x1) * c;
                let p10 = ((bi * h + y1) * w + x0) * c;
                let p11 = ((bi * h + y1) * w + x1) * c;
                for ch in 0..c {
                    let g = dd[src + ch];
                    xd[p00 + ch] += w00 * g;
                    xd[p01 + ch] += w01 * g;
                    xd[p10 + ch] += w10 * g;
                    xd[p11 + ch] += w11 * g;
                }
            }
        }
    }
    Ok(dx)
}

/// Concatenates feature maps of equal spatial size along the channel axis.
pub fn concat_channels<F: Scalar>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let (b, h, w, _) = parts[0].dims4()?;
    let mut total = 0;
    for p in parts {
        let (pb, ph, pw, pc) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(shape_err!("concat of {:?} with {:?}", parts[0].shape(), p.shape()));
        }
        total += pc;
    }
    let mut out = Tensor::zeros(&[b, h, w, total]);
    let od = out.data_mut();
    let mut offset = 0;
    for p in parts {
        let pc = p.last_dim();
        for (dst, src) in od.chunks_exact_mut(total).zip(p.data().chunks_exact(pc)) {
            dst[offset..offset + pc].copy_from_slice(src);
        }
        offset += pc;
    }
    Ok(out)
}

/// Splits channel-concatenated gradients back into the given widths.
pub fn split_channels<F: Scalar>(x: &Tensor<F>, widths: &[usize]) -> Result<Vec<Tensor<F>>> {
    let (b, h, w, c) = x.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(shape_err!("split widths {widths:?} do not sum to {c}"));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(widths.len());
    for &pc in widths {
        let mut part = Tensor::zeros(&[b, h, w, pc]);
        for (dst, src) in part.data_mut().chunks_exact_mut(pc).zip(x.data().chunks_exact(c)) {
            dst.copy_from_slice(&src[offset..offset + pc]);
        }
        offset += pc;
        out.push(part);
    }
    Ok(out)
}

/// `MatRef` over rows `[start, start + rows)` of a contiguous row-major tensor.
pub fn row_block<F>(data: &[F], start: usize, rows: usize, cols: usize) -> MatRef<'_, F> {
    MatRef::strided(data, start * cols, rows, cols, cols, 1)
}
