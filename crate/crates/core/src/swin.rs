//! Multi-scale feature extractor: patch embedding followed by four stages of
//! windowed self-attention blocks with patch merging between stages.
//!
//! Blocks alternate between regular windows and windows shifted by
//! `(⌊M/2⌋, ⌊M/2⌋)`. The shifted variant is computed with a cyclic shift of
//! the feature map plus an additive mask that blocks attention between
//! tokens which were not neighbours before the shift.

use rand::Rng;

use crate::datamodel::{validate_normalized, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{gelu, gelu_backward, softmax_rows, LayerNorm, LayerNormCache, Linear};
use crate::params::{join, Parameters};
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

/// Additive logit for token pairs from different pre-shift regions.
pub const SHIFT_MASK_VALUE: f64 = -100.0;

/// Splits `(B, h, w, c)` into `(B·(h/M)·(w/M), M², c)` windows, ordered by
/// batch, window row, window column; tokens row-major within a window.
pub fn window_partition<F: Scalar>(z: &Tensor<F>, m: usize) -> Result<Tensor<F>> {
    let (b, h, w, c) = z.dims4()?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(shape_err!("feature map {h}x{w} not divisible by window {m}"));
    }
    let (nh, nw) = (h / m, w / m);
    let mut out = Tensor::zeros(&[b * nh * nw, m * m, c]);
    let src = z.data();
    let dst = out.data_mut();
    let mut o = 0;
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..m {
                    let row = ((bi * h + wy * m + iy) * w + wx * m) * c;
                    dst[o..o + m * c].copy_from_slice(&src[row..row + m * c]);
                    o += m * c;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<F: Scalar>(windows: &Tensor<F>, m: usize, b: usize, h: usize, w: usize) -> Result<Tensor<F>> {
    let c = windows.last_dim();
    if m == 0 || h % m != 0 || w % m != 0 || windows.len() != b * h * w * c {
        return Err(shape_err!("cannot reverse windows {:?} into ({b},{h},{w},{c}) with M={m}", windows.shape()));
    }
    let (nh, nw) = (h / m, w / m);
    let mut out = Tensor::zeros(&[b, h, w, c]);
    let src = windows.data();
    let dst = out.data_mut();
    let mut o = 0;
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..m {
                    let row = ((bi * h + wy * m + iy) * w + wx * m) * c;
                    dst[row..row + m * c].copy_from_slice(&src[o..o + m * c]);
                    o += m * c;
                }
            }
        }
    }
    Ok(out)
}

/// `out[y][x] = z[(y + sy) mod h][(x + sx) mod w]`; `cyclic_shift(·, -s)` undoes `cyclic_shift(·, s)`.
pub fn cyclic_shift<F: Scalar>(z: &Tensor<F>, shift: isize) -> Result<Tensor<F>> {
    let (b, h, w, c) = z.dims4()?;
    if shift == 0 {
        return Ok(z.clone());
    }
    let mut out = Tensor::zeros(z.shape());
    let src = z.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as isize + shift).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize + shift).rem_euclid(w as isize) as usize;
                let d = ((bi * h + y) * w + x) * c;
                let s = ((bi * h + sy) * w + sx) * c;
                dst[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Ok(out)
}

/// Index into the `(2M−1)²` relative-offset table for every token pair of a window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (ri, ci) = (i / m, i % m);
        for j in 0..t {
            let (rj, cj) = (j / m, j % m);
            let dr = ri + m - 1 - rj;
            let dc = ci + m - 1 - cj;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Additive attention mask for the cyclically shifted layout, `(n_windows, M², M²)`.
pub fn shifted_window_mask<F: Scalar>(h: usize, w: usize, m: usize, shift: usize) -> Result<Tensor<F>> {
    if shift == 0 || shift >= m {
        return Err(shape_err!("shift {shift} must be in (0, {m})"));
    }
    let region = |i: usize, n: usize| -> usize {
        if i < n - m {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Tensor::<F>::zeros(&[1, h, w, 1]);
    for y in 0..h {
        for x in 0..w {
            labels.data_mut()[y * w + x] = F::from_usize(region(y, h) * 3 + region(x, w)).unwrap();
        }
    }
    let windows = window_partition(&labels, m)?;
    let t = m * m;
    let n_win = windows.shape()[0];
    let neg = F::from_f64_lossy(SHIFT_MASK_VALUE);
    let mut mask = Tensor::zeros(&[n_win, t, t]);
    for wi in 0..n_win {
        let lab = &windows.data()[wi * t..(wi + 1) * t];
        let md = &mut mask.data_mut()[wi * t * t..(wi + 1) * t * t];
        for i in 0..t {
            for j in 0..t {
                if lab[i] != lab[j] {
                    md[i * t + j] = neg;
                }
            }
        }
    }
    Ok(mask)
}

/// Multi-head self-attention inside one window with learnable relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention<F> {
    pub w_q: Linear<F>,
    pub w_k: Linear<F>,
    pub w_v: Linear<F>,
    pub w_o: Linear<F>,
    /// `((2M−1)², heads)` table of per-offset biases.
    pub rel_bias: Tensor<F>,
    pub num_heads: usize,
    pub window: usize,
}

pub struct AttentionCache<F> {
    x: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    /// `(n_win, heads, T, T)` attention weights.
    probs: Vec<F>,
    ctx: Tensor<F>,
}

impl<F> AttentionCache<F> {
    /// Attention weights laid out `(n_win, heads, T, T)`.
    pub fn probs(&self) -> &[F] {
        &self.probs
    }
}

impl<F: Scalar> WindowAttention<F> {
    pub fn new<R: Rng + ?Sized>(channels: usize, num_heads: usize, window: usize, rng: &mut R) -> Self {
        let span = 2 * window - 1;
        WindowAttention {
            w_q: Linear::trunc_normal(channels, channels, false, rng),
            w_k: Linear::trunc_normal(channels, channels, false, rng),
            w_v: Linear::trunc_normal(channels, channels, false, rng),
            w_o: Linear::trunc_normal(channels, channels, true, rng),
            rel_bias: Tensor::zeros(&[span * span, num_heads]),
            num_heads,
            window,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.in_dim()
    }

    /// Bias matrix `L` per head, `(heads, M², M²)`.
    pub fn realized_bias(&self) -> Tensor<F> {
        let t = self.window * self.window;
        let idx = relative_position_index(self.window);
        let nh = self.num_heads;
        let mut out = Tensor::zeros(&[nh, t, t]);
        for h in 0..nh {
            for (p, &ix) in idx.iter().enumerate() {
                out.data_mut()[h * t * t + p] = self.rel_bias.data()[ix * nh + h];
            }
        }
        out
    }

    /// `x: (n_win, M², c)`; `mask: (n_mask, M², M²)`, window `i` uses `mask[i % n_mask]`.
    pub fn forward(&self, x: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<(Tensor<F>, AttentionCache<F>)> {
        let c = self.channels();
        let t = self.window * self.window;
        let nh = self.num_heads;
        if x.last_dim() != c || c % nh != 0 || x.rows() % t != 0 {
            return Err(shape_err!("attention over {c} channels / {nh} heads / {t} tokens got {:?}", x.shape()));
        }
        let d = c / nh;
        let n_win = x.rows() / t;
        let q = self.w_q.forward(x)?;
        let k = self.w_k.forward(x)?;
        let v = self.w_v.forward(x)?;
        let bias = self.realized_bias();
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let mut probs = vec![F::zero(); n_win * nh * t * t];
        let mut ctx = Tensor::zeros(x.shape());
        for wi in 0..n_win {
            for h in 0..nh {
                let off = wi * t * c + h * d;
                let qh = MatRef::strided(q.data(), off, t, d, c, 1);
                let kh = MatRef::strided(k.data(), off, t, d, c, 1);
                let p0 = (wi * nh + h) * t * t;
                let logits = &mut probs[p0..p0 + t * t];
                gemm(qh, kh.t(), MatMut::new(logits, t, t), false);
                let bh = &bias.data()[h * t * t..(h + 1) * t * t];
                for (l, &b) in logits.iter_mut().zip(bh) {
                    *l = *l * scale + b;
                }
                if let Some(mask) = mask {
                    let n_mask = mask.shape()[0];
                    let mw = wi % n_mask;
                    let md = &mask.data()[mw * t * t..(mw + 1) * t * t];
                    for (l, &mv) in logits.iter_mut().zip(md) {
                        *l += mv;
                    }
                }
                if let Some(bad) = logits.iter().find(|v| v.is_nan()) {
                    return Err(Error::Numerical {
                        layer: "window_attention".into(),
                        detail: format!("attention logit {bad} in window {wi}, head {h}"),
                    });
                }
                softmax_rows(logits, t);
                let vh = MatRef::strided(v.data(), off, t, d, c, 1);
                gemm(
                    MatRef::new(&probs[p0..p0 + t * t], t, t),
                    vh,
                    MatMut::strided(ctx.data_mut(), off, t, d, c, 1),
                    false,
                );
            }
        }
        let y = self.w_o.forward(&ctx)?;
        Ok((y, AttentionCache { x: x.clone(), q, k, v, probs, ctx }))
    }

    pub fn backward(&self, cache: &AttentionCache<F>, dy: &Tensor<F>, grad: &mut WindowAttention<F>) -> Result<Tensor<F>> {
        let c = self.channels();
        let t = self.window * self.window;
        let nh = self.num_heads;
        let d = c / nh;
        let n_win = cache.x.rows() / t;
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let dctx = self.w_o.backward(&cache.ctx, dy, &mut grad.w_o)?;
        let mut dq = Tensor::zeros(cache.q.shape());
        let mut dk = Tensor::zeros(cache.k.shape());
        let mut dv = Tensor::zeros(cache.v.shape());
        let idx = relative_position_index(self.window);
        let mut da = vec![F::zero(); t * t];
        for wi in 0..n_win {
            for h in 0..nh {
                let off = wi * t * c + h * d;
                let p0 = (wi * nh + h) * t * t;
                let a = &cache.probs[p0..p0 + t * t];
                let dctx_h = MatRef::strided(dctx.data(), off, t, d, c, 1);
                let vh = MatRef::strided(cache.v.data(), off, t, d, c, 1);
                gemm(dctx_h, vh.t(), MatMut::new(&mut da, t, t), false);
                gemm(MatRef::new(a, t, t).t(), dctx_h, MatMut::strided(dv.data_mut(), off, t, d, c, 1), true);
                // softmax backward, in place: dS = A ⊙ (dA − rowsum(dA ⊙ A))
                for i in 0..t {
                    let row = i * t..(i + 1) * t;
                    let dot: F = a[row.clone()].iter().zip(&da[row.clone()]).map(|(&p, &g)| p * g).sum();
                    for j in row {
                        da[j] = a[j] * (da[j] - dot);
                    }
                }
                let table = grad.rel_bias.data_mut();
                for (p, &ix) in idx.iter().enumerate() {
                    table[ix * nh + h] += da[p];
                }
                for g in da.iter_mut() {
                    *g *= scale;
                }
                let qh = MatRef::strided(cache.q.data(), off, t, d, c, 1);
                let kh = MatRef::strided(cache.k.data(), off, t, d, c, 1);
                gemm(MatRef::new(&da, t, t), kh, MatMut::strided(dq.data_mut(), off, t, d, c, 1), true);
                gemm(MatRef::new(&da, t, t).t(), qh, MatMut::strided(dk.data_mut(), off, t, d, c, 1), true);
            }
        }
        let mut dx = self.w_q.backward(&cache.x, &dq, &mut grad.w_q)?;
        dx.add_assign(&self.w_k.backward(&cache.x, &dk, &mut grad.w_k)?);
        dx.add_assign(&self.w_v.backward(&cache.x, &dv, &mut grad.w_v)?);
        Ok(dx)
    }
}

impl<F: Scalar> Parameters<F> for WindowAttention<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.w_q.visit(&join(prefix, "w_q"), f);
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        self.w_o.visit(&join(prefix, "w_o"), f);
        f(join(prefix, "relative_position_bias"), &self.rel_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.w_q.visit_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        self.w_o.visit_mut(&join(prefix, "w_o"), f);
        f(join(prefix, "relative_position_bias"), &mut self.rel_bias);
    }
}

/// One transformer block: pre-norm (shifted-)window attention and pre-norm MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct SwinBlock<F> {
    pub norm1: LayerNorm<F>,
    pub attn: WindowAttention<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub shift: usize,
}

pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    fc1_in: Tensor<F>,
    fc1_out: Tensor<F>,
    fc2_in: Tensor<F>,
}

impl<F> BlockCache<F> {
    pub fn attention(&self) -> &AttentionCache<F> {
        &self.attn
    }
}

impl<F: Scalar> SwinBlock<F> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        num_heads: usize,
        window: usize,
        shift: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(channels),
            attn: WindowAttention::new(channels, num_heads, window, rng),
            norm2: LayerNorm::new(channels),
            fc1: Linear::trunc_normal(channels, hidden, true, rng),
            fc2: Linear::trunc_normal(hidden, channels, true, rng),
            shift,
        }
    }

    /// Applies the block to `(B, h, w, c)`. `mask` is required iff `shift > 0`.
    pub fn forward(&self, z: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<(Tensor<F>, BlockCache<F>)> {
        let (b, h, w, _) = z.dims4()?;
        let m = self.attn.window;
        let s = self.shift as isize;
        let (u, ln1) = self.norm1.forward(z)?;
        let shifted = cyclic_shift(&u, s)?;
        let windows = window_partition(&shifted, m)?;
        let (a, attn) = self.attn.forward(&windows, if s > 0 { mask } else { None })?;
        let a = cyclic_shift(&window_reverse(&a, m, b, h, w)?, -s)?;
        let mut z1 = z.clone();
        z1.add_assign(&a);
        let (fc1_in, ln2) = self.norm2.forward(&z1)?;
        let fc1_out = self.fc1.forward(&fc1_in)?;
        let fc2_in = gelu(&fc1_out);
        let mut out = self.fc2.forward(&fc2_in)?;
        out.add_assign(&z1);
        Ok((out, BlockCache { ln1, attn, ln2, fc1_in, fc1_out, fc2_in }))
    }

    pub fn backward(&self, cache: &BlockCache<F>, dout: &Tensor<F>, grad: &mut SwinBlock<F>) -> Result<Tensor<F>> {
        let (b, h, w, _) = dout.dims4()?;
        let m = self.attn.window;
        let s = self.shift as isize;
        let dg = self.fc2.backward(&cache.fc2_in, dout, &mut grad.fc2)?;
        let dh = gelu_backward(&cache.fc1_out, &dg);
        let dv = self.fc1.backward(&cache.fc1_in, &dh, &mut grad.fc1)?;
        let mut dz1 = dout.clone();
        dz1.add_assign(&self.norm2.backward(&cache.ln2, &dv, &mut grad.norm2));
        let da = window_partition(&cyclic_shift(&dz1, s)?, m)?;
        let dwin = self.attn.backward(&cache.attn, &da, &mut grad.attn)?;
        let du = cyclic_shift(&window_reverse(&dwin, m, b, h, w)?, -s)?;
        let mut dz = dz1;
        dz.add_assign(&self.norm1.backward(&cache.ln1, &du, &mut grad.norm1));
        Ok(dz)
    }
}

impl<F: Scalar> Parameters<F> for SwinBlock<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// Regular-then-shifted block pair applied to `z` (window `m`, shift `⌊m/2⌋`).
pub fn stb_pair_forward<F: Scalar>(z: &Tensor<F>, pair: [&SwinBlock<F>; 2], m: usize) -> Result<Tensor<F>> {
    let (_, h, w, _) = z.dims4()?;
    let (z, _) = pair[0].forward(z, None)?;
    let mask = if pair[1].shift > 0 { Some(shifted_window_mask(h, w, m, pair[1].shift)?) } else { None };
    Ok(pair[1].forward(&z, mask.as_ref())?.0)
}

/// 2×2 neighbourhood concatenation, normalization and linear reduction `4c → 2c`.
#[derive(Clone, Debug)]
pub struct PatchMerging<F> {
    pub norm: LayerNorm<F>,
    pub reduction: Linear<F>,
}

pub struct MergeCache<F> {
    ln: LayerNormCache<F>,
    normed: Tensor<F>,
}

/// Offsets `(dy, dx)` of the four concatenated neighbours, in channel-block order.
pub const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

impl<F: Scalar> PatchMerging<F> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        PatchMerging {
            norm: LayerNorm::new(4 * channels),
            reduction: Linear::trunc_normal(4 * channels, 2 * channels, false, rng),
        }
    }

    pub fn gather(z: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, h, w, c) = z.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("patch merging needs even dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, oh, ow, 4 * c]);
        let src = z.data();
        let dst = out.data_mut();
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    let d = ((bi * oh + y) * ow + x) * 4 * c;
                    for (slot, &(dy, dx)) in MERGE_ORDER.iter().enumerate() {
                        let s = ((bi * h + 2 * y + dy) * w + 2 * x + dx) * c;
                        dst[d + slot * c..d + (slot + 1) * c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        Ok(out)
    }

    fn scatter(g: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, oh, ow, c4) = g.dims4()?;
        let c = c4 / 4;
        let (h, w) = (oh * 2, ow * 2);
        let mut out = Tensor::zeros(&[b, h, w, c]);
        let src = g.data();
        let dst = out.data_mut();
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    let s = ((bi * oh + y) * ow + x) * c4;
                    for (slot, &(dy, dx)) in MERGE_ORDER.iter().enumerate() {
                        let d = ((bi * h + 2 * y + dy) * w + 2 * x + dx) * c;
                        dst[d..d + c].copy_from_slice(&src[s + slot * c..s + (slot + 1) * c]);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, z: &Tensor<F>) -> Result<(Tensor<F>, MergeCache<F>)> {
        let gathered = Self::gather(z)?;
        let (normed, ln) = self.norm.forward(&gathered)?;
        let out = self.reduction.forward(&normed)?;
        Ok((out, MergeCache { ln, normed }))
    }

    pub fn backward(&self, cache: &MergeCache<F>, dy: &Tensor<F>, grad: &mut PatchMerging<F>) -> Result<Tensor<F>> {
        let dn = self.reduction.backward(&cache.normed, dy, &mut grad.reduction)?;
        let dg = self.norm.backward(&cache.ln, &dn, &mut grad.norm);
        Self::scatter(&dg)
    }
}

impl<F: Scalar> Parameters<F> for PatchMerging<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.reduction.visit(&join(prefix, "reduction"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.reduction.visit_mut(&join(prefix, "reduction"), f);
    }
}

/// Rearranges `(B, H, W, 3)` into flattened `p×p×3` patches, `(B, H/p, W/p, 3p²)`,
/// flattened in (row, column, channel) order.
pub fn extract_patches<F: Scalar>(image: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let (b, h, w, c) = image.dims4()?;
    if c != 3 {
        return Err(shape_err!("expected RGB input, got {c} channels"));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("image {h}x{w} not divisible by patch size {p}"));
    }
    let (oh, ow) = (h / p, w / p);
    let pd = p * p * 3;
    let mut out = Tensor::zeros(&[b, oh, ow, pd]);
    let src = image.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let d = ((bi * oh + y) * ow + x) * pd;
                for py in 0..p {
                    let s = ((bi * h + y * p + py) * w + x * p) * 3;
                    dst[d + py * p * 3..d + (py + 1) * p * 3].copy_from_slice(&src[s..s + p * 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Linear patch embedding: every output vector is an affine map of one flattened patch.
pub fn patch_embed<F: Scalar>(image: &Tensor<F>, proj: &Linear<F>, patch: usize) -> Result<Tensor<F>> {
    validate_normalized(image)?;
    proj.forward(&extract_patches(image, patch)?)
}

#[derive(Clone, Debug)]
pub struct Stage<F> {
    pub blocks: Vec<SwinBlock<F>>,
    /// Patch merging feeding the next stage (absent after the last stage).
    pub downsample: Option<PatchMerging<F>>,
}

#[derive(Clone, Debug)]
pub struct Backbone<F> {
    pub patch_size: usize,
    pub patch_embed: Linear<F>,
    pub stages: Vec<Stage<F>>,
}

pub struct StageCache<F> {
    pub blocks: Vec<BlockCache<F>>,
    merge: Option<MergeCache<F>>,
}

pub struct BackboneCache<F> {
    patches: Tensor<F>,
    pub stages: Vec<StageCache<F>>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = crate::datamodel::derive_stage_shapes(config)?;
        let p = config.patch_size;
        let patch_embed = Linear::trunc_normal(p * p * 3, config.embed_dim, true, rng);
        let mut stages = Vec::with_capacity(4);
        for (s, &(h, w, c)) in shapes.iter().enumerate() {
            let (m, shift) = config.stage_window(h, w);
            let blocks = (0..config.depths[s])
                .map(|i| {
                    let sh = if i % 2 == 1 { shift } else { 0 };
                    SwinBlock::new(c, config.num_heads[s], m, sh, config.mlp_hidden(c), rng)
                })
                .collect();
            let downsample = (s < 3).then(|| PatchMerging::new(c, rng));
            stages.push(Stage { blocks, downsample });
        }
        Ok(Backbone { patch_size: p, patch_embed, stages })
    }

    /// Produces the four stage outputs `F1..F4`.
    pub fn forward(&self, image: &Tensor<F>) -> Result<[Tensor<F>; 4]> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(&self, image: &Tensor<F>) -> Result<([Tensor<F>; 4], BackboneCache<F>)> {
        validate_normalized(image)?;
        let patches = extract_patches(image, self.patch_size)?;
        let mut z = self.patch_embed.forward(&patches)?;
        let mut feats: Vec<Tensor<F>> = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            let (_, h, w, _) = z.dims4()?;
            let mut mask = None;
            let mut block_caches = Vec::with_capacity(stage.blocks.len());
            for (i, block) in stage.blocks.iter().enumerate() {
                if block.shift > 0 && mask.is_none() {
                    mask = Some(shifted_window_mask(h, w, block.attn.window, block.shift)?);
                }
                let (out, cache) = block
                    .forward(&z, mask.as_ref())
                    .map_err(|e| in_layer(e, &format!("stage{}.block{i}", s + 1)))?;
                z = out;
                block_caches.push(cache);
            }
            let merge = match &stage.downsample {
                Some(pm) => {
                    let (next, cache) = pm.forward(&z)?;
                    feats.push(std::mem::replace(&mut z, next));
                    Some(cache)
                }
                None => {
                    feats.push(z.clone());
                    None
                }
            };
            caches.push(StageCache { blocks: block_caches, merge });
        }
        let feats: [Tensor<F>; 4] = feats.try_into().map_err(|_| shape_err!("backbone must have four stages"))?;
        Ok((feats, BackboneCache { patches, stages: caches }))
    }

    /// Backpropagates gradients arriving at `F1..F4`.
    pub fn backward(&self, cache: &BackboneCache<F>, dfeats: &[Tensor<F>; 4], grad: &mut Backbone<F>) -> Result<()> {
        let mut carry: Option<Tensor<F>> = None;
        for s in (0..self.stages.len()).rev() {
            let stage = &self.stages[s];
            let sc = &cache.stages[s];
            let mut dz = dfeats[s].clone();
            if let (Some(pm), Some(mc), Some(dnext)) = (&stage.downsample, &sc.merge, carry.take()) {
                let gpm = grad.stages[s].downsample.as_mut().expect("gradient mirrors model");
                dz.add_assign(&pm.backward(mc, &dnext, gpm)?);
            }
            for (i, block) in stage.blocks.iter().enumerate().rev() {
                dz = block.backward(&sc.blocks[i], &dz, &mut grad.stages[s].blocks[i])?;
            }
            carry = Some(dz);
        }
        let dembed = carry.expect("at least one stage");
        self.patch_embed.backward_params(&cache.patches, &dembed, &mut grad.patch_embed)
    }
}

impl<F: Scalar> Parameters<F> for Backbone<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stage{}", s + 1));
            for (i, b) in stage.blocks.iter().enumerate() {
                b.visit(&join(&sp, &format!("block{i}")), f);
            }
            if let Some(pm) = &stage.downsample {
                pm.visit(&join(&sp, "downsample"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let sp = join(prefix, &format!("stage{}", s + 1));
            for (i, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&sp, &format!("block{i}")), f);
            }
            if let Some(pm) = &mut stage.downsample {
                pm.visit_mut(&join(&sp, "downsample"), f);
            }
        }
    }
}

pub(crate) fn in_layer(e: Error, layer: &str) -> Error {
    match e {
        Error::Numerical { layer: inner, detail } => Error::Numerical { layer: format!("{layer}.{inner}"), detail },
        other => other,
    }
}
