//! Independent reference implementations used by the property and
//! acceptance tests. Each one is written from the definition, with plain
//! loops and no code shared with the library's fast paths.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;

use issc_core::swin::{cyclic_shift, shifted_window_mask, window_partition, window_reverse, WindowAttention};
use issc_core::tensor::Tensor;

fn linear(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    (0..n_out)
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..n_in {
                s += x[i] * w.data()[i * n_out + o];
            }
            s
        })
        .collect()
}

/// Attention over the shifted window partition of one `(h, w, c)` map,
/// computed without any cyclic shift or mask: the partition boundaries sit
/// at `shift + k·M` in the original coordinates, so border regions are
/// smaller than a window. Each query attends to the tokens of its region.
pub fn shifted_partition_attention(x: &[f64], h: usize, w: usize, attn: &WindowAttention<f64>, shift: usize) -> Vec<f64> {
    let c = attn.channels();
    let m = attn.window;
    let nh = attn.num_heads;
    let d = c / nh;
    let span = 2 * m - 1;
    let region = |i: usize| if i < shift { 0 } else { 1 + (i - shift) / m };
    let tok = |i: usize| &x[i * c..(i + 1) * c];
    let q: Vec<Vec<f64>> = (0..h * w).map(|i| linear(tok(i), &attn.w_q.weight, None)).collect();
    let k: Vec<Vec<f64>> = (0..h * w).map(|i| linear(tok(i), &attn.w_k.weight, None)).collect();
    let v: Vec<Vec<f64>> = (0..h * w).map(|i| linear(tok(i), &attn.w_v.weight, None)).collect();
    let mut out = vec![0.0; h * w * c];
    for qi in 0..h * w {
        let (qy, qx) = (qi / w, qi % w);
        let keys: Vec<usize> = (0..h * w)
            .filter(|&ki| region(ki / w) == region(qy) && region(ki % w) == region(qx))
            .collect();
        let mut ctx = vec![0.0; c];
        for head in 0..nh {
            let logits: Vec<f64> = keys
                .iter()
                .map(|&ki| {
                    let (ky, kx) = (ki / w, ki % w);
                    let dot: f64 = (0..d).map(|j| q[qi][head * d + j] * k[ki][head * d + j]).sum();
                    let off = (qy + m - 1 - ky) * span + (qx + m - 1 - kx);
                    dot / (d as f64).sqrt() + attn.rel_bias.data()[off * nh + head]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (p, &ki) in e.iter().zip(&keys) {
                for j in 0..d {
                    ctx[head * d + j] += p / z * v[ki][head * d + j];
                }
            }
        }
        let y = linear(&ctx, &attn.w_o.weight, attn.w_o.bias.as_ref());
        out[qi * c..(qi + 1) * c].copy_from_slice(&y);
    }
    out
}

/// The library path: cyclic shift, window partition, masked window
/// attention, reverse and unshift. Returns the output and the attention rows.
pub fn sw_msa(x: &Tensor<f64>, attn: &WindowAttention<f64>, shift: usize) -> (Tensor<f64>, Vec<f64>) {
    let (b, h, w, _) = x.dims4().unwrap();
    let m = attn.window;
    let s = shift as isize;
    let mask = (shift > 0).then(|| shifted_window_mask::<f64>(h, w, m, shift).unwrap());
    let windows = window_partition(&cyclic_shift(x, s).unwrap(), m).unwrap();
    let (a, cache) = attn.forward(&windows, mask.as_ref()).unwrap();
    let y = cyclic_shift(&window_reverse(&a, m, b, h, w).unwrap(), -s).unwrap();
    (y, cache.probs().to_vec())
}

/// Flat-loop mean of `−ln max(p_true, 1e-12)` over labelled pixels.
pub fn flat_loss(probs: &[f64], labels: &[u8], n_cls: usize, ignore: u8) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..labels.len() {
        if labels[i] == ignore {
            continue;
        }
        total += -probs[i * n_cls + labels[i] as usize].max(1e-12).ln();
        count += 1;
    }
    total / count as f64
}

/// OHEM by sorting: hard pixels (p_true < threshold) if there are at least
/// `min_kept` of them, else the `min_kept` least confident labelled pixels.
pub fn ohem_by_sorting(probs: &[f64], labels: &[u8], n_cls: usize, ignore: u8, threshold: f64, min_kept: usize) -> BTreeSet<usize> {
    let mut valid: Vec<(f64, usize)> = (0..labels.len())
        .filter(|&i| labels[i] != ignore)
        .map(|i| (probs[i * n_cls + labels[i] as usize], i))
        .collect();
    let hard: BTreeSet<usize> = valid.iter().filter(|(p, _)| *p < threshold).map(|&(_, i)| i).collect();
    if hard.len() >= min_kept {
        return hard;
    }
    valid.sort_by(|a, b| a.0.total_cmp(&b.0));
    valid.iter().take(min_kept).map(|&(_, i)| i).collect()
}

/// `mean_c |P_c ∩ G_c| / |P_c ∪ G_c|` over classes with a non-empty union,
/// with pixel sets built explicitly; ignored ground truth is dropped.
pub fn set_miou(pred: &[u8], gt: &[u8], n_cls: usize, ignore: u8) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..n_cls as u8 {
        let p: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] != ignore && pred[i] == c).collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// `10·log10(Σx² / Σ(y−x)²)`.
pub fn snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let mut ps = 0.0;
    let mut pn = 0.0;
    for (a, b) in clean.iter().zip(noisy) {
        ps += a * a;
        pn += (b - a) * (b - a);
    }
    10.0 * (ps / pn).log10()
}
