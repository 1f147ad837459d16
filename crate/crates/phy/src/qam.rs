//! Square Gray-mapped QAM with unit average symbol energy, hard demapping
//! and exact (full-sum) bit LLRs.

use num_complex::Complex64;

use issc_core::error::{Error, Result};

/// Magnitude used for hard-decision LLRs when the noise level is zero.
pub const SATURATED_LLR: f64 = 50.0;

#[derive(Clone, Debug)]
pub struct Constellation {
    pub order: usize,
    pub bits_per_symbol: usize,
    /// `points[label]`, where `label` packs the symbol's bits MSB first.
    pub points: Vec<Complex64>,
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

fn gray_inverse(mut g: usize) -> usize {
    let mut i = 0;
    while g != 0 {
        i ^= g;
        g >>= 1;
    }
    i
}

impl Constellation {
    /// Orders 4, 16 and 64. The first half of each label selects the
    /// in-phase level, the second half the quadrature level, each Gray coded.
    pub fn new(order: usize) -> Result<Self> {
        if ![4, 16, 64].contains(&order) {
            return Err(Error::Config(format!("unsupported QAM order {order}")));
        }
        let bits_per_symbol = order.trailing_zeros() as usize;
        let half = bits_per_symbol / 2;
        let levels = 1usize << half;
        let energy = 2.0 * ((levels * levels) as f64 - 1.0) / 3.0;
        let scale = 1.0 / energy.sqrt();
        let amp = |g: usize| (2.0 * gray_inverse(g) as f64 - (levels as f64 - 1.0)) * scale;
        let points = (0..order)
            .map(|label| Complex64::new(amp(label >> half), amp(label & (levels - 1))))
            .collect();
        Ok(Constellation { order, bits_per_symbol, points })
    }

    /// Label of the point at in-phase level `i` and quadrature level `q`.
    pub fn label_at(&self, i: usize, q: usize) -> usize {
        let half = self.bits_per_symbol / 2;
        (gray(i) << half) | gray(q)
    }

    pub fn levels_per_axis(&self) -> usize {
        1 << (self.bits_per_symbol / 2)
    }

    /// Maps bits to symbols, zero-padding the tail to a whole symbol.
    /// Returns the symbols and the number of pad bits.
    pub fn modulate(&self, bits: &[u8]) -> (Vec<Complex64>, usize) {
        let m = self.bits_per_symbol;
        let pad = (m - bits.len() % m) % m;
        let symbols = bits
            .chunks(m)
            .map(|chunk| {
                let label = (0..m).fold(0, |acc, j| (acc << 1) | chunk.get(j).copied().unwrap_or(0) as usize);
                self.points[label]
            })
            .collect();
        (symbols, pad)
    }

    fn nearest(&self, y: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (y - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Minimum-distance demapping.
    pub fn demodulate_hard(&self, symbols: &[Complex64]) -> Vec<u8> {
        let m = self.bits_per_symbol;
        let mut bits = Vec::with_capacity(symbols.len() * m);
        for &y in symbols {
            let label = self.nearest(y);
            bits.extend((0..m).rev().map(|j| ((label >> j) & 1) as u8));
        }
        bits
    }

    /// `LLR_b = ln Σ_{s: b=0} e^{-|y-s|²/σ²} − ln Σ_{s: b=1} e^{-|y-s|²/σ²}`,
    /// with `noise_var = σ²` the total complex noise variance. Positive
    /// values favour bit 0. A zero variance gives saturated hard decisions.
    pub fn llr(&self, symbols: &[Complex64], noise_var: f64) -> Vec<f64> {
        let m = self.bits_per_symbol;
        let mut out = Vec::with_capacity(symbols.len() * m);
        if !(noise_var > 0.0) {
            for b in self.demodulate_hard(symbols) {
                out.push(if b == 0 { SATURATED_LLR } else { -SATURATED_LLR });
            }
            return out;
        }
        let mut metric = vec![0.0; self.order];
        for &y in symbols {
            for (mv, p) in metric.iter_mut().zip(&self.points) {
                *mv = -(y - p).norm_sqr() / noise_var;
            }
            for j in (0..m).rev() {
                let (mut max0, mut max1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for (label, &mv) in metric.iter().enumerate() {
                    if (label >> j) & 1 == 0 {
                        max0 = max0.max(mv);
                    } else {
                        max1 = max1.max(mv);
                    }
                }
                let (mut s0, mut s1) = (0.0, 0.0);
                for (label, &mv) in metric.iter().enumerate() {
                    if (label >> j) & 1 == 0 {
                        s0 += (mv - max0).exp();
                    } else {
                        s1 += (mv - max1).exp();
                    }
                }
                out.push((max0 + s0.ln()) - (max1 + s1.ln()));
            }
        }
        out
    }
}
