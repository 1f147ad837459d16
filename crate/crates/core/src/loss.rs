//! Per-pixel cross-entropy, its batch mean and online hard example mining.

use crate::datamodel::SegMask;
use crate::decoder::softmax;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to the true-class probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `−log p_true` for one pixel; zero for ignored pixels.
pub fn pixel_ce<F: Scalar>(p: &[F], label: u8, ignore_index: u8) -> F {
    if label == ignore_index {
        return F::zero();
    }
    let floor = F::from_f64_lossy(PROB_FLOOR);
    -(p[label as usize].max(floor)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ohem {
    /// Pixels whose true-class probability is below this are "hard".
    pub threshold: f64,
    /// Minimum number of pixels kept per batch.
    pub min_kept: usize,
}

fn check_shapes<F: Scalar>(probs: &Tensor<F>, labels: &SegMask) -> Result<usize> {
    let (b, h, w, n) = probs.dims4()?;
    if (b, h, w) != (labels.batch, labels.height, labels.width) {
        return Err(shape_err!(
            "probabilities {:?} vs labels ({},{},{})",
            probs.shape(),
            labels.batch,
            labels.height,
            labels.width
        ));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l != labels.ignore_index && l as usize >= n) {
        return Err(Error::Validation(format!("label {bad} outside [0, {n})")));
    }
    Ok(n)
}

/// Flat indices of the pixels that contribute to the loss.
///
/// Keeps every labelled pixel whose true-class probability is below the
/// threshold. When fewer than `min_kept` qualify, keeps the `min_kept`
/// least-confident labelled pixels instead (all of them if there are fewer).
pub fn ohem_filter<F: Scalar>(probs: &Tensor<F>, labels: &SegMask, ohem: Ohem) -> Result<Vec<usize>> {
    if ohem.min_kept == 0 {
        return Err(Error::Config("OHEM min_kept must be at least 1".into()));
    }
    let n = check_shapes(probs, labels)?;
    let thr = F::from_f64_lossy(ohem.threshold);
    let mut valid: Vec<(F, usize)> = labels
        .data
        .iter()
        .enumerate()
        .filter(|&(_, &l)| l != labels.ignore_index)
        .map(|(i, &l)| (probs.data()[i * n + l as usize], i))
        .collect();
    let hard: Vec<usize> = valid.iter().filter(|(p, _)| *p < thr).map(|&(_, i)| i).collect();
    if hard.len() >= ohem.min_kept {
        return Ok(hard);
    }
    valid.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = valid.into_iter().take(ohem.min_kept).map(|(_, i)| i).collect();
    kept.sort_unstable();
    Ok(kept)
}

fn selection<F: Scalar>(probs: &Tensor<F>, labels: &SegMask, ohem: Option<Ohem>) -> Result<Vec<usize>> {
    let sel = match ohem {
        Some(o) => ohem_filter(probs, labels, o)?,
        None => {
            check_shapes(probs, labels)?;
            (0..labels.data.len()).filter(|&i| labels.data[i] != labels.ignore_index).collect()
        }
    };
    if sel.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(sel)
}

/// Mean pixel cross-entropy over the selected (default: all labelled) pixels.
pub fn batch_loss<F: Scalar>(probs: &Tensor<F>, labels: &SegMask, ohem: Option<Ohem>) -> Result<F> {
    let n = probs.last_dim();
    let sel = selection(probs, labels, ohem)?;
    let total: F = sel
        .iter()
        .map(|&i| pixel_ce(&probs.data()[i * n..(i + 1) * n], labels.data[i], labels.ignore_index))
        .sum();
    Ok(total / F::from_usize(sel.len()).unwrap())
}

pub struct LossOutput<F> {
    pub loss: F,
    pub dlogits: Tensor<F>,
    pub selected: usize,
    pub probs: Tensor<F>,
}

/// Softmax, loss and `dL/dlogits` in one pass. The OHEM selection is
/// treated as constant when differentiating.
pub fn loss_and_grad<F: Scalar>(logits: &Tensor<F>, labels: &SegMask, ohem: Option<Ohem>) -> Result<LossOutput<F>> {
    let mut probs = logits.clone();
    softmax(&mut probs);
    let n = probs.last_dim();
    let sel = selection(&probs, labels, ohem)?;
    let inv = F::one() / F::from_usize(sel.len()).unwrap();
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = F::zero();
    for &i in &sel {
        let p = &probs.data()[i * n..(i + 1) * n];
        let l = labels.data[i] as usize;
        total += pixel_ce(p, labels.data[i], labels.ignore_index);
        let g = &mut dlogits.data_mut()[i * n..(i + 1) * n];
        for (j, (gv, &pv)) in g.iter_mut().zip(p).enumerate() {
            *gv = (pv - if j == l { F::one() } else { F::zero() }) * inv;
        }
    }
    Ok(LossOutput { loss: total * inv, dlogits, selected: sel.len(), probs })
}
