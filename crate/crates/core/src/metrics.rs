//! Confusion-matrix based per-class IoU and mIoU.

use std::path::Path;

use crate::datamodel::SegMask;
use crate::error::{shape_err, Error, Result};

/// Rows are ground-truth classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_cls: usize,
    counts: Vec<u64>,
    /// Labelled pixels whose prediction was lost entirely (decode failures).
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_cls: usize) -> Self {
        ConfusionMatrix { n_cls, counts: vec![0; n_cls * n_cls], missed: vec![0; n_cls] }
    }

    pub fn n_cls(&self) -> usize {
        self.n_cls
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_cls + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    /// Adds one `(pred, gt)` pair; ignored ground-truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if (pred.batch, pred.height, pred.width) != (gt.batch, gt.height, gt.width) {
            return Err(shape_err!(
                "prediction ({},{},{}) vs ground truth ({},{},{})",
                pred.batch,
                pred.height,
                pred.width,
                gt.batch,
                gt.height,
                gt.width
            ));
        }
        let n = self.n_cls;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == gt.ignore_index {
                continue;
            }
            if g as usize >= n {
                return Err(Error::Validation(format!("ground-truth label {g} outside [0, {n})")));
            }
            if p as usize >= n {
                return Err(Error::Validation(format!("predicted label {p} outside [0, {n})")));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    /// Counts every labelled ground-truth pixel as a miss: the prediction
    /// matches no class, so each present class scores a false negative.
    pub fn accumulate_failure(&mut self, gt: &SegMask) -> Result<()> {
        let n = self.n_cls;
        for &g in &gt.data {
            if g == gt.ignore_index {
                continue;
            }
            if g as usize >= n {
                return Err(Error::Validation(format!("ground-truth label {g} outside [0, {n})")));
            }
            self.missed[g as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_cls != self.n_cls {
            return Err(shape_err!("merging {}-class into {}-class matrix", other.n_cls, self.n_cls));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        let n = self.n_cls;
        self.counts[i * n..(i + 1) * n].iter().sum::<u64>() + self.missed[i]
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.n_cls).map(|i| self.get(i, j)).sum()
    }

    /// `IoU_i = TP / (TP + FP + FN)`; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n_cls)
            .map(|i| {
                let tp = self.get(i, i);
                let union = self.row_sum(i) + self.col_sum(i) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over defined classes, with the number of excluded classes.
    pub fn miou_with_excluded(&self) -> Result<(f64, usize)> {
        let ious = self.per_class_iou();
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::Validation("mIoU undefined: no class occurs in prediction or ground truth".into()));
        }
        Ok((defined.iter().sum::<f64>() / defined.len() as f64, ious.len() - defined.len()))
    }

    pub fn miou(&self) -> Result<f64> {
        Ok(self.miou_with_excluded()?.0)
    }

    /// Writes `class,iou,defined` rows plus a `miou,excluded_classes` summary.
    pub fn write_report(&self, path: &Path) -> Result<()> {
        let (miou, excluded) = self.miou_with_excluded()?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "iou", "defined"])?;
        for (i, iou) in self.per_class_iou().into_iter().enumerate() {
            w.write_record([i.to_string(), format!("{:.6}", iou.unwrap_or(0.0)), iou.is_some().to_string()])?;
        }
        let n = self.n_cls;
        w.write_record(["mean".to_string(), format!("{miou:.6}"), format!("{}/{n}", n - excluded)])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// mIoU averaged per image rather than over the pooled matrix.
pub fn per_image_miou(preds: &[SegMask], gts: &[SegMask], n_cls: usize) -> Result<f64> {
    let mut acc = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let mut cm = ConfusionMatrix::new(n_cls);
        cm.accumulate(p, g)?;
        acc += cm.miou()?;
    }
    Ok(acc / preds.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(data: &[u8], w: usize) -> SegMask {
        SegMask::new(1, data.len() / w, w, data.to_vec()).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let gt = mask(&[0, 1, 2, 2], 2);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&gt, &gt).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(cm.get(i, j) > 0, i == j && i < 3);
            }
        }
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&mask(&[3], 1), &mask(&[2], 1)).unwrap();
        assert_eq!(cm.get(2, 3), 1);
        assert_eq!(cm.total(), 1);
        assert!(cm.accumulate(&mask(&[3, 3], 2), &mask(&[2], 1)).is_err());
    }

    #[test]
    fn iou_examples() {
        // class 1: 4 gt pixels, prediction covers 2 of them plus 2 false positives
        let gt = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        let pred = mask(&[1, 1, 0, 0, 1, 1, 0, 0], 4);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        let iou = cm.per_class_iou();
        assert!((iou[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou[2], None);

        let mut two = ConfusionMatrix::new(2);
        // class 0 IoU 1/3, class 1 IoU 1.0 is impossible with shared pixels; use disjoint images
        two.accumulate(&mask(&[0, 1, 1], 3), &mask(&[0, 0, 0], 3)).unwrap();
        let iou = two.per_class_iou();
        assert!((iou[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou[1], Some(0.0));
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = mask(&[0, 1, 2, 3], 2);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&mask(&[1, 2, 3, 0], 2), &gt).unwrap();
        assert_eq!(cm.miou().unwrap(), 0.0);
        assert!(ConfusionMatrix::new(3).miou().is_err());
    }

    #[test]
    fn mean_of_one_third_and_one() {
        // class 0: 3 gt pixels, 1 predicted correctly, 2 predicted as class 1 → 1/3
        // class 1: 5 gt pixels all correct, plus those 2 false positives → 5/7
        // Build the stated (1/3, 1.0) pair with the misses on an undefined-free third class.
        let mut cm = ConfusionMatrix::new(3);
        cm.counts = vec![1, 0, 2, 0, 5, 0, 0, 0, 0];
        let ious = cm.per_class_iou();
        assert!((ious[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ious[1], Some(1.0));
        assert_eq!(ious[2], Some(0.0));
        let mut two = ConfusionMatrix::new(2);
        two.counts = vec![1, 0, 0, 5];
        two.missed = vec![2, 0];
        assert!((two.miou().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn failures_count_as_misses() {
        let gt = mask(&[0, 0, 1, 1], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate_failure(&gt).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(0.0), Some(0.0)]);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn report_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let gt = mask(&[0, 1, 1, 1], 2);
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&gt, &gt).unwrap();
        cm.write_report(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,iou,defined");
        assert_eq!(lines.len(), 1 + 5 + 1);
        assert_eq!(lines[6], "mean,1.000000,2/5");
    }
}
