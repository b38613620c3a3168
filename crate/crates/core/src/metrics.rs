//! Classification and segmentation evaluation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `K × K` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::dim("confusion matrix rows must form a square"));
        }
        Ok(Self { classes: k, counts: rows.iter().flatten().copied().collect() })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::Label { index: 0, label: truth.max(predicted), classes: self.classes });
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn transpose(&self) -> Self {
        let k = self.classes;
        let mut t = Self::new(k);
        for i in 0..k {
            for j in 0..k {
                t.counts[j * k + i] = self.get(i, j);
            }
        }
        t
    }
}

/// `(accuracy, macro F1)`. A class that is neither present nor predicted
/// scores F1 = 0.
pub fn classify_metrics(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Evaluation("confusion matrix is empty".into()));
    }
    let k = cm.classes();
    let accuracy = cm.trace() as f64 / total as f64;
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = cm.get(c, c) as f64;
        let predicted: u64 = (0..k).map(|r| cm.get(r, c)).sum();
        let actual: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        // 2PR / (P + R) with a single rounding.
        if predicted + actual > 0 {
            f1_sum += 2.0 * tp / (predicted + actual) as f64;
        }
    }
    Ok((accuracy, f1_sum / k as f64))
}

/// Foreground pixel counts, aggregated across batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl SegCounts {
    pub fn from_masks(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::dim(format!("prediction {:?} and ground truth {:?} differ", pred.shape(), gt.shape())));
        }
        let mut counts = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
                return Err(Error::Data(format!("non-binary mask values ({p}, {g})")));
            }
            let (p, g) = (p == 1.0, g == 1.0);
            counts.tp += u64::from(p && g);
            counts.fp += u64::from(p && !g);
            counts.fn_ += u64::from(!p && g);
        }
        Ok(counts)
    }

    pub fn merge(&mut self, other: SegCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(iou, dice, f1)`; an empty union scores 1 on all three.
    pub fn scores(&self) -> (f64, f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if tp + fp + fn_ == 0.0 {
            return (1.0, 1.0, 1.0);
        }
        let iou = tp / (tp + fp + fn_);
        let dice = 2.0 * tp / (2.0 * tp + fp + fn_);
        (iou, dice, dice)
    }
}

/// `(iou, dice, f1)` of binary masks, counting over the whole batch.
pub fn seg_metrics(pred_masks: &Tensor, gt_masks: &Tensor) -> Result<(f64, f64, f64)> {
    Ok(SegCounts::from_masks(pred_masks, gt_masks)?.scores())
}

/// Probability threshold for turning sigmoid outputs into a mask.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binarizes segmentation logits at `sigmoid(x) >= threshold`.
pub fn threshold_logits(seg_logits: &Tensor, threshold: f64) -> Tensor {
    let data = seg_logits.data().iter().map(|&x| f64::from(crate::tensor::sigmoid(x) >= threshold)).collect();
    Tensor::new(seg_logits.shape(), data).expect("same shape")
}

pub const OVERALL_DEFINITION: &str = "mean(cls_f1,seg_f1)";

/// Summary score: arithmetic mean of classification and segmentation F1.
pub fn overall(cls_f1: f64, seg_f1: f64) -> f64 {
    (cls_f1 + seg_f1) / 2.0
}

/// One evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub cls_f1_macro: f64,
    pub seg_iou: f64,
    pub seg_dice: f64,
    pub seg_f1: f64,
    pub overall: f64,
    pub n_samples: usize,
    pub overall_definition: &'static str,
}

impl MetricsReport {
    pub fn from_counts(cm: &ConfusionMatrix, seg: &SegCounts) -> Result<Self> {
        let (accuracy, cls_f1_macro) = classify_metrics(cm)?;
        let (seg_iou, seg_dice, seg_f1) = seg.scores();
        Ok(Self {
            accuracy,
            cls_f1_macro,
            seg_iou,
            seg_dice,
            seg_f1,
            overall: overall(cls_f1_macro, seg_f1),
            n_samples: cm.total() as usize,
            overall_definition: OVERALL_DEFINITION,
        })
    }

    pub const CSV_HEADER: &'static str = "accuracy,cls_f1,iou,dice,seg_f1,overall,n_samples,lambda,seed,epoch";

    /// The six metric columns plus `n_samples`, comma-separated.
    pub fn metric_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.accuracy, self.cls_f1_macro, self.seg_iou, self.seg_dice, self.seg_f1, self.overall, self.n_samples
        )
    }

    pub fn csv_row(&self, lambda: f64, seed: u64, epoch: usize) -> String {
        let mut row = self.metric_fields();
        write!(row, ",{lambda},{seed},{epoch}").expect("string write");
        row
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "accuracy={:.4} cls_f1={:.4} iou={:.4} dice={:.4} seg_f1={:.4} overall={:.4} (n={})",
            self.accuracy, self.cls_f1_macro, self.seg_iou, self.seg_dice, self.seg_f1, self.overall, self.n_samples
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_classifier() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 5]]).unwrap();
        assert_eq!(classify_metrics(&cm).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn two_class_hand_fixture() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![0, 1]]).unwrap();
        let (acc, f1) = classify_metrics(&cm).unwrap();
        assert_eq!(acc, 0.75);
        let expect = (0.8 + 2.0 / 3.0) / 2.0;
        assert!((f1 - expect).abs() < 1e-15);
    }

    #[test]
    fn absent_predicted_class_scores_zero() {
        // Everything predicted as class 0.
        let cm = ConfusionMatrix::from_rows(&[vec![2, 0, 0], vec![3, 0, 0], vec![1, 0, 0]]).unwrap();
        let (acc, f1) = classify_metrics(&cm).unwrap();
        assert_eq!(acc, 2.0 / 6.0);
        // class 0: P = 2/6, R = 1 -> F1 = 0.5; others 0.
        assert!((f1 - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(classify_metrics(&ConfusionMatrix::new(3)), Err(Error::Evaluation(_))));
    }

    #[test]
    fn seg_hand_counts() {
        // pixels a b c d: pred {a,b,c}, gt {b,c,d}
        let (iou, dice, f1) = seg_metrics(&mask(&[1., 1., 1., 0.]), &mask(&[0., 1., 1., 1.])).unwrap();
        assert_eq!(iou, 0.5);
        assert_eq!(dice, 2.0 / 3.0);
        assert_eq!(f1, dice);
    }

    #[test]
    fn seg_identical_and_empty() {
        let m = mask(&[1., 0., 1., 0.]);
        assert_eq!(seg_metrics(&m, &m).unwrap(), (1.0, 1.0, 1.0));
        let z = mask(&[0.; 4]);
        assert_eq!(seg_metrics(&z, &z).unwrap(), (1.0, 1.0, 1.0));
        assert!(matches!(seg_metrics(&m, &mask(&[0.; 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn overall_is_mean() {
        assert_eq!(overall(1.0, 1.0), 1.0);
        assert!((overall(0.6, 0.8) - 0.7).abs() < 1e-15);
        assert_eq!(overall(0.0, 0.42), 0.21);
    }

    #[test]
    fn csv_row_matches_header() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        let r = MetricsReport::from_counts(&cm, &SegCounts { tp: 1, fp: 0, fn_: 1 }).unwrap();
        let row = r.csv_row(0.7, 3, 5);
        assert_eq!(row.split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
        assert!(row.ends_with(",0.7,3,5"));
    }
}
