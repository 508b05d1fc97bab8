//! Confusion counts, the seven evaluation metrics and the confusion colormap.
//!
//! A denominator of zero scores 1 when the quantity is vacuous (no positive
//! pixels exist and none are predicted) and 0 otherwise, so an empty
//! prediction on an empty scene counts as perfect.

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Counts past this bound are rejected to keep every sum representable as `i64`.
const COUNT_LIMIT: u64 = i64::MAX as u64;

impl ConfusionCounts {
    pub const ZERO: Self = Self {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };

    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Accumulates one pixel.
    #[inline]
    pub fn record(&mut self, pred: bool, gt: bool) {
        match (pred, gt) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Per-pixel counts of binary masks of equal size.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    pred.check_dims("confusion", gt)?;
    confusion_slices(pred.pixels(), gt.pixels())
}

/// Slice form of [`confusion`]; nonzero means changed.
pub fn confusion_slices(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(crate::error::shape_mismatch("confusion", &[pred.len()], &[gt.len()]));
    }
    let mut c = ConfusionCounts::ZERO;
    for (&p, &g) in pred.iter().zip(gt) {
        c.record(p != 0, g != 0);
    }
    Ok(c)
}

/// Fieldwise sum; errors once any count or the total would pass `2^63 - 1`.
pub fn merge(a: ConfusionCounts, b: ConfusionCounts) -> Result<ConfusionCounts> {
    let add = |x: u64, y: u64| {
        x.checked_add(y)
            .filter(|&s| s <= COUNT_LIMIT)
            .ok_or(Error::Overflow)
    };
    let c = ConfusionCounts {
        tp: add(a.tp, b.tp)?,
        fp: add(a.fp, b.fp)?,
        fn_: add(a.fn_, b.fn_)?,
        tn: add(a.tn, b.tn)?,
    };
    let total = add(c.tp, c.fp).and_then(|s| add(s, c.fn_)).and_then(|s| add(s, c.tn))?;
    debug_assert!(total <= COUNT_LIMIT);
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub miou: f64,
    pub oa: f64,
    pub kappa: f64,
}

impl MetricReport {
    /// Field names in report order.
    pub const FIELDS: [&'static str; 7] = ["P", "R", "F1", "OA", "mIOU", "IOU", "Kappa"];

    /// Values in the order of [`MetricReport::FIELDS`].
    pub fn values(&self) -> [f64; 7] {
        [
            self.precision,
            self.recall,
            self.f1,
            self.oa,
            self.miou,
            self.iou,
            self.kappa,
        ]
    }
}

/// `num / den`, or the vacuous-case value when `den == 0`.
fn ratio(num: u64, den: u64, vacuous: bool) -> f64 {
    if den == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: ConfusionCounts) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidInput("metrics over zero pixels".into()));
    }
    let ConfusionCounts { tp, fp, fn_, tn } = c;
    let no_positives = tp + fp + fn_ == 0;
    let precision = ratio(tp, tp + fp, no_positives);
    let recall = ratio(tp, tp + fn_, no_positives);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let iou = ratio(tp, tp + fp + fn_, no_positives);
    let iou_neg = ratio(tn, tn + fp + fn_, fp + fn_ + tn == 0);
    let miou = 0.5 * (iou + iou_neg);
    let n = total as f64;
    let oa = (tp + tn) as f64 / n;
    let pe = ((tp + fp) as f64 * (tp + fn_) as f64 + (fn_ + tn) as f64 * (fp + tn) as f64) / (n * n);
    let kappa = if 1.0 - pe <= 0.0 {
        1.0
    } else {
        ((oa - pe) / (1.0 - pe)).clamp(-1.0, 1.0)
    };
    Ok(MetricReport {
        precision,
        recall,
        f1,
        iou,
        miou,
        oa,
        kappa,
    })
}

pub const COLOR_TP: [u8; 3] = [0, 0, 255];
pub const COLOR_FP: [u8; 3] = [255, 0, 0];
pub const COLOR_FN: [u8; 3] = [255, 165, 0];
pub const COLOR_TN: [u8; 3] = [173, 216, 230];

/// Confusion colormap: TP blue, FP red, FN orange, TN light blue.
pub fn colorize(pred: &Mask, gt: &Mask) -> Result<RgbImage> {
    pred.check_dims("colorize", gt)?;
    let data = pred
        .pixels()
        .iter()
        .zip(gt.pixels())
        .map(|(&p, &g)| match (p != 0, g != 0) {
            (true, true) => COLOR_TP,
            (true, false) => COLOR_FP,
            (false, true) => COLOR_FN,
            (false, false) => COLOR_TN,
        })
        .collect();
    Grid::from_vec(pred.width(), pred.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let r = compute_metrics(ConfusionCounts::new(30, 0, 0, 70)).unwrap();
        assert_eq!(r.values(), [1.0; 7]);
    }

    #[test]
    fn worked_example() {
        let r = compute_metrics(ConfusionCounts::new(50, 10, 10, 930)).unwrap();
        assert!((r.precision - 50.0 / 60.0).abs() < 1e-12);
        assert!((r.recall - 50.0 / 60.0).abs() < 1e-12);
        assert!((r.f1 - 50.0 / 60.0).abs() < 1e-12);
        assert!((r.iou - 50.0 / 70.0).abs() < 1e-12);
        assert!((r.oa - 0.98).abs() < 1e-12);
        // (50/70 + 930/950) / 2
        assert!((r.miou - 0.846_616_541_353_383).abs() < 1e-12);
        // Pe = (60*60 + 940*940) / 1000^2 = 0.8872
        assert!((r.kappa - 0.822_695_035_460_992_8).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_is_perfect() {
        let r = compute_metrics(ConfusionCounts::new(0, 0, 0, 100)).unwrap();
        assert_eq!(r.values(), [1.0; 7]);
    }

    #[test]
    fn total_disagreement() {
        let r = compute_metrics(ConfusionCounts::new(0, 40, 60, 0)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou, r.oa), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(r.kappa < 0.0);
    }

    #[test]
    fn zero_total_rejected() {
        assert!(compute_metrics(ConfusionCounts::ZERO).is_err());
    }

    #[test]
    fn merge_overflow() {
        let big = ConfusionCounts::new(COUNT_LIMIT, 0, 0, 0);
        assert_eq!(merge(big, ConfusionCounts::new(1, 0, 0, 0)), Err(Error::Overflow));
        let half = ConfusionCounts::new(COUNT_LIMIT / 2 + 1, 0, 0, 0);
        let other = ConfusionCounts::new(0, 0, 0, COUNT_LIMIT / 2 + 1);
        assert_eq!(merge(half, other), Err(Error::Overflow));
        assert_eq!(merge(big, ConfusionCounts::ZERO), Ok(big));
    }

    #[test]
    fn colors() {
        let ones = Grid::filled(3, 2, 1u8);
        let zeros = Grid::filled(3, 2, 0u8);
        assert!(colorize(&ones, &ones).unwrap().pixels().iter().all(|&c| c == COLOR_TP));
        assert!(colorize(&ones, &zeros).unwrap().pixels().iter().all(|&c| c == COLOR_FP));
        assert!(colorize(&zeros, &ones).unwrap().pixels().iter().all(|&c| c == COLOR_FN));
        assert!(colorize(&ones, &Grid::filled(2, 3, 1u8)).is_err());
    }
}
