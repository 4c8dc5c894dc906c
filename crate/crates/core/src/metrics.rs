//! Pixel-level evaluation of predicted traces against ground truth:
//! confusion counts, overlap scores, false-positive rates, and
//! mean/standard-error summaries across scans.

use crate::error::{Error, Result};
use crate::fproj::TraceStack;

/// Pixel confusion counts between a prediction and its ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn add(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    fn tally(&mut self, pred: bool, gt: bool) {
        match (pred, gt) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }
}

/// Confusion counts aggregated over all views of a stack pair.
pub fn confusion(pred: &TraceStack, gt: &TraceStack) -> Result<Confusion> {
    if pred.nu != gt.nu || pred.nv != gt.nv || pred.n_views != gt.n_views {
        return Err(Error::DimMismatch("prediction and ground truth shapes differ".into()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        c.tally(p != 0, g != 0);
    }
    Ok(c)
}

/// Confusion counts for a pair of flat boolean masks.
pub fn confusion_masks(pred: &[bool], gt: &[bool]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch("prediction and ground truth lengths differ".into()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        c.tally(p, g);
    }
    Ok(c)
}

/// Dice similarity, `2 TP / (2 TP + FP + FN)`; undefined when that
/// denominator is zero (no positives anywhere).
pub fn dsc(c: &Confusion) -> Option<f64> {
    let den = 2 * c.true_pos + c.false_pos + c.false_neg;
    (den > 0).then(|| 2.0 * c.true_pos as f64 / den as f64)
}

/// Intersection over union, `TP / (TP + FP + FN)`; undefined when the
/// union is empty.
pub fn iou(c: &Confusion) -> Option<f64> {
    let den = c.true_pos + c.false_pos + c.false_neg;
    (den > 0).then(|| c.true_pos as f64 / den as f64)
}

/// False-positive rate in the form used by the evaluation protocol,
/// `FP / TN`. May exceed 1; undefined when TN = 0.
pub fn fpr(c: &Confusion) -> Option<f64> {
    (c.true_neg > 0).then(|| c.false_pos as f64 / c.true_neg as f64)
}

/// Conventional false-positive rate, `FP / (FP + TN)`; undefined when
/// both are zero.
pub fn fpr_conventional(c: &Confusion) -> Option<f64> {
    let den = c.false_pos + c.true_neg;
    (den > 0).then(|| c.false_pos as f64 / den as f64)
}

/// Mean and standard error (`sample std / sqrt(n)`) of per-scan scores.
/// The standard error is undefined for a single value.
pub fn summarize(scores: &[f64]) -> Result<(f64, Option<f64>)> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot summarize an empty score list"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Ok((mean, None));
    }
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, Some((var / n).sqrt())))
}
