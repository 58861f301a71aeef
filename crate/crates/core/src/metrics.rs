//! Binarization, pixel confusion counts and IoU.
//!
//! Dataset-level IoU is micro-averaged: counts are pooled over every pixel
//! of every item before the ratio is taken.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::MaskBatch;
use crate::model::PredictionMap;
use crate::real::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("shape mismatch: {pred:?} vs {truth:?}")]
    ShapeMismatch {
        pred: (usize, usize, usize),
        truth: (usize, usize, usize),
    },
    #[error("mask value {0} is not binary")]
    NonBinary(u8),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemIou {
    pub id: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub per_item: Vec<ItemIou>,
}

/// Pixel is foreground iff `prob >= threshold`.
pub fn binarize<T: Real>(
    pred: &PredictionMap<T>,
    threshold: f64,
) -> Result<MaskBatch, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let labels = pred
        .probs
        .iter()
        .map(|p| (p.to_f64_lossy() >= threshold) as u8)
        .collect();
    Ok(MaskBatch {
        batch: pred.batch,
        height: pred.height,
        width: pred.width,
        labels,
    })
}

fn count_pixels(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(MetricsError::NonBinary(p.max(t))),
        }
    }
    Ok(c)
}

fn check_shapes(pred: &MaskBatch, truth: &MaskBatch) -> Result<(), MetricsError> {
    let ps = (pred.batch, pred.height, pred.width);
    let ts = (truth.batch, truth.height, truth.width);
    if ps != ts || pred.labels.len() != truth.labels.len() {
        return Err(MetricsError::ShapeMismatch {
            pred: ps,
            truth: ts,
        });
    }
    Ok(())
}

/// Pooled counts over the whole batch.
pub fn confusion_counts(
    pred: &MaskBatch,
    truth: &MaskBatch,
) -> Result<ConfusionCounts, MetricsError> {
    check_shapes(pred, truth)?;
    count_pixels(&pred.labels, &truth.labels)
}

/// Counts for each item of the batch separately.
pub fn confusion_counts_per_item(
    pred: &MaskBatch,
    truth: &MaskBatch,
) -> Result<Vec<ConfusionCounts>, MetricsError> {
    check_shapes(pred, truth)?;
    (0..pred.batch)
        .map(|i| count_pixels(pred.item(i), truth.item(i)))
        .collect()
}

/// `tp / (tp + fp + fn)`; 1.0 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Builds a report from per-item counts listed in `ids` order.
pub fn report(ids: &[String], per_item: &[ConfusionCounts], threshold: f64) -> MetricsReport {
    let counts = per_item
        .iter()
        .fold(ConfusionCounts::default(), |a, &b| a + b);
    MetricsReport {
        iou: iou(&counts),
        threshold,
        counts,
        per_item: ids
            .iter()
            .zip(per_item)
            .map(|(id, c)| ItemIou {
                id: id.clone(),
                iou: iou(c),
            })
            .collect(),
    }
}
