//! Confusion-matrix accumulation, per-class IoU / mIoU, and a throughput
//! harness for single-scene inference timing.

use crate::datasets::IGNORE_SEMANTIC;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Rows are ground truth, columns are predictions; ignore-labeled samples
/// never enter the counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Contract("confusion matrix: zero classes".into()));
        }
        Ok(ConfusionMatrix { class_count, counts: vec![0; class_count * class_count] })
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.class_count + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, truth: &[u16], pred: &[u16]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Contract("update: truth/pred length mismatch".into()));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_SEMANTIC {
                continue;
            }
            if (t as usize) >= self.class_count || (p as usize) >= self.class_count {
                return Err(Error::Index(format!(
                    "update: labels ({t},{p}) out of {} classes",
                    self.class_count
                )));
            }
            self.counts[t as usize * self.class_count + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; equals accumulating the concatenated streams.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.class_count != other.class_count {
            return Err(Error::Contract("merge: class count mismatch".into()));
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Ok(ConfusionMatrix { class_count: self.class_count, counts })
    }

    /// TP / (TP + FP + FN) per class; None when the union is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.class_count;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let fp: u64 = (0..c).filter(|&t| t != k).map(|t| self.count(t, k)).sum();
                let fng: u64 = (0..c).filter(|&p| p != k).map(|p| self.count(k, p)).sum();
                let union = tp + fp + fng;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with a nonzero union.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Contract("miou: no scored samples".into()));
        }
        let scored: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if scored.is_empty() {
            return Err(Error::Contract("miou: no class has a nonzero union".into()));
        }
        Ok(scored.iter().sum::<f64>() / scored.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub samples: u64,
}

impl EvalReport {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(EvalReport {
            per_class_iou: cm.iou_per_class(),
            miou: cm.miou()?,
            samples: cm.total(),
        })
    }
}

/// Wall-clock rate of a single-item workload: runs `warmup_iters` untimed,
/// then times `timed_iters` back-to-back calls. Each call returns before the
/// next timestamp is taken, so partially overlapped work cannot inflate the
/// rate.
pub fn throughput<F: FnMut()>(mut workload: F, warmup_iters: usize, timed_iters: usize) -> Result<f64> {
    if timed_iters == 0 {
        return Err(Error::Contract("throughput: timed_iters must be >= 1".into()));
    }
    for _ in 0..warmup_iters {
        workload();
    }
    let start = Instant::now();
    for _ in 0..timed_iters {
        workload();
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed <= 0.0 {
        return Err(Error::Numeric("throughput: timer resolution too coarse".into()));
    }
    Ok(timed_iters as f64 / elapsed)
}
