//! Evaluation protocol: mIoU over non-IGNORE pixels for segmentation, and
//! range-masked, median-scaled RMSE for depth. The range mask is derived from
//! ground truth only and applied to both maps before scaling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{median, DepthMap, LabelMap, IGNORE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("class count mismatch: {0} vs {1}")]
    ClassMismatch(u8, u8),
    #[error("empty mask")]
    EmptyMask,
    #[error("all pixels ignored")]
    AllIgnored,
    #[error("degenerate prediction median")]
    DegeneratePredictionMedian,
}

/// Depth evaluation range in meters; ground-truth pixels outside it are
/// excluded.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthEvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthEvalConfig {
    fn default() -> Self {
        DepthEvalConfig {
            min_depth: 1e-3,
            max_depth: 80.0,
        }
    }
}

/// C x (C+1) confusion counts, rows = ground truth, columns = prediction.
/// The extra column holds IGNORE predictions, which score against the
/// ground-truth class without crediting any prediction class; this keeps the
/// total equal to the number of scored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * (num_classes + 1)],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<(), EvalError> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(EvalError::ShapeMismatch(
                pred.height,
                pred.width,
                gt.height,
                gt.width,
            ));
        }
        if pred.num_classes != gt.num_classes {
            return Err(EvalError::ClassMismatch(pred.num_classes, gt.num_classes));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE {
                continue;
            }
            // an IGNORE prediction lands in the extra column: a false
            // negative for the gt class, a false positive for none
            let p = if p == IGNORE { self.num_classes } else { p as usize };
            self.counts[g as usize * (self.num_classes + 1) + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU (None for classes absent from both maps) and the mean
    /// over the remaining classes. A class present only in the prediction
    /// scores 0.
    pub fn iou(&self) -> Result<(Vec<Option<f64>>, f64), EvalError> {
        if self.total() == 0 {
            return Err(EvalError::AllIgnored);
        }
        let c = self.num_classes;
        let stride = c + 1;
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..c {
            let tp = self.counts[k * stride + k];
            let fn_: u64 = (0..stride).map(|j| self.counts[k * stride + j]).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|i| self.counts[i * stride + k]).sum::<u64>() - tp;
            if tp + fp + fn_ == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / (tp + fp + fn_) as f64;
                per_class.push(Some(iou));
                sum += iou;
                n += 1;
            }
        }
        Ok((per_class, sum / n as f64))
    }
}

/// True where the ground truth is valid and inside the evaluation range.
pub fn depth_valid_mask(gt: &DepthMap, cfg: &DepthEvalConfig) -> Vec<bool> {
    gt.data
        .iter()
        .zip(&gt.valid)
        .map(|(&d, &v)| v && d >= cfg.min_depth && d <= cfg.max_depth)
        .collect()
}

/// Rescale the prediction by med(masked gt) / med(masked pred) on masked
/// pixels.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<DepthMap, EvalError> {
    let pv: Vec<f64> = pred
        .data
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&d, _)| d)
        .collect();
    let gv: Vec<f64> = gt
        .data
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&d, _)| d)
        .collect();
    if pv.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let med_p = median(&pv).map_err(|_| EvalError::EmptyMask)?;
    let med_g = median(&gv).map_err(|_| EvalError::EmptyMask)?;
    if med_p == 0.0 {
        return Err(EvalError::DegeneratePredictionMedian);
    }
    let ratio = med_g / med_p;
    let mut out = pred.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.data[i] = pred.data[i] * ratio;
        }
    }
    Ok(out)
}

/// Root mean squared difference over masked pixels, left-to-right.
pub fn masked_rmse(a: &DepthMap, b: &DepthMap, mask: &[bool]) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let d = a.data[i] - b.data[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

/// Range-mask from the ground truth, median-scale the prediction, then RMSE.
pub fn evaluate_depth(pred: &DepthMap, gt: &DepthMap, cfg: &DepthEvalConfig) -> Result<f64, EvalError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(EvalError::ShapeMismatch(
            pred.height,
            pred.width,
            gt.height,
            gt.width,
        ));
    }
    let mask = depth_valid_mask(gt, cfg);
    let scaled = median_scale(pred, gt, &mask)?;
    masked_rmse(&scaled, gt, &mask)
}

/// Per-class IoU plus mean over classes present in ground truth or
/// prediction, for one pair of label maps.
pub fn miou(pred: &LabelMap, gt: &LabelMap) -> Result<(Vec<Option<f64>>, f64), EvalError> {
    let mut cm = ConfusionMatrix::new(gt.num_classes as usize);
    cm.accumulate(pred, gt)?;
    cm.iou()
}
