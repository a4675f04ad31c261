//! Scale/shift-invariant depth normalization and the target-domain RMSE loss
//! built on it. A depth map is centered by its median and divided by the mean
//! absolute deviation from the median, so the loss is blind to any positive
//! affine transform of either argument. The gradient freezes the
//! normalization statistics, the standard treatment for scale-invariant
//! losses since the median is piecewise non-differentiable.

use thiserror::Error;

use crate::grid::{mean_abs_dev_from_median, median, DepthMap};

/// Below this mean absolute deviation a map counts as constant and its
/// normalized values are defined as all zeros.
pub const DEGENERATE_SCALE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DepthLossError {
    #[error("no valid depth")]
    NoValidDepth,
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// Normalization statistics of one depth map over a pixel population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsiStats {
    pub med: f64,
    pub scale: f64,
    pub valid_count: usize,
}

fn stats_of(values: &[f64]) -> Result<SsiStats, DepthLossError> {
    if values.is_empty() {
        return Err(DepthLossError::NoValidDepth);
    }
    let med = median(values).expect("non-empty finite sample");
    let scale = mean_abs_dev_from_median(values).expect("non-empty finite sample");
    Ok(SsiStats {
        med,
        scale,
        valid_count: values.len(),
    })
}

fn normalize_with(values: &[f64], stats: &SsiStats) -> Vec<f64> {
    if stats.scale < DEGENERATE_SCALE {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - stats.med) / stats.scale).collect()
}

/// Normalized values over the map's valid pixels (row-major order) plus the
/// statistics used.
pub fn ssi_normalize(d: &DepthMap) -> Result<(Vec<f64>, SsiStats), DepthLossError> {
    let values = d.valid_values();
    let stats = stats_of(&values)?;
    Ok((normalize_with(&values, &stats), stats))
}

fn joint_values(pred: &DepthMap, pseudo: &DepthMap) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>), DepthLossError> {
    if pred.height != pseudo.height || pred.width != pseudo.width {
        return Err(DepthLossError::ShapeMismatch(
            pred.height,
            pred.width,
            pseudo.height,
            pseudo.width,
        ));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut idx = Vec::new();
    for i in 0..pred.data.len() {
        if pred.valid[i] && pseudo.valid[i] {
            a.push(pred.data[i]);
            b.push(pseudo.data[i]);
            idx.push(i);
        }
    }
    if a.is_empty() {
        return Err(DepthLossError::NoValidDepth);
    }
    Ok((a, b, idx))
}

/// RMSE between the two independently SSI-normalized maps, with both sets of
/// statistics computed over the jointly valid pixel population.
pub fn ssi_rmse_loss(pred: &DepthMap, pseudo: &DepthMap) -> Result<f64, DepthLossError> {
    let (pv, qv, _) = joint_values(pred, pseudo)?;
    let sp = stats_of(&pv)?;
    let sq = stats_of(&qv)?;
    let pn = normalize_with(&pv, &sp);
    let qn = normalize_with(&qv, &sq);
    let mut sum = 0.0;
    for (a, b) in pn.iter().zip(&qn) {
        let d = a - b;
        sum += d * d;
    }
    Ok((sum / pn.len() as f64).sqrt())
}

/// Per-pixel gradient of `ssi_rmse_loss` w.r.t. `pred`, with the SSI
/// statistics of both maps frozen:
/// dL/dpred_i = (SSI(pred)_i - SSI(pseudo)_i) / (N * L * scale_pred)
/// on jointly valid pixels, 0 elsewhere and whenever the loss is 0 or the
/// prediction is degenerate-constant.
pub fn ssi_rmse_grad(pred: &DepthMap, pseudo: &DepthMap) -> Result<Vec<f64>, DepthLossError> {
    let (pv, qv, idx) = joint_values(pred, pseudo)?;
    let sp = stats_of(&pv)?;
    let sq = stats_of(&qv)?;
    let pn = normalize_with(&pv, &sp);
    let qn = normalize_with(&qv, &sq);
    let n = pn.len() as f64;
    let mut sum = 0.0;
    for (a, b) in pn.iter().zip(&qn) {
        let d = a - b;
        sum += d * d;
    }
    let loss = (sum / n).sqrt();

    let mut grad = vec![0.0; pred.data.len()];
    if loss == 0.0 || sp.scale < DEGENERATE_SCALE {
        return Ok(grad);
    }
    for (k, &i) in idx.iter().enumerate() {
        grad[i] = (pn[k] - qn[k]) / (n * loss * sp.scale);
    }
    Ok(grad)
}
