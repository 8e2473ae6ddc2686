use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l1_rel: f64,
    pub l1_inv: f64,
    pub sc_inv: f64,
    pub valid_pixel_count: usize,
    /// Truth-valid pixels skipped because the prediction was not positive.
    pub excluded_count: usize,
}

/// Depth errors of `predicted` against `truth` over pixels valid in the
/// truth and positive in the prediction. Logs are natural.
pub fn compute_metrics(predicted: &DepthMap, truth: &DepthMap) -> Result<MetricReport> {
    if (predicted.height, predicted.width) != (truth.height, truth.width) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            predicted.width, predicted.height, truth.width, truth.height
        )));
    }
    let mut pairs = Vec::with_capacity(truth.len());
    let mut excluded = 0;
    for p in 0..truth.len() {
        if !truth.validity[p] {
            continue;
        }
        let d = predicted.values[p];
        if d > 0.0 && d.is_finite() {
            pairs.push((d, truth.values[p]));
        } else {
            excluded += 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoValidPixels("no pixel is valid in both prediction and truth".into()));
    }
    let n = pairs.len() as f64;
    let l1_rel = pairs.iter().map(|(d, t)| (d - t).abs() / t).sum::<f64>() / n;
    let l1_inv = pairs.iter().map(|(d, t)| (1.0 / d - 1.0 / t).abs()).sum::<f64>() / n;
    // Two-pass variance of the log ratio; same quantity as E[z^2] - E[z]^2.
    let z: Vec<f64> = pairs.iter().map(|(d, t)| d.ln() - t.ln()).collect();
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MetricReport { l1_rel, l1_inv, sc_inv: var.max(0.0).sqrt(), valid_pixel_count: pairs.len(), excluded_count: excluded })
}
