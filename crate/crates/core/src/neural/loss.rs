//! Training losses, both as plain functions and as graph operations.

use super::graph::{Graph, Var};
use super::nets::InverseDepthMap;
use crate::error::{Error, Result};
use crate::masks::{downsample_depth_inverse_mean, downsample_masks_majority, DepthMap, MultiplaneMask};

use super::graph::BCE_CLAMP;

/// Mean cross-entropy over valid pixel-plane cells.
pub fn bce_mask_loss(predicted: &MultiplaneMask, truth: &MultiplaneMask, validity: &[bool]) -> Result<f64> {
    if !predicted.same_shape(truth) || validity.len() != truth.height * truth.width {
        return Err(Error::ShapeMismatch("predicted and true masks differ in shape".into()));
    }
    let n = truth.height * truth.width;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..truth.planes {
        for p in (0..n).filter(|&p| validity[p]) {
            let q = predicted.values[i * n + p].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = truth.values[i * n + p];
            sum -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoValidPixels("mask loss has no valid cells".into()));
    }
    Ok(sum / count as f64)
}

/// Ground-truth masks at `scales` resolutions, finest first; each coarser
/// level is a 2x2 majority vote of the previous one.
pub fn mask_pyramid(truth: &MultiplaneMask, scales: usize) -> Vec<MultiplaneMask> {
    let mut levels = vec![truth.clone()];
    while levels.len() < scales {
        let next = downsample_masks_majority(levels.last().expect("nonempty"));
        levels.push(next);
    }
    levels
}

/// Ground-truth depth at `scales` resolutions, finest first, pooled in inverse depth.
pub fn depth_pyramid(truth: &DepthMap, scales: usize) -> Vec<DepthMap> {
    let mut levels = vec![truth.clone()];
    while levels.len() < scales {
        let next = downsample_depth_inverse_mean(levels.last().expect("nonempty"));
        levels.push(next);
    }
    levels
}

/// Weighted sum of per-scale mean absolute inverse-depth errors.
///
/// `predicted` is ordered coarse to fine as the network emits it; `weights`
/// are finest first. A coarse scale without valid pixels contributes nothing.
pub fn multiscale_l1_loss(predicted: &[InverseDepthMap], truth: &DepthMap, weights: &[f64]) -> Result<f64> {
    if predicted.len() != weights.len() || predicted.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} loss weights",
            predicted.len(),
            weights.len()
        )));
    }
    let finest = predicted.last().expect("nonempty");
    if (finest.height, finest.width) != (truth.height, truth.width) {
        return Err(Error::ShapeMismatch("finest prediction does not match the ground truth".into()));
    }
    let pyramid = depth_pyramid(truth, predicted.len());
    let mut loss = 0.0;
    for (s, (pred, w)) in predicted.iter().rev().zip(weights).enumerate() {
        let gt = &pyramid[s];
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::ShapeMismatch(format!(
                "prediction at scale {s} is {}x{}, expected {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let count = gt.valid_count();
        if count == 0 {
            if s == 0 {
                return Err(Error::NoValidPixels("no valid ground-truth pixels".into()));
            }
            continue;
        }
        let err: f64 = pred
            .values
            .iter()
            .zip(gt.inverse())
            .zip(&gt.validity)
            .filter(|(_, &ok)| ok)
            .map(|((p, t), _)| (p - t).abs())
            .sum();
        loss += w * err / count as f64;
    }
    Ok(loss)
}

/// Per-scale supervision for a batch, flattened in NCHW order.
#[derive(Debug, Clone, Default)]
pub struct ScaleTarget {
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl ScaleTarget {
    pub fn push_masks(&mut self, m: &MultiplaneMask) {
        let n = m.height * m.width;
        self.target.extend_from_slice(&m.values);
        for _ in 0..m.planes {
            self.weight.extend((0..n).map(|p| if m.pixel_valid(p) { 1.0 } else { 0.0 }));
        }
    }

    pub fn push_inverse_depth(&mut self, d: &DepthMap) {
        self.target.extend(d.inverse());
        self.weight.extend(d.validity.iter().map(|&ok| if ok { 1.0 } else { 0.0 }));
    }

    pub fn has_valid(&self) -> bool {
        self.weight.iter().any(|&w| w != 0.0)
    }
}

/// Sum of cross-entropies at every scale; `outputs` and `targets` are aligned.
pub fn graph_mask_loss(g: &mut Graph, outputs: &[Var], targets: &[ScaleTarget]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&o, t) in outputs.iter().zip(targets) {
        if !t.has_valid() {
            continue;
        }
        let l = g.bce(o, &t.target, &t.weight)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::NoValidPixels("mask loss has no valid cells".into()))
}

/// Weighted multi-scale L1; `outputs` and `targets` aligned, `weights` likewise.
pub fn graph_multiscale_l1(g: &mut Graph, outputs: &[Var], targets: &[ScaleTarget], weights: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((&o, t), &w) in outputs.iter().zip(targets).zip(weights) {
        if !t.has_valid() {
            continue;
        }
        let l = g.l1(o, &t.target, &t.weight)?;
        let l = g.scale(l, w);
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::NoValidPixels("depth loss has no valid pixels".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv(h: usize, w: usize, v: f64) -> InverseDepthMap {
        InverseDepthMap { height: h, width: w, values: vec![v; h * w] }
    }

    #[test]
    fn bce_closed_forms() {
        let truth = MultiplaneMask::new(2, 2, 2, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let half = MultiplaneMask::new(2, 2, 2, vec![0.5; 8]).unwrap();
        let l = bce_mask_loss(&half, &truth, &[true; 4]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_mask_loss(&truth, &truth, &[true; 4]).unwrap() <= 1e-6);
        let one = MultiplaneMask::new(1, 1, 1, vec![1.0]).unwrap();
        let p = MultiplaneMask::new(1, 1, 1, vec![0.9]).unwrap();
        assert!((bce_mask_loss(&p, &one, &[true]).unwrap() - 0.105361).abs() < 1e-6);
        assert!(bce_mask_loss(&p, &one, &[false]).is_err());
    }

    #[test]
    fn l1_closed_forms() {
        let truth = DepthMap::constant(4, 4, 1.0);
        assert!((multiscale_l1_loss(&[inv(4, 4, 0.75)], &truth, &[1.0]).unwrap() - 0.25).abs() < 1e-12);

        let truth = DepthMap::constant(64, 64, 2.0);
        let preds: Vec<_> = (0..6).rev().map(|s| inv(64 >> s, 64 >> s, 0.6)).collect();
        let w = [0.5, 0.1, 0.1, 0.1, 0.1, 0.1];
        assert!((multiscale_l1_loss(&preds, &truth, &w).unwrap() - 0.1).abs() < 1e-12);
        let exact: Vec<_> = (0..6).rev().map(|s| inv(64 >> s, 64 >> s, 0.5)).collect();
        assert_eq!(multiscale_l1_loss(&exact, &truth, &w).unwrap(), 0.0);
    }

    #[test]
    fn l1_needs_valid_finest_pixels() {
        let truth = DepthMap::from_values(2, 2, vec![f64::NAN; 4]).unwrap();
        assert!(matches!(multiscale_l1_loss(&[inv(2, 2, 1.0)], &truth, &[1.0]), Err(Error::NoValidPixels(_))));
        assert!(multiscale_l1_loss(&[inv(3, 2, 1.0)], &DepthMap::constant(2, 2, 1.0), &[1.0]).is_err());
    }

    #[test]
    fn graph_losses_match_plain_versions() {
        use super::super::tensor::Tensor;
        let truth = DepthMap::from_values(4, 4, (0..16).map(|i| 1.0 + i as f64 * 0.3).collect()).unwrap();
        let pyr = depth_pyramid(&truth, 3);
        let preds: Vec<InverseDepthMap> =
            pyr.iter().rev().map(|d| InverseDepthMap { height: d.height, width: d.width, values: vec![0.4; d.len()] }).collect();
        let w = [0.5, 0.1, 0.1];
        let plain = multiscale_l1_loss(&preds, &truth, &w).unwrap();

        let mut g = Graph::training();
        let vars: Vec<Var> = preds
            .iter()
            .map(|p| g.variable(Tensor::new(vec![1, 1, p.height, p.width], p.values.clone()).unwrap()))
            .collect();
        let targets: Vec<ScaleTarget> = pyr
            .iter()
            .rev()
            .map(|d| {
                let mut t = ScaleTarget::default();
                t.push_inverse_depth(d);
                t
            })
            .collect();
        let wr: Vec<f64> = w.iter().rev().copied().collect();
        let l = graph_multiscale_l1(&mut g, &vars, &targets, &wr).unwrap();
        assert!((g.value(l).item() - plain).abs() < 1e-12);
    }
}
