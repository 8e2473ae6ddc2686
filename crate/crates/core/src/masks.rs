//! Multiplane mask representation.
//!
//! `mask[i, p]` is the probability that the surface seen through pixel `p`
//! lies in front of (or on) sweep plane `i`.

use crate::error::{Error, Result};
use crate::sampling::PlaneSet;

/// Decoding threshold on the monotonised mask profile.
pub const DECODE_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub validity: Vec<bool>,
}

impl DepthMap {
    /// Depth map where every finite positive value is valid.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "depth map has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        let validity = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self { height, width, values, validity })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Self {
        Self { height, width, values: vec![depth; height * width], validity: vec![true; height * width] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Valid depths in row-major order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.validity).filter(|(_, &ok)| ok).map(|(&v, _)| v)
    }

    /// Values with invalid pixels replaced by NaN.
    pub fn to_nan_filled(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.validity)
            .map(|(&v, &ok)| if ok { v } else { f64::NAN })
            .collect()
    }

    /// Reciprocal of every valid depth; zero elsewhere.
    pub fn inverse(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.validity)
            .map(|(&v, &ok)| if ok { 1.0 / v } else { 0.0 })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.height * self.width || self.validity.len() != self.values.len() {
            return Err(Error::ShapeMismatch("depth map buffers do not match its size".into()));
        }
        for (v, &ok) in self.values.iter().zip(&self.validity) {
            if ok && !(v.is_finite() && *v > 0.0) {
                return Err(Error::InvalidArgument(format!("valid depth {v} is not positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplaneMask {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    /// Plane-major, then row-major.
    pub values: Vec<f64>,
    /// Per-pixel validity of the supervision; `None` means all valid.
    pub validity: Option<Vec<bool>>,
}

impl MultiplaneMask {
    pub fn new(planes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != planes * height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} values, expected {planes}x{height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { planes, height, width, values, validity: None })
    }

    #[inline]
    pub fn at(&self, plane: usize, y: usize, x: usize) -> f64 {
        self.values[(plane * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &MultiplaneMask) -> bool {
        self.planes == other.planes && self.height == other.height && self.width == other.width
    }

    /// Mask profile across planes at a flat pixel index.
    pub fn profile(&self, pixel: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.height * self.width;
        (0..self.planes).map(move |i| self.values[i * n + pixel])
    }

    pub fn pixel_valid(&self, pixel: usize) -> bool {
        self.validity.as_ref().map_or(true, |v| v[pixel])
    }
}

/// Binary masks from a depth map: 1 where the depth is at or in front of the plane.
pub fn make_ground_truth_masks(depth: &DepthMap, planes: &PlaneSet) -> MultiplaneMask {
    let n = depth.height * depth.width;
    let d = planes.len();
    let mut values = vec![0.0; d * n];
    for (p, (&z, &ok)) in depth.values.iter().zip(&depth.validity).enumerate() {
        if !ok {
            continue;
        }
        for (i, &plane) in planes.depths().iter().enumerate() {
            if z <= plane {
                values[i * n + p] = 1.0;
            }
        }
    }
    MultiplaneMask {
        planes: d,
        height: depth.height,
        width: depth.width,
        values,
        validity: Some(depth.validity.clone()),
    }
}

/// Element-wise mean of per-neighbour masks.
pub fn fuse_masks(per_neighbour: &[MultiplaneMask]) -> Result<MultiplaneMask> {
    let first = per_neighbour.first().ok_or_else(|| Error::Empty("no masks to fuse".into()))?;
    if let Some(bad) = per_neighbour.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::ShapeMismatch(format!(
            "cannot fuse {}x{}x{} with {}x{}x{}",
            first.planes, first.height, first.width, bad.planes, bad.height, bad.width
        )));
    }
    let count = per_neighbour.len() as f64;
    let mut values = vec![0.0; first.values.len()];
    for m in per_neighbour {
        for (acc, v) in values.iter_mut().zip(&m.values) {
            *acc += v;
        }
    }
    for v in &mut values {
        *v /= count;
    }
    Ok(MultiplaneMask { values, validity: first.validity.clone(), ..*first })
}

/// Depth at which a single pixel's mask profile crosses [`DECODE_LEVEL`].
///
/// The profile is made non-decreasing with a running maximum first.
pub fn decode_profile<I: IntoIterator<Item = f64>>(profile: I, planes: &[f64]) -> f64 {
    let mut running = f64::NEG_INFINITY;
    let mut prev = 0.0;
    for (i, m) in profile.into_iter().enumerate() {
        running = running.max(m);
        if running >= DECODE_LEVEL {
            if i == 0 {
                return planes[0];
            }
            let t = (DECODE_LEVEL - prev) / (running - prev);
            return planes[i - 1] + t * (planes[i] - planes[i - 1]);
        }
        prev = running;
    }
    planes[planes.len() - 1]
}

pub fn decode_depth_from_masks(mask: &MultiplaneMask, planes: &PlaneSet) -> Result<DepthMap> {
    if mask.planes != planes.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} planes but plane set has {}",
            mask.planes,
            planes.len()
        )));
    }
    let n = mask.height * mask.width;
    let values = (0..n).map(|p| decode_profile(mask.profile(p), planes.depths())).collect();
    Ok(DepthMap { height: mask.height, width: mask.width, values, validity: vec![true; n] })
}

/// Running maximum along the plane axis.
pub fn monotonize(mask: &MultiplaneMask) -> MultiplaneMask {
    let n = mask.height * mask.width;
    let mut out = mask.clone();
    for p in 0..n {
        let mut running = f64::NEG_INFINITY;
        for i in 0..mask.planes {
            running = running.max(mask.values[i * n + p]);
            out.values[i * n + p] = running;
        }
    }
    out
}

/// Output side length for a factor-two reduction that keeps odd remainders.
#[inline]
pub fn half_ceil(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2 majority vote over valid pixels; ties resolve to 1.
pub fn downsample_masks_majority(mask: &MultiplaneMask) -> MultiplaneMask {
    let (h, w) = (mask.height, mask.width);
    let (oh, ow) = (half_ceil(h), half_ceil(w));
    let mut values = vec![0.0; mask.planes * oh * ow];
    let mut validity = vec![false; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let pixels: Vec<usize> = block(oy, ox, h, w).filter(|&p| mask.pixel_valid(p)).collect();
            if pixels.is_empty() {
                continue;
            }
            validity[oy * ow + ox] = true;
            for i in 0..mask.planes {
                let ones: f64 = pixels.iter().map(|&p| mask.values[i * h * w + p]).sum();
                if 2.0 * ones >= pixels.len() as f64 {
                    values[(i * oh + oy) * ow + ox] = 1.0;
                }
            }
        }
    }
    MultiplaneMask { planes: mask.planes, height: oh, width: ow, values, validity: Some(validity) }
}

/// 2x2 mean of inverse depth over valid pixels, returned as a depth map.
pub fn downsample_depth_inverse_mean(depth: &DepthMap) -> DepthMap {
    let (h, w) = (depth.height, depth.width);
    let (oh, ow) = (half_ceil(h), half_ceil(w));
    let mut values = vec![0.0; oh * ow];
    let mut validity = vec![false; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let (sum, count) = block(oy, ox, h, w)
                .filter(|&p| depth.validity[p])
                .fold((0.0, 0usize), |(s, c), p| (s + 1.0 / depth.values[p], c + 1));
            if count > 0 {
                values[oy * ow + ox] = count as f64 / sum;
                validity[oy * ow + ox] = true;
            }
        }
    }
    DepthMap { height: oh, width: ow, values, validity }
}

fn block(oy: usize, ox: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let ys = (2 * oy)..(2 * oy + 2).min(h);
    ys.flat_map(move |y| ((2 * ox)..(2 * ox + 2).min(w)).map(move |x| y * w + x))
}
