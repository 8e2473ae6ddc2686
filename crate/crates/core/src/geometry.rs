//! Pinhole cameras, relative poses and plane-induced homographies.
//!
//! Pixel centres sit at integer coordinates with the origin at the top-left
//! corner. A [`RelativePose`] maps reference-frame points into the neighbour
//! frame, `X_n = R X_r + t`, so the homography for a reference plane pulls
//! neighbour pixels into the reference geometry.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sampling::PlaneSet;

/// Smallest image side accepted anywhere in the pipeline.
pub const MIN_IMAGE_SIDE: usize = 8;

const ROTATION_TOL: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image centre and equal focal lengths.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidCamera("principal point must be finite".into()));
        }
        if self.width < MIN_IMAGE_SIDE || self.height < MIN_IMAGE_SIDE {
            return Err(Error::InvalidCamera(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Ray direction (z = 1) through pixel `(x, y)`.
    pub fn unproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::from(t) }
    }

    /// Rotation about a unit axis (Rodrigues) followed by a translation.
    pub fn from_axis_angle(axis_angle: [f64; 3], t: [f64; 3]) -> Self {
        let rotation = nalgebra::Rotation3::new(Vector3::from(axis_angle)).into_inner();
        Self { rotation, translation: Vector3::from(t) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (error {ortho:e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Apply the pose to a reference-frame point.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major rotation followed by translation.
    pub fn to_row(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_row(row: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::from_row_slice(&row[..9]);
        let translation = Vector3::new(row[9], row[10], row[11]);
        Self::new(rotation, translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHomography {
    pub matrix: Matrix3<f64>,
    pub plane_depth: f64,
}

impl PlaneHomography {
    /// Homography induced by the reference-frame plane `n·X = distance`.
    pub fn for_plane(
        camera: &CameraModel,
        pose: &RelativePose,
        normal: Vector3<f64>,
        distance: f64,
    ) -> Result<Self> {
        camera.validate()?;
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::InvalidDepth(distance));
        }
        let k = camera.intrinsics();
        let euclid = pose.rotation + pose.translation * normal.transpose() / distance;
        let matrix = k * euclid * camera.intrinsics_inverse();
        let det = matrix.determinant();
        if !(det.abs() > SINGULAR_TOL) {
            return Err(Error::SingularHomography(det));
        }
        Ok(Self { matrix, plane_depth: distance })
    }

    /// Map a reference pixel into the neighbour image; `None` when the
    /// homogeneous coordinate is not in front of the camera.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.matrix;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if !(w > 0.0) {
            return None;
        }
        let u = m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)];
        let v = m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)];
        Some((u / w, v / w))
    }
}

/// Homography for the fronto-parallel plane `z = depth` of the reference camera.
pub fn homography_for_plane(
    camera: &CameraModel,
    pose: &RelativePose,
    depth: f64,
) -> Result<PlaneHomography> {
    PlaneHomography::for_plane(camera, pose, Vector3::z(), depth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major, then row-major.
    pub data: Vec<f64>,
    pub validity_mask: Option<Vec<bool>>,
}

impl ImageBuffer {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Self { channels, height, width, data, validity_mask: None })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width], validity_mask: None }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width], validity_mask: None }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.validity_mask.as_ref().map_or(true, |m| m[y * self.width + x])
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Bilinear sample at a sub-pixel location inside `[0, w-1] x [0, h-1]`.
    fn sample_bilinear(&self, c: usize, u: f64, v: f64) -> f64 {
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let top = self.at(c, y0, x0) * (1.0 - ax) + self.at(c, y0, x1) * ax;
        let bottom = self.at(c, y1, x0) * (1.0 - ax) + self.at(c, y1, x1) * ax;
        top * (1.0 - ay) + bottom * ay
    }
}

/// Resample `neighbour` into the reference geometry through `h`.
///
/// Pixels whose source location falls outside the neighbour image are set
/// to zero and marked invalid.
pub fn warp_image(neighbour: &ImageBuffer, h: &PlaneHomography) -> ImageBuffer {
    let (height, width) = (neighbour.height, neighbour.width);
    let mut out = ImageBuffer::zeros(neighbour.channels, height, width);
    let mut valid = vec![false; height * width];
    let max_u = (width - 1) as f64;
    let max_v = (height - 1) as f64;
    for y in 0..height {
        for x in 0..width {
            let Some((u, v)) = h.apply(x as f64, y as f64) else { continue };
            if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) {
                continue;
            }
            valid[y * width + x] = true;
            for c in 0..neighbour.channels {
                out.set(c, y, x, neighbour.sample_bilinear(c, u, v));
            }
        }
    }
    out.validity_mask = Some(valid);
    out
}

/// Reference image stacked with the neighbour warped onto every sweep plane.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpVolume {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    /// `3 (1 + planes)` channels, channel-major.
    pub data: Vec<f64>,
    /// Per-plane validity, `planes x height x width`. Not fed to the networks.
    pub validity: Vec<bool>,
}

impl WarpVolume {
    pub fn channels(&self) -> usize {
        3 * (1 + self.planes)
    }
}

pub fn build_warp_volume(
    reference: &ImageBuffer,
    neighbour: &ImageBuffer,
    camera: &CameraModel,
    pose: &RelativePose,
    planes: &PlaneSet,
) -> Result<WarpVolume> {
    camera.validate()?;
    if reference.channels != 3 || neighbour.channels != 3 {
        return Err(Error::ShapeMismatch("warp volume needs 3-channel images".into()));
    }
    if !reference.same_dims(neighbour)
        || reference.width != camera.width
        || reference.height != camera.height
    {
        return Err(Error::ShapeMismatch(format!(
            "reference {}x{}, neighbour {}x{}, camera {}x{}",
            reference.width, reference.height, neighbour.width, neighbour.height, camera.width,
            camera.height
        )));
    }
    planes.validate()?;
    let (height, width) = (reference.height, reference.width);
    let n = height * width;
    let d = planes.len();
    let mut data = Vec::with_capacity(3 * (1 + d) * n);
    data.extend_from_slice(&reference.data);
    let mut validity = Vec::with_capacity(d * n);
    for &depth in planes.depths() {
        let h = homography_for_plane(camera, pose, depth)?;
        let warped = warp_image(neighbour, &h);
        data.extend_from_slice(&warped.data);
        validity.extend(warped.validity_mask.expect("warp sets validity"));
    }
    Ok(WarpVolume { planes: d, height, width, data, validity })
}
