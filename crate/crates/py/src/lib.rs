//! Python bindings. Images, depth maps and masks cross the boundary as flat
//! lists in channel-major, row-major order together with their dimensions.

use mmvs::evalkit::{self, SceneSpec, SceneStyle};
use mmvs::geometry::{self, CameraModel, RelativePose};
use mmvs::masks::{self, DepthMap, MultiplaneMask};
use mmvs::neural::nets;
use mmvs::neural::NetworkConfig;
use mmvs::sampling::{self, PlaneSet};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: mmvs::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
struct PyCamera(CameraModel);

#[pymethods]
impl PyCamera {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        CameraModel::new(fx, fy, cx, cy, width, height).map(Self).map_err(err)
    }

    /// Camera with the principal point at the image centre.
    #[staticmethod]
    fn centered(focal: f64, width: usize, height: usize) -> PyResult<Self> {
        CameraModel::centered(focal, width, height).map(Self).map_err(err)
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.0.fx
    }

    #[getter]
    fn fy(&self) -> f64 {
        self.0.fy
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }

    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!("Camera(fx={}, fy={}, cx={}, cy={}, width={}, height={})", c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    }
}

#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose(RelativePose);

#[pymethods]
impl PyPose {
    /// From 12 numbers: rotation row-major, then translation.
    #[new]
    fn new(row: Vec<f64>) -> PyResult<Self> {
        let row: [f64; 12] = row.try_into().map_err(|_| PyValueError::new_err("pose needs 12 numbers"))?;
        RelativePose::from_row(&row).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(RelativePose::identity())
    }

    #[staticmethod]
    fn translation(x: f64, y: f64, z: f64) -> Self {
        Self(RelativePose::from_translation([x, y, z]))
    }

    fn to_row(&self) -> Vec<f64> {
        self.0.to_row().to_vec()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }
}

/// 3x3 homography mapping reference pixels to neighbour pixels for a
/// fronto-parallel plane at `depth`.
#[pyfunction]
fn homography(camera: &PyCamera, pose: &PyPose, depth: f64) -> PyResult<Vec<Vec<f64>>> {
    let h = geometry::homography_for_plane(&camera.0, &pose.0, depth).map_err(err)?;
    Ok((0..3).map(|r| (0..3).map(|c| h.matrix[(r, c)]).collect()).collect())
}

/// Warp volume of one neighbour: flat `3 (1 + D) x H x W` values.
#[pyfunction]
fn warp_volume(reference: Vec<f64>, neighbour: Vec<f64>, camera: &PyCamera, pose: &PyPose, planes: Vec<f64>) -> PyResult<Vec<f64>> {
    let (h, w) = (camera.0.height, camera.0.width);
    let r = geometry::ImageBuffer::new(3, h, w, reference).map_err(err)?;
    let n = geometry::ImageBuffer::new(3, h, w, neighbour).map_err(err)?;
    let planes = PlaneSet::explicit(planes).map_err(err)?;
    Ok(geometry::build_warp_volume(&r, &n, &camera.0, &pose.0, &planes).map_err(err)?.data)
}

#[pyfunction]
fn inverse_depth_planes(d_min: f64, d_max: f64, planes: usize) -> PyResult<Vec<f64>> {
    Ok(sampling::sample_inverse_depth_planes(d_min, d_max, planes).map_err(err)?.depths().to_vec())
}

#[pyfunction]
#[pyo3(signature = (depths, planes, d_max, bins=sampling::DEFAULT_BINS, theta_min=sampling::DEFAULT_THETA_MIN, theta_max=sampling::DEFAULT_THETA_MAX))]
fn histogram_planes(depths: Vec<f64>, planes: usize, d_max: f64, bins: usize, theta_min: f64, theta_max: f64) -> PyResult<Vec<f64>> {
    let hist = sampling::accumulate_histogram(depths, bins, d_max).map_err(err)?;
    let cdf = sampling::to_cdf(&hist).map_err(err)?;
    Ok(sampling::sample_histogram_planes(&cdf, planes, theta_min, theta_max).map_err(err)?.depths().to_vec())
}

/// Binary ground-truth masks, flat `D x H x W`. NaN depths give all-zero profiles.
#[pyfunction]
fn make_masks(depth: Vec<f64>, height: usize, width: usize, planes: Vec<f64>) -> PyResult<Vec<f64>> {
    let d = DepthMap::from_values(height, width, depth).map_err(err)?;
    let planes = PlaneSet::explicit(planes).map_err(err)?;
    Ok(masks::make_ground_truth_masks(&d, &planes).values)
}

#[pyfunction]
fn fuse_masks(masks_list: Vec<Vec<f64>>, height: usize, width: usize) -> PyResult<Vec<f64>> {
    let planes = masks_list.first().map_or(0, |m| m.len() / (height * width).max(1));
    let ms = masks_list
        .into_iter()
        .map(|v| MultiplaneMask::new(planes, height, width, v))
        .collect::<mmvs::Result<Vec<_>>>()
        .map_err(err)?;
    Ok(masks::fuse_masks(&ms).map_err(err)?.values)
}

/// Depth at the 0.5 crossing of each pixel's mask profile.
#[pyfunction]
fn decode_masks(values: Vec<f64>, height: usize, width: usize, planes: Vec<f64>) -> PyResult<Vec<f64>> {
    let planes = PlaneSet::explicit(planes).map_err(err)?;
    let m = MultiplaneMask::new(planes.len(), height, width, values).map_err(err)?;
    Ok(masks::decode_depth_from_masks(&m, &planes).map_err(err)?.values)
}

#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, predicted: Vec<f64>, truth: Vec<f64>, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let p = DepthMap::from_values(height, width, predicted).map_err(err)?;
    let t = DepthMap::from_values(height, width, truth).map_err(err)?;
    let r = evalkit::compute_metrics(&p, &t).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("l1_rel", r.l1_rel)?;
    d.set_item("l1_inv", r.l1_inv)?;
    d.set_item("sc_inv", r.sc_inv)?;
    d.set_item("valid", r.valid_pixel_count)?;
    d.set_item("excluded", r.excluded_count)?;
    Ok(d)
}

/// Render a random scene seen from `pose`; returns `(image, depth)`.
#[pyfunction]
#[pyo3(signature = (seed, camera, d_min, d_max, pose=None))]
fn render_random_scene(seed: u64, camera: &PyCamera, d_min: f64, d_max: f64, pose: Option<PyPose>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let spec = SceneSpec::random(seed, &camera.0, &SceneStyle::new(d_min, d_max)).map_err(err)?;
    let pose = pose.map_or_else(RelativePose::identity, |p| p.0);
    let (img, depth) = evalkit::render_scene(&spec, &camera.0, &pose).map_err(err)?;
    Ok((img.data, depth.values))
}

#[pyclass(name = "MaskNet")]
struct PyMaskNet(nets::MaskNet);

#[pymethods]
impl PyMaskNet {
    #[new]
    #[pyo3(signature = (planes, height, width, seed=0, base_channels=8))]
    fn new(planes: usize, height: usize, width: usize, seed: u64, base_channels: usize) -> PyResult<Self> {
        let cfg = NetworkConfig { base_channels, ..NetworkConfig::new(planes, height, width) };
        nets::MaskNet::new(cfg, seed).map(Self).map_err(err)
    }

    fn parameter_count(&self) -> usize {
        self.0.params().element_count()
    }

    /// Masks at four scales, coarse to fine, each `(D, H, W, values)`.
    fn forward(&self, volume: Vec<f64>) -> PyResult<Vec<(usize, usize, usize, Vec<f64>)>> {
        let cfg = self.0.config();
        let vol = geometry::WarpVolume {
            planes: cfg.planes,
            height: cfg.input_height,
            width: cfg.input_width,
            validity: vec![true; cfg.planes * cfg.input_height * cfg.input_width],
            data: volume,
        };
        if vol.data.len() != vol.channels() * vol.height * vol.width {
            return Err(PyValueError::new_err(format!(
                "volume needs {} values, got {}",
                vol.channels() * vol.height * vol.width,
                vol.data.len()
            )));
        }
        let outs = nets::forward_masknet(&self.0, &vol).map_err(err)?;
        Ok(outs.into_iter().map(|m| (m.planes, m.height, m.width, m.values)).collect())
    }
}

#[pymodule]
fn mmvs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyMaskNet>()?;
    m.add_function(wrap_pyfunction!(homography, m)?)?;
    m.add_function(wrap_pyfunction!(warp_volume, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_depth_planes, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_planes, m)?)?;
    m.add_function(wrap_pyfunction!(make_masks, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_masks, m)?)?;
    m.add_function(wrap_pyfunction!(decode_masks, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(render_random_scene, m)?)?;
    Ok(())
}
