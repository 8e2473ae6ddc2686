//! Ray-cast renderer for scenes of textured planar layers.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, ImageBuffer, RelativePose};
use crate::masks::DepthMap;

/// One sinusoidal texture component over plane coordinates in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Spatial frequency in cycles per metre along x and y.
    pub frequency: [f64; 2],
    pub phase: f64,
    pub amplitude: [f64; 3],
}

/// Band-limited procedural texture: base colour, sinusoids, and a lattice
/// of random colours blended bilinearly between cell centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
    /// Lattice spacing in metres; zero disables the lattice.
    pub cell: f64,
    pub cell_amplitude: f64,
    pub cell_seed: u64,
}

impl Texture {
    pub fn flat(colour: [f64; 3]) -> Self {
        Self { base: colour, waves: Vec::new(), cell: 0.0, cell_amplitude: 0.0, cell_seed: 0 }
    }

    pub fn is_flat(&self) -> bool {
        self.waves.is_empty() && (self.cell <= 0.0 || self.cell_amplitude == 0.0)
    }

    /// Random texture whose features span `min_px..max_px` pixels when
    /// viewed at `depth` with focal length `focal`.
    pub fn random(rng: &mut ChaCha8Rng, depth: f64, focal: f64, min_px: f64, max_px: f64) -> Self {
        let metres_per_px = depth / focal;
        let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let waves = (0..3)
            .map(|_| {
                let period = rng.gen_range(min_px..max_px) * metres_per_px;
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                Wave {
                    frequency: [angle.cos() / period, angle.sin() / period],
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amplitude: [rng.gen_range(0.04..0.1), rng.gen_range(0.04..0.1), rng.gen_range(0.04..0.1)],
                }
            })
            .collect();
        Self {
            base,
            waves,
            cell: rng.gen_range(min_px..max_px) * metres_per_px,
            cell_amplitude: 0.15,
            cell_seed: rng.gen(),
        }
    }

    fn lattice(&self, i: i64, j: i64, c: usize) -> f64 {
        // splitmix64 of the cell index, mapped to [-1, 1).
        let mut z = self
            .cell_seed
            .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add((j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
            .wrapping_add(c as u64 * 0x1656_67B1_9E37_79F9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    pub fn colour(&self, x: f64, y: f64) -> [f64; 3] {
        let mut rgb = self.base;
        for w in &self.waves {
            let s = (std::f64::consts::TAU * (w.frequency[0] * x + w.frequency[1] * y) + w.phase).sin();
            for c in 0..3 {
                rgb[c] += w.amplitude[c] * s;
            }
        }
        if self.cell > 0.0 && self.cell_amplitude != 0.0 {
            let (gx, gy) = (x / self.cell, y / self.cell);
            let (i, j) = (gx.floor(), gy.floor());
            let (ax, ay) = (gx - i, gy - j);
            let (i, j) = (i as i64, j as i64);
            for (c, v) in rgb.iter_mut().enumerate() {
                let top = self.lattice(i, j, c) * (1.0 - ax) + self.lattice(i + 1, j, c) * ax;
                let bottom = self.lattice(i, j + 1, c) * (1.0 - ax) + self.lattice(i + 1, j + 1, c) * ax;
                *v += self.cell_amplitude * (top * (1.0 - ay) + bottom * ay);
            }
        }
        rgb.map(|v| v.clamp(0.0, 1.0))
    }
}

/// A textured plane patch `Z = depth + slope[0] X + slope[1] Y` in the
/// reference frame, limited to reference-view normalised coordinates
/// `X/Z in [extent[0], extent[1]]`, `Y/Z in [extent[2], extent[3]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayer {
    pub depth: f64,
    pub slope: [f64; 2],
    pub extent: [f64; 4],
    pub texture: Texture,
}

impl SceneLayer {
    pub fn fronto(depth: f64, extent: [f64; 4], texture: Texture) -> Self {
        Self { depth, slope: [0.0, 0.0], extent, texture }
    }

    /// Reference-frame depth of the layer along the ray through `(u, v)`.
    pub fn depth_at(&self, u: f64, v: f64) -> f64 {
        self.depth / (1.0 - self.slope[0] * u - self.slope[1] * v)
    }

    fn normal(&self) -> Vector3<f64> {
        Vector3::new(-self.slope[0], -self.slope[1], 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Sorted near to far by their nominal depth.
    pub layers: Vec<SceneLayer>,
    /// Unbounded fronto-parallel backdrop.
    pub background_depth: f64,
    pub background: Texture,
}

/// Parameters for random scene generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    pub min_depth: f64,
    pub max_depth: f64,
    pub max_layers: usize,
    /// Probability that one layer is left untextured.
    pub textureless_probability: f64,
    pub slant_probability: f64,
}

impl SceneStyle {
    pub fn new(min_depth: f64, max_depth: f64) -> Self {
        Self { min_depth, max_depth, max_layers: 3, textureless_probability: 0.15, slant_probability: 0.3 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth && self.max_depth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "depth range {}..{} must be positive and increasing",
                self.min_depth, self.max_depth
            )));
        }
        Ok(())
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.background_depth > 0.0 && self.background_depth.is_finite()) {
            return Err(Error::InvalidDepth(self.background_depth));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.depth > 0.0 && l.depth.is_finite()) {
                return Err(Error::InvalidDepth(l.depth));
            }
            if !(l.extent[0] < l.extent[1] && l.extent[2] < l.extent[3]) {
                return Err(Error::InvalidArgument(format!("layer {i} has an empty extent")));
            }
            // Positive depth at every corner keeps the patch in front of the reference camera.
            for (u, v) in corners(&l.extent) {
                let z = l.depth_at(u, v);
                if !(z > 0.0 && z.is_finite()) {
                    return Err(Error::InvalidArgument(format!("layer {i} passes behind the reference camera")));
                }
            }
        }
        if self.layers.windows(2).any(|w| w[0].depth > w[1].depth) {
            return Err(Error::InvalidArgument("layers must be sorted near to far".into()));
        }
        Ok(())
    }

    /// Random scene with depths inside the style's range.
    pub fn random(seed: u64, camera: &CameraModel, style: &SceneStyle) -> Result<Self> {
        style.validate()?;
        camera.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (style.min_depth, style.max_depth);
        let focal = camera.fx.min(camera.fy);
        let (u_min, v_min) = ((-camera.cx) / camera.fx, (-camera.cy) / camera.fy);
        let (u_max, v_max) =
            (((camera.width - 1) as f64 - camera.cx) / camera.fx, ((camera.height - 1) as f64 - camera.cy) / camera.fy);

        let background_depth = rng.gen_range(lo + 0.6 * (hi - lo)..=hi);
        let background = Texture::random(&mut rng, background_depth, focal, 6.0, 16.0);
        let count = rng.gen_range(1..=style.max_layers.max(1));
        let mut depths: Vec<f64> = (0..count).map(|_| rng.gen_range(lo..background_depth)).collect();
        depths.sort_by(f64::total_cmp);
        let flat_layer =
            (rng.gen::<f64>() < style.textureless_probability).then(|| rng.gen_range(0..count));

        let mut layers = Vec::with_capacity(count);
        for (i, &depth) in depths.iter().enumerate() {
            let (w, h) = (rng.gen_range(0.3..0.7) * (u_max - u_min), rng.gen_range(0.3..0.7) * (v_max - v_min));
            let u0 = rng.gen_range(u_min - 0.2 * w..u_max - 0.8 * w);
            let v0 = rng.gen_range(v_min - 0.2 * h..v_max - 0.8 * h);
            let extent = [u0, u0 + w, v0, v0 + h];
            let texture = if flat_layer == Some(i) {
                Texture::flat([rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)])
            } else {
                Texture::random(&mut rng, depth, focal, 6.0, 16.0)
            };
            let mut layer = SceneLayer::fronto(depth, extent, texture);
            if rng.gen::<f64>() < style.slant_probability {
                layer.slope = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
                let ok = corners(&extent).all(|(u, v)| {
                    let z = layer.depth_at(u, v);
                    z >= lo && z <= hi
                });
                if !ok {
                    layer.slope = [0.0, 0.0];
                }
            }
            layers.push(layer);
        }
        let spec = Self { seed, layers, background_depth, background };
        spec.validate()?;
        Ok(spec)
    }
}

fn corners(e: &[f64; 4]) -> impl Iterator<Item = (f64, f64)> {
    let e = *e;
    [(e[0], e[2]), (e[1], e[2]), (e[0], e[3]), (e[1], e[3])].into_iter()
}

/// Render the view of a camera posed by `pose` (reference coordinates map
/// into it as `R X + t`). The identity pose renders the reference view.
///
/// Returns the image and the per-pixel depth along the view's optical axis.
pub fn render_scene(spec: &SceneSpec, camera: &CameraModel, pose: &RelativePose) -> Result<(ImageBuffer, DepthMap)> {
    spec.validate()?;
    camera.validate()?;
    pose.validate()?;
    let (h, w) = (camera.height, camera.width);
    let n = h * w;
    let rt = pose.rotation.transpose();
    let centre = -(rt * pose.translation);
    let mut image = ImageBuffer::zeros(3, h, w);
    let mut depth = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            // View-frame ray with unit z, so the ray parameter is view depth.
            let dir = rt * camera.unproject(x as f64, y as f64);
            let mut best: Option<(f64, &Texture, Vector3<f64>)> = None;
            let bg_normal = Vector3::z();
            let candidates = spec
                .layers
                .iter()
                .map(|l| (l.normal(), l.depth, &l.texture, Some(&l.extent)))
                .chain(std::iter::once((bg_normal, spec.background_depth, &spec.background, None)));
            for (normal, d, texture, extent) in candidates {
                let denom = normal.dot(&dir);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let s = (d - normal.dot(&centre)) / denom;
                if !(s > 0.0) || best.as_ref().is_some_and(|b| b.0 <= s) {
                    continue;
                }
                let p = centre + dir * s;
                if let Some(e) = extent {
                    if p.z <= 0.0 {
                        continue;
                    }
                    let (u, v) = (p.x / p.z, p.y / p.z);
                    if !(u >= e[0] && u <= e[1] && v >= e[2] && v <= e[3]) {
                        continue;
                    }
                }
                best = Some((s, texture, p));
            }
            let Some((s, texture, p)) = best else {
                return Err(Error::Render(format!("pixel ({x}, {y}) sees no surface; camera is behind all layers")));
            };
            depth[y * w + x] = s;
            let rgb = texture.colour(p.x, p.y);
            for (c, v) in rgb.into_iter().enumerate() {
                image.set(c, y, x, v);
            }
        }
    }
    Ok((image, DepthMap::from_values(h, w, depth)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::homography_for_plane;
    use crate::geometry::warp_image;

    fn camera() -> CameraModel {
        CameraModel::centered(50.0, 64, 48).unwrap()
    }

    fn textured(depth: f64, seed: u64) -> Texture {
        Texture::random(&mut ChaCha8Rng::seed_from_u64(seed), depth, 50.0, 8.0, 16.0)
    }

    #[test]
    fn single_layer_gives_constant_depth() {
        let spec = SceneSpec { seed: 0, layers: vec![], background_depth: 3.5, background: textured(3.5, 1) };
        let (img, depth) = render_scene(&spec, &camera(), &RelativePose::identity()).unwrap();
        assert!(depth.values.iter().all(|&d| (d - 3.5).abs() < 1e-12));
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn occluder_gives_two_depth_modes() {
        let cam = camera();
        // Near layer covers the left half of the view.
        let near = SceneLayer::fronto(2.0, [-10.0, -0.5 / 50.0, -10.0, 10.0], textured(2.0, 2));
        let spec = SceneSpec { seed: 0, layers: vec![near], background_depth: 6.0, background: textured(6.0, 3) };
        let (_, depth) = render_scene(&spec, &cam, &RelativePose::identity()).unwrap();
        let near_count = depth.values.iter().filter(|&&d| (d - 2.0).abs() < 1e-12).count();
        let far_count = depth.values.iter().filter(|&&d| (d - 6.0).abs() < 1e-12).count();
        assert_eq!(near_count + far_count, 64 * 48);
        assert_eq!(near_count, 32 * 48);
    }

    #[test]
    fn rendering_is_deterministic() {
        let cam = camera();
        let spec = SceneSpec::random(42, &cam, &SceneStyle::new(1.0, 10.0)).unwrap();
        let pose = RelativePose::from_axis_angle([0.01, -0.02, 0.0], [0.2, 0.0, 0.05]);
        let a = render_scene(&spec, &cam, &pose).unwrap();
        let b = render_scene(&SceneSpec::random(42, &cam, &SceneStyle::new(1.0, 10.0)).unwrap(), &cam, &pose).unwrap();
        assert_eq!(a, b);
        assert!(a.1.valid_values().all(|d| d > 0.0));
    }

    #[test]
    fn random_scenes_stay_in_range() {
        let cam = camera();
        for seed in 0..20 {
            let spec = SceneSpec::random(seed, &cam, &SceneStyle::new(1.0, 10.0)).unwrap();
            let (_, depth) = render_scene(&spec, &cam, &RelativePose::identity()).unwrap();
            assert!(depth.values.iter().all(|&d| (1.0..=10.0).contains(&d)), "seed {seed}");
        }
    }

    #[test]
    fn occlusion_keeps_nearest_surface() {
        let cam = camera();
        let spec = SceneSpec::random(5, &cam, &SceneStyle { max_layers: 3, ..SceneStyle::new(1.0, 10.0) }).unwrap();
        let (_, depth) = render_scene(&spec, &cam, &RelativePose::identity()).unwrap();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let ray = cam.unproject(x as f64, y as f64);
                let mut nearest = spec.background_depth;
                for l in &spec.layers {
                    let e = l.extent;
                    if ray.x >= e[0] && ray.x <= e[1] && ray.y >= e[2] && ray.y <= e[3] {
                        nearest = nearest.min(l.depth_at(ray.x, ray.y));
                    }
                }
                assert!((depth.values[y * cam.width + x] - nearest).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn true_plane_warp_matches_reference() {
        let cam = camera();
        let spec = SceneSpec { seed: 0, layers: vec![], background_depth: 4.0, background: textured(4.0, 9) };
        let pose = RelativePose::from_translation([0.3, 0.05, 0.0]);
        let (reference, _) = render_scene(&spec, &cam, &RelativePose::identity()).unwrap();
        let (neighbour, _) = render_scene(&spec, &cam, &pose).unwrap();
        let warped = warp_image(&neighbour, &homography_for_plane(&cam, &pose, 4.0).unwrap());
        let mask = warped.validity_mask.clone().unwrap();
        let n = 64 * 48;
        let (mut err, mut count) = (0.0, 0);
        for c in 0..3 {
            for p in (0..n).filter(|&p| mask[p]) {
                err += (warped.data[c * n + p] - reference.data[c * n + p]).abs();
                count += 1;
            }
        }
        assert!(err / (count as f64) < 0.02, "{}", err / count as f64);
    }

    #[test]
    fn camera_behind_everything_fails() {
        let spec = SceneSpec { seed: 0, layers: vec![], background_depth: 1.0, background: Texture::flat([0.5; 3]) };
        let pose = RelativePose::from_translation([0.0, 0.0, -2.0]);
        assert!(matches!(render_scene(&spec, &camera(), &pose), Err(Error::Render(_))));
    }
}
