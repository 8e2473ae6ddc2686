use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{build_warp_volume, CameraModel, ImageBuffer, RelativePose};
use crate::masks::DepthMap;
use crate::neural::train::TrainingExample;
use crate::sampling::PlaneSet;

/// Random neighbour motion. Rotation components are uniform in
/// `[-max_rotation, max_rotation]` radians; each translation component has
/// magnitude uniform in `[translation_min, translation_max]` metres and a
/// random sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub neighbours: usize,
    pub max_rotation: f64,
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
}

impl MotionProfile {
    /// Mostly sideways handheld-like motion.
    pub fn handheld(neighbours: usize) -> Self {
        Self { neighbours, max_rotation: 0.02, translation_min: [0.15, 0.0, 0.0], translation_max: [0.3, 0.05, 0.05] }
    }

    pub fn zero(neighbours: usize) -> Self {
        Self { neighbours, max_rotation: 0.0, translation_min: [0.0; 3], translation_max: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbours == 0 {
            return Err(Error::InvalidArgument("at least one neighbour is required".into()));
        }
        if !(self.max_rotation >= 0.0 && self.max_rotation < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!("rotation bound {} outside [0, pi/2)", self.max_rotation)));
        }
        for a in 0..3 {
            let (lo, hi) = (self.translation_min[a], self.translation_max[a]);
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("translation range {lo}..{hi} on axis {a} is invalid")));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> RelativePose {
        let mut aa = [0.0; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            if self.max_rotation > 0.0 {
                aa[a] = rng.gen_range(-self.max_rotation..=self.max_rotation);
            }
            let (lo, hi) = (self.translation_min[a], self.translation_max[a]);
            let mag = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            t[a] = if rng.gen::<bool>() { mag } else { -mag };
        }
        RelativePose::from_axis_angle(aa, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub reference: ImageBuffer,
    pub neighbours: Vec<(ImageBuffer, RelativePose)>,
    pub camera: CameraModel,
    pub truth: DepthMap,
}

impl Sample {
    /// Warp volumes for every neighbour, ready for training.
    pub fn to_training_example(&self, planes: &PlaneSet) -> Result<TrainingExample> {
        let volumes = self
            .neighbours
            .iter()
            .map(|(img, pose)| build_warp_volume(&self.reference, img, &self.camera, pose, planes))
            .collect::<Result<_>>()?;
        Ok(TrainingExample { reference: self.reference.clone(), volumes, truth: self.truth.clone() })
    }
}

/// Fraction of reference pixels whose surface point projects inside the
/// neighbour image.
pub fn overlap_fraction(camera: &CameraModel, pose: &RelativePose, truth: &DepthMap) -> f64 {
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut inside = 0usize;
    for y in 0..truth.height {
        for x in 0..truth.width {
            let p = y * truth.width + x;
            if !truth.validity[p] {
                continue;
            }
            let q = pose.transform(&(camera.unproject(x as f64, y as f64) * truth.values[p]));
            if let Some((u, v)) = camera.project(&q) {
                if u >= 0.0 && u <= w - 1.0 && v >= 0.0 && v <= h - 1.0 {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / truth.len().max(1) as f64
}

pub fn build_sample(spec: &SceneSpec, camera: &CameraModel, profile: &MotionProfile) -> Result<Sample> {
    profile.validate()?;
    let (reference, truth) = render_scene(spec, camera, &RelativePose::identity())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut neighbours = Vec::with_capacity(profile.neighbours);
    for k in 0..profile.neighbours {
        let pose = profile.draw(&mut rng);
        if overlap_fraction(camera, &pose, &truth) == 0.0 {
            return Err(Error::Render(format!("neighbour {k} of scene {} does not overlap the reference", spec.seed)));
        }
        let (img, _) = render_scene(spec, camera, &pose)?;
        neighbours.push((img, pose));
    }
    Ok(Sample { seed: spec.seed, reference, neighbours, camera: *camera, truth })
}

pub fn build_dataset(specs: &[SceneSpec], camera: &CameraModel, profile: &MotionProfile) -> Result<Vec<Sample>> {
    if specs.is_empty() {
        return Err(Error::Empty("no scene specs".into()));
    }
    specs.iter().map(|s| build_sample(s, camera, profile)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::render::SceneStyle;

    fn camera() -> CameraModel {
        CameraModel::centered(50.0, 32, 24).unwrap()
    }

    fn specs(n: u64) -> Vec<SceneSpec> {
        (0..n).map(|s| SceneSpec::random(s, &camera(), &SceneStyle::new(1.0, 10.0)).unwrap()).collect()
    }

    #[test]
    fn counts_and_determinism() {
        let specs = specs(20);
        let a = build_dataset(&specs, &camera(), &MotionProfile::handheld(2)).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.iter().map(|s| s.neighbours.len()).sum::<usize>(), 40);
        let b = build_dataset(&specs, &camera(), &MotionProfile::handheld(2)).unwrap();
        assert_eq!(a, b);
        assert!(build_dataset(&[], &camera(), &MotionProfile::handheld(2)).is_err());
    }

    #[test]
    fn zero_motion_reproduces_reference() {
        let s = build_sample(&specs(1)[0], &camera(), &MotionProfile::zero(2)).unwrap();
        for (img, _) in &s.neighbours {
            assert_eq!(img, &s.reference);
        }
    }

    #[test]
    fn sideways_motion_gives_horizontal_parallax() {
        let cam = camera();
        let profile = MotionProfile { neighbours: 1, max_rotation: 0.0, translation_min: [0.2, 0.0, 0.0], translation_max: [0.2, 0.0, 0.0] };
        let s = build_sample(&specs(1)[0], &cam, &profile).unwrap();
        let pose = s.neighbours[0].1;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let d = s.truth.values[y * cam.width + x];
                let q = pose.transform(&(cam.unproject(x as f64, y as f64) * d));
                let (u, v) = cam.project(&q).unwrap();
                assert!((v - y as f64).abs() < 1e-9);
                assert!(((u - x as f64).abs() - 50.0 * 0.2 / d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_overlap_is_an_error() {
        let profile = MotionProfile { neighbours: 1, max_rotation: 0.0, translation_min: [500.0, 0.0, 0.0], translation_max: [500.0, 0.0, 0.0] };
        assert!(matches!(build_sample(&specs(1)[0], &camera(), &profile), Err(Error::Render(_))));
    }
}
