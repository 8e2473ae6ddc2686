//! Synthetic scenes with exact depth, dataset assembly and depth metrics.

pub mod dataset;
pub mod metrics;
pub mod render;

pub use dataset::{build_dataset, build_sample, overlap_fraction, MotionProfile, Sample};
pub use metrics::{compute_metrics, MetricReport};
pub use render::{render_scene, SceneLayer, SceneSpec, SceneStyle, Texture, Wave};
