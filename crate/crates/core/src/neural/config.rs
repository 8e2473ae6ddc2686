use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MIN_IMAGE_SIDE;

pub const MASK_SCALES: usize = 4;
pub const DISP_SCALES: usize = 6;
pub const FINEST_LOSS_WEIGHT: f64 = 0.5;
pub const COARSE_LOSS_WEIGHT: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of sweep planes `D`.
    pub planes: usize,
    pub base_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub mask_scales: usize,
    pub disp_scales: usize,
    /// DispNet loss weight per scale, finest first.
    pub loss_weights: Vec<f64>,
}

impl NetworkConfig {
    pub fn new(planes: usize, input_height: usize, input_width: usize) -> Self {
        let mut loss_weights = vec![COARSE_LOSS_WEIGHT; DISP_SCALES];
        loss_weights[0] = FINEST_LOSS_WEIGHT;
        Self {
            planes,
            base_channels: 8,
            input_height,
            input_width,
            mask_scales: MASK_SCALES,
            disp_scales: DISP_SCALES,
            loss_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.planes == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("plane count and base channels must be positive".into()));
        }
        if self.input_height < MIN_IMAGE_SIDE || self.input_width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} below the {MIN_IMAGE_SIDE}-pixel minimum",
                self.input_width, self.input_height
            )));
        }
        if self.mask_scales != MASK_SCALES || self.disp_scales != DISP_SCALES {
            return Err(Error::InvalidArgument(format!(
                "networks predict {MASK_SCALES} mask scales and {DISP_SCALES} depth scales"
            )));
        }
        if self.loss_weights.len() != self.disp_scales || self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("need one non-negative loss weight per depth scale".into()));
        }
        Ok(())
    }

    /// Channels of the MaskNet input: the reference plus one warp per plane.
    pub fn masknet_in_channels(&self) -> usize {
        3 * (1 + self.planes)
    }

    pub fn dispnet_in_channels(&self) -> usize {
        3 + self.planes
    }

    /// Spatial size after `halvings` stride-2 reductions.
    pub fn scale_dims(&self, halvings: usize) -> (usize, usize) {
        let mut dims = (self.input_height, self.input_width);
        for _ in 0..halvings {
            dims = (dims.0.div_ceil(2), dims.1.div_ceil(2));
        }
        dims
    }
}
