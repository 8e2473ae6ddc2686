use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::BatchStats;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Momentum of the batchnorm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Named tensors in deterministic (lexicographic) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replace every tensor with the same-named one from `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in &mut self.tensors {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} in checkpoint but model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Deconv,
    BatchNorm,
    Relu,
    LeakyRelu,
    Sigmoid,
    AvgPool,
    ConcatSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Self { kind: LayerKind::Conv, kernel, stride, in_channels, out_channels }
    }

    /// 2x nearest upsampling followed by a 3x3 convolution.
    pub fn deconv(in_channels: usize, out_channels: usize) -> Self {
        Self { kind: LayerKind::Deconv, kernel: 3, stride: 1, in_channels, out_channels }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, LayerKind::Conv | LayerKind::Deconv) {
            if self.kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!("kernel {} must be odd", self.kernel)));
            }
            if !(self.stride == 1 || self.stride == 2) {
                return Err(Error::InvalidArgument(format!("stride {} not in {{1, 2}}", self.stride)));
            }
            if self.in_channels == 0 || self.out_channels == 0 {
                return Err(Error::InvalidArgument("layer has zero channels".into()));
            }
        }
        Ok(())
    }
}

/// Declares parameters with deterministic initialisation.
pub(crate) struct ParamBuilder {
    pub params: ParamStore,
    pub buffers: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { params: ParamStore::new(), buffers: ParamStore::new(), rng }
    }

    /// Convolution weights from a fan-in scaled uniform distribution.
    pub fn conv(&mut self, name: &str, spec: LayerSpec, bias: bool) -> Result<()> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        self.conv_with(name, spec, bound, bias.then_some(0.0))
    }

    /// Convolution with explicit uniform bound and optional constant bias.
    pub fn conv_with(&mut self, name: &str, spec: LayerSpec, bound: f64, bias: Option<f64>) -> Result<()> {
        spec.validate()?;
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if bound > 0.0 { self.rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        self.params.insert(format!("{name}.weight"), Tensor::new(shape.to_vec(), data)?);
        if let Some(b) = bias {
            self.params.insert(format!("{name}.bias"), Tensor::filled(&[spec.out_channels], b));
        }
        Ok(())
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0));
    }
}

/// Fold observed batch statistics into running averages.
pub fn update_running_stats(buffers: &mut ParamStore, stats: &[BatchStats]) -> Result<()> {
    for s in stats {
        for (suffix, observed) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let key = format!("{}.{suffix}", s.name);
            let t = buffers
                .get_mut(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{key}`")))?;
            for (r, o) in t.data_mut().iter_mut().zip(observed) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layer_spec_rules() {
        assert!(LayerSpec::conv(3, 2, 4, 8).validate().is_ok());
        assert!(LayerSpec::conv(4, 2, 4, 8).validate().is_err());
        assert!(LayerSpec::conv(3, 3, 4, 8).validate().is_err());
    }

    #[test]
    fn load_reports_offending_tensor() {
        let mut a = ParamStore::new();
        a.insert("net.w", Tensor::zeros(&[2, 3]));
        let mut b = ParamStore::new();
        b.insert("net.w", Tensor::zeros(&[3, 2]));
        let err = a.load_from(&b).unwrap_err().to_string();
        assert!(err.contains("net.w"), "{err}");
        assert!(a.load_from(&ParamStore::new()).unwrap_err().to_string().contains("net.w"));
    }

    #[test]
    fn builder_is_deterministic() {
        let make = || {
            let mut b = ParamBuilder::new(ChaCha8Rng::seed_from_u64(3));
            b.conv("c", LayerSpec::conv(3, 1, 2, 4), true).unwrap();
            b.params
        };
        assert_eq!(make(), make());
        let p = make();
        let w = p.get("c.weight").unwrap();
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
}
