//! MaskNet and DispNet encoder-decoders.
//!
//! Both encoders downsample with stride-2 convolutions whose outputs are
//! `ceil(n / 2)` wide; decoders upsample 2x with nearest neighbour and crop
//! to the matching skip connection, so any input of at least 8x8 works.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{NetworkConfig, LEAKY_SLOPE};
use super::graph::{Graph, Var};
use super::params::{LayerSpec, ParamBuilder, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{ImageBuffer, WarpVolume};
use crate::masks::{fuse_masks, MultiplaneMask};

/// Bias of the inverse-depth heads so the ReLU starts in its active region.
pub const DISP_HEAD_BIAS: f64 = 0.25;
/// Weight scale of the inverse-depth heads relative to fan-in initialisation.
const DISP_HEAD_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Followed by batchnorm, no bias.
    Normed,
    /// Plain conv with zero bias.
    Biased,
    /// Zero weights and bias: sigmoid heads start at exactly 0.5.
    ZeroHead,
    /// Small weights, positive bias.
    DispHead,
}

#[derive(Debug, Clone)]
struct LayerDef {
    name: String,
    spec: LayerSpec,
    init: Init,
}

fn def(name: &str, spec: LayerSpec, init: Init) -> LayerDef {
    LayerDef { name: name.to_string(), spec, init }
}

fn build(prefix: &str, layers: &[LayerDef], seed: u64) -> Result<(ParamStore, ParamStore)> {
    let mut b = ParamBuilder::new(ChaCha8Rng::seed_from_u64(seed));
    for l in layers {
        let name = format!("{prefix}.{}", l.name);
        match l.init {
            Init::Normed => {
                b.conv(&format!("{name}.conv"), l.spec, false)?;
                b.batch_norm(&format!("{name}.bn"), l.spec.out_channels);
            }
            Init::Biased => b.conv(&format!("{name}.conv"), l.spec, true)?,
            Init::ZeroHead => b.conv_with(&format!("{name}.conv"), l.spec, 0.0, Some(0.0))?,
            Init::DispHead => {
                let fan_in = (l.spec.in_channels * l.spec.kernel * l.spec.kernel) as f64;
                let bound = DISP_HEAD_GAIN * (3.0 / fan_in).sqrt();
                b.conv_with(&format!("{name}.conv"), l.spec, bound, Some(DISP_HEAD_BIAS))?
            }
        }
    }
    Ok((b.params, b.buffers))
}

/// Parameter lookups for one forward pass.
struct Layers<'a> {
    prefix: &'a str,
    params: &'a ParamStore,
    buffers: &'a ParamStore,
    defs: &'a [LayerDef],
}

impl Layers<'_> {
    fn spec(&self, name: &str) -> &LayerSpec {
        &self.defs.iter().find(|d| d.name == name).expect("layer declared").spec
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let spec = *self.spec(name);
        let key = format!("{}.{name}.conv", self.prefix);
        let w = g.param(&format!("{key}.weight"), self.params.get(&format!("{key}.weight"))?);
        let bias_key = format!("{key}.bias");
        let b = if self.params.contains(&bias_key) { Some(g.param(&bias_key, self.params.get(&bias_key)?)) } else { None };
        g.conv2d(x, w, b, spec.stride)
    }

    fn bn(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let key = format!("{}.{name}.bn", self.prefix);
        let gamma = g.param(&format!("{key}.gamma"), self.params.get(&format!("{key}.gamma"))?);
        let beta = g.param(&format!("{key}.beta"), self.params.get(&format!("{key}.beta"))?);
        let rm = self.buffers.get(&format!("{key}.running_mean"))?.data();
        let rv = self.buffers.get(&format!("{key}.running_var"))?.data();
        g.batch_norm(&key, x, gamma, beta, Some((rm, rv)))
    }

    fn conv_bn_relu(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(g, name, x)?;
        let y = self.bn(g, name, y)?;
        Ok(g.relu(y))
    }

    fn conv_bn_leaky(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(g, name, x)?;
        let y = self.bn(g, name, y)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Upsample to the spatial size of `like`.
    fn upsample_to(&self, g: &mut Graph, x: Var, like: (usize, usize)) -> Result<Var> {
        g.upsample2x(x, like.0, like.1)
    }
}

fn spatial(g: &Graph, v: Var) -> (usize, usize) {
    let s = g.shape(v);
    (s[2], s[3])
}

fn check_input(g: &Graph, x: Var, channels: usize, what: &str) -> Result<()> {
    let (_, c, h, w) = g.value(x).nchw()?;
    if c != channels {
        return Err(Error::ShapeMismatch(format!("{what} expects {channels} input channels, got {c}")));
    }
    if h < 8 || w < 8 {
        return Err(Error::ShapeMismatch(format!("{what} input {w}x{h} is smaller than 8x8")));
    }
    Ok(())
}

fn mask_layers(cfg: &NetworkConfig) -> Vec<LayerDef> {
    let b = cfg.base_channels;
    let c = [b, 2 * b, 4 * b, 8 * b, 8 * b];
    let d = cfg.planes;
    vec![
        def("enc1", LayerSpec::conv(7, 2, cfg.masknet_in_channels(), c[0]), Init::Normed),
        def("enc2", LayerSpec::conv(5, 2, c[0], c[1]), Init::Normed),
        def("enc3", LayerSpec::conv(3, 2, c[1], c[2]), Init::Normed),
        def("enc4", LayerSpec::conv(3, 2, c[2], c[3]), Init::Normed),
        def("enc5", LayerSpec::conv(3, 2, c[3], c[4]), Init::Normed),
        def("up4", LayerSpec::deconv(c[4], c[3]), Init::Normed),
        def("iconv4", LayerSpec::conv(3, 1, 2 * c[3], c[3]), Init::Normed),
        def("up3", LayerSpec::deconv(c[3], c[2]), Init::Normed),
        def("iconv3", LayerSpec::conv(3, 1, 2 * c[2], c[2]), Init::Normed),
        def("pred3", LayerSpec::conv(3, 1, c[2], d), Init::ZeroHead),
        def("up2", LayerSpec::deconv(c[2], c[1]), Init::Normed),
        def("iconv2", LayerSpec::conv(3, 1, 2 * c[1], c[1]), Init::Normed),
        def("pred2", LayerSpec::conv(3, 1, c[1], d), Init::ZeroHead),
        def("up1", LayerSpec::deconv(c[1], c[0]), Init::Normed),
        def("iconv1", LayerSpec::conv(3, 1, 2 * c[0], c[0]), Init::Normed),
        def("pred1", LayerSpec::conv(3, 1, c[0], d), Init::ZeroHead),
        def("up0", LayerSpec::deconv(c[0], b), Init::Normed),
        def("iconv0", LayerSpec::conv(3, 1, b, b), Init::Normed),
        def("pred0", LayerSpec::conv(3, 1, b, d), Init::ZeroHead),
    ]
}

fn disp_layers(cfg: &NetworkConfig) -> Vec<LayerDef> {
    let b = cfg.base_channels;
    let c = [b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b];
    let input = cfg.dispnet_in_channels();
    let mut layers = vec![
        def("enc1", LayerSpec::conv(7, 2, input, c[0]), Init::Normed),
        def("enc2", LayerSpec::conv(5, 2, c[0], c[1]), Init::Normed),
        def("enc3", LayerSpec::conv(3, 2, c[1], c[2]), Init::Normed),
        def("enc4", LayerSpec::conv(3, 2, c[2], c[3]), Init::Normed),
        def("enc5", LayerSpec::conv(3, 2, c[3], c[4]), Init::Normed),
        def("enc6", LayerSpec::conv(3, 2, c[4], c[5]), Init::Normed),
    ];
    // Decoder level l sits at 1/2^l resolution; its skip is enc{l} or the input.
    for level in (0..=5).rev() {
        let above = c[level.min(5)];
        let out = if level == 0 { b } else { c[level - 1] };
        let skip = if level == 0 { input } else { c[level - 1] };
        layers.push(def(&format!("up{level}"), LayerSpec::deconv(above, out), Init::Biased));
        layers.push(def(&format!("iconv{level}"), LayerSpec::conv(3, 1, out + skip, out), Init::Normed));
        layers.push(def(&format!("pred{level}"), LayerSpec::conv(3, 1, out, 1), Init::DispHead));
    }
    layers
}

/// Mask prediction network; one forward pass per neighbour.
#[derive(Debug, Clone)]
pub struct MaskNet {
    cfg: NetworkConfig,
    layers: Vec<LayerDef>,
    params: ParamStore,
    buffers: ParamStore,
}

pub const MASKNET_PREFIX: &str = "masknet";
pub const DISPNET_PREFIX: &str = "dispnet";

impl MaskNet {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layers = mask_layers(&cfg);
        let (params, buffers) = build(MASKNET_PREFIX, &layers, seed)?;
        Ok(Self { cfg, layers, params, buffers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn layer_specs(&self) -> Vec<(String, LayerSpec)> {
        self.layers.iter().map(|l| (l.name.clone(), l.spec)).collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub(crate) fn params_mut_raw(&mut self) -> (&mut ParamStore, &mut ParamStore) {
        (&mut self.params, &mut self.buffers)
    }

    fn ctx(&self) -> Layers<'_> {
        Layers { prefix: MASKNET_PREFIX, params: &self.params, buffers: &self.buffers, defs: &self.layers }
    }

    /// Masks at 1/8, 1/4, 1/2 and full resolution (finest last), each with
    /// `D` sigmoid channels.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        check_input(g, x, self.cfg.masknet_in_channels(), "MaskNet")?;
        let l = self.ctx();
        let full = spatial(g, x);
        let e1 = l.conv_bn_relu(g, "enc1", x)?;
        let e2 = l.conv_bn_relu(g, "enc2", e1)?;
        let e3 = l.conv_bn_relu(g, "enc3", e2)?;
        let e4 = l.conv_bn_relu(g, "enc4", e3)?;
        let e5 = l.conv_bn_relu(g, "enc5", e4)?;

        let mut feat = e5;
        let mut outputs = Vec::with_capacity(4);
        for (level, skip) in [(4, Some(e4)), (3, Some(e3)), (2, Some(e2)), (1, Some(e1)), (0, None)] {
            let size = skip.map_or(full, |s| spatial(g, s));
            let up = l.upsample_to(g, feat, size)?;
            let up = l.conv_bn_relu(g, &format!("up{level}"), up)?;
            let joined = match skip {
                Some(s) => g.concat(&[up, s])?,
                None => up,
            };
            feat = l.conv_bn_relu(g, &format!("iconv{level}"), joined)?;
            if level <= 3 {
                let logits = l.conv(g, &format!("pred{level}"), feat)?;
                outputs.push(g.sigmoid(logits));
            }
        }
        Ok(outputs)
    }
}

/// Inverse-depth regression network.
#[derive(Debug, Clone)]
pub struct DispNet {
    cfg: NetworkConfig,
    layers: Vec<LayerDef>,
    params: ParamStore,
    buffers: ParamStore,
}

impl DispNet {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layers = disp_layers(&cfg);
        let (params, buffers) = build(DISPNET_PREFIX, &layers, seed)?;
        Ok(Self { cfg, layers, params, buffers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn layer_specs(&self) -> Vec<(String, LayerSpec)> {
        self.layers.iter().map(|l| (l.name.clone(), l.spec)).collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub(crate) fn params_mut_raw(&mut self) -> (&mut ParamStore, &mut ParamStore) {
        (&mut self.params, &mut self.buffers)
    }

    fn ctx(&self) -> Layers<'_> {
        Layers { prefix: DISPNET_PREFIX, params: &self.params, buffers: &self.buffers, defs: &self.layers }
    }

    /// Inverse depth at six scales, 1/32 up to full resolution (finest last).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        check_input(g, x, self.cfg.dispnet_in_channels(), "DispNet")?;
        let l = self.ctx();
        let mut skips = vec![x];
        let mut feat = x;
        for i in 1..=6 {
            feat = l.conv_bn_leaky(g, &format!("enc{i}"), feat)?;
            skips.push(feat);
        }
        let mut outputs = Vec::with_capacity(6);
        for level in (0..=5).rev() {
            let skip = skips[level];
            let up = l.upsample_to(g, feat, spatial(g, skip))?;
            let up = l.conv(g, &format!("up{level}"), up)?;
            let up = g.leaky_relu(up, LEAKY_SLOPE);
            let joined = g.concat(&[up, skip])?;
            feat = l.conv_bn_leaky(g, &format!("iconv{level}"), joined)?;
            let pred = l.conv(g, &format!("pred{level}"), feat)?;
            outputs.push(g.relu(pred));
        }
        Ok(outputs)
    }
}

/// Inverse-depth map at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

fn volume_tensor(volumes: &[&WarpVolume]) -> Result<Tensor> {
    let first = volumes.first().ok_or_else(|| Error::Empty("no warp volumes".into()))?;
    let mut data = Vec::with_capacity(volumes.len() * first.data.len());
    for v in volumes {
        if (v.planes, v.height, v.width) != (first.planes, first.height, first.width) {
            return Err(Error::ShapeMismatch("warp volumes differ in shape".into()));
        }
        data.extend_from_slice(&v.data);
    }
    Tensor::new(vec![volumes.len(), first.channels(), first.height, first.width], data)
}

fn to_masks(g: &Graph, v: Var) -> Result<Vec<MultiplaneMask>> {
    let (n, d, h, w) = g.value(v).nchw()?;
    let item = d * h * w;
    Ok(g.value(v)
        .data()
        .chunks(item)
        .take(n)
        .map(|c| MultiplaneMask { planes: d, height: h, width: w, values: c.to_vec(), validity: None })
        .collect())
}

/// Run MaskNet in inference mode on one warp volume.
pub fn forward_masknet(net: &MaskNet, volume: &WarpVolume) -> Result<Vec<MultiplaneMask>> {
    if volume.planes != net.config().planes {
        return Err(Error::ShapeMismatch(format!(
            "warp volume has {} planes, network expects {}",
            volume.planes,
            net.config().planes
        )));
    }
    let mut g = Graph::inference();
    let x = g.input(volume_tensor(&[volume])?);
    let outs = net.forward(&mut g, x)?;
    outs.iter().map(|&o| Ok(to_masks(&g, o)?.remove(0))).collect()
}

/// Finest-scale masks of every neighbour, averaged.
pub fn predict_fused_masks(net: &MaskNet, volumes: &[WarpVolume]) -> Result<MultiplaneMask> {
    let per: Vec<MultiplaneMask> = volumes
        .iter()
        .map(|v| forward_masknet(net, v).map(|mut m| m.pop().expect("four scales")))
        .collect::<Result<_>>()?;
    fuse_masks(&per)
}

/// DispNet input `[3 + D, H, W]`: fused masks followed by the reference RGB.
pub fn dispnet_input(masks: &MultiplaneMask, reference: &ImageBuffer) -> Result<Vec<f64>> {
    if reference.channels != 3 || (masks.height, masks.width) != (reference.height, reference.width) {
        return Err(Error::ShapeMismatch(format!(
            "masks {}x{} vs reference {}x{}x{}",
            masks.width, masks.height, reference.channels, reference.width, reference.height
        )));
    }
    let mut data = Vec::with_capacity(masks.values.len() + reference.data.len());
    data.extend_from_slice(&masks.values);
    data.extend_from_slice(&reference.data);
    Ok(data)
}

/// Run DispNet in inference mode.
pub fn forward_dispnet(net: &DispNet, masks: &MultiplaneMask, reference: &ImageBuffer) -> Result<Vec<InverseDepthMap>> {
    if masks.planes != net.config().planes {
        return Err(Error::ShapeMismatch(format!(
            "masks have {} planes, network expects {}",
            masks.planes,
            net.config().planes
        )));
    }
    let data = dispnet_input(masks, reference)?;
    let mut g = Graph::inference();
    let x = g.input(Tensor::new(vec![1, 3 + masks.planes, masks.height, masks.width], data)?);
    let outs = net.forward(&mut g, x)?;
    outs.iter()
        .map(|&o| {
            let (_, _, h, w) = g.value(o).nchw()?;
            Ok(InverseDepthMap { height: h, width: w, values: g.value(o).data().to_vec() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::LayerKind;

    fn small_cfg(planes: usize, h: usize, w: usize) -> NetworkConfig {
        NetworkConfig { base_channels: 4, ..NetworkConfig::new(planes, h, w) }
    }

    #[test]
    fn encoder_kernel_schedules() {
        let m = MaskNet::new(NetworkConfig::new(16, 48, 64), 1).unwrap();
        let enc: Vec<usize> = m.layer_specs().iter().filter(|(n, _)| n.starts_with("enc")).map(|(_, s)| s.kernel).collect();
        assert_eq!(enc, vec![7, 5, 3, 3, 3]);
        let d = DispNet::new(NetworkConfig::new(16, 48, 64), 1).unwrap();
        let enc: Vec<usize> = d.layer_specs().iter().filter(|(n, _)| n.starts_with("enc")).map(|(_, s)| s.kernel).collect();
        assert_eq!(enc, vec![7, 5, 3, 3, 3, 3]);
        assert_eq!(d.layer_specs().iter().filter(|(_, s)| s.kind == LayerKind::Deconv).count(), 6);
    }

    #[test]
    fn zero_heads_give_half() {
        let cfg = small_cfg(4, 16, 16);
        let net = MaskNet::new(cfg.clone(), 0).unwrap();
        let vol = WarpVolume { planes: 4, height: 16, width: 16, data: vec![0.0; 15 * 256], validity: vec![true; 4 * 256] };
        let outs = forward_masknet(&net, &vol).unwrap();
        assert_eq!(outs.len(), 4);
        for m in &outs {
            assert!(m.values.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn rejects_wrong_channels() {
        let net = MaskNet::new(small_cfg(4, 16, 16), 0).unwrap();
        let vol = WarpVolume { planes: 3, height: 16, width: 16, data: vec![0.0; 12 * 256], validity: vec![true; 3 * 256] };
        assert!(forward_masknet(&net, &vol).is_err());
        let d = DispNet::new(small_cfg(4, 16, 16), 0).unwrap();
        let masks = MultiplaneMask::new(3, 16, 16, vec![0.5; 3 * 256]).unwrap();
        assert!(forward_dispnet(&d, &masks, &ImageBuffer::zeros(3, 16, 16)).is_err());
    }
}
