//! Two-stage training: MaskNet first, then DispNet on the frozen MaskNet's
//! fused masks.
//!
//! Batch `it` draws items `it*B .. it*B + B` from an endless stream of
//! seeded per-epoch permutations, so a run resumed from a checkpoint sees
//! exactly the batches the uninterrupted run would have seen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{batch_augmentations, Augmentation};
use super::adam::{adam_step, AdamConfig, AdamState, DISPNET_LR, MASKNET_LR};
use super::checkpoint::Checkpoint;
use super::config::NetworkConfig;
use super::graph::Graph;
use super::loss::{depth_pyramid, graph_mask_loss, graph_multiscale_l1, mask_pyramid, ScaleTarget};
use super::nets::{dispnet_input, predict_fused_masks, DispNet, MaskNet};
use super::params::{update_running_stats, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{ImageBuffer, WarpVolume};
use crate::masks::{make_ground_truth_masks, DepthMap, MultiplaneMask};
use crate::sampling::PlaneSet;

pub const DEFAULT_BATCH_SIZE: usize = 4;

/// One reference view with its per-neighbour warp volumes and true depth.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub reference: ImageBuffer,
    pub volumes: Vec<WarpVolume>,
    pub truth: DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    /// Full training objective of the batch.
    pub loss: f64,
    /// Finest-scale term alone: fused-mask cross-entropy for MaskNet,
    /// unweighted inverse-depth L1 for DispNet.
    pub finest: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Total iterations, counted from zero (a resumed run stops at the same point).
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random flips and colour changes per batch item.
    pub augment: bool,
}

impl TrainOptions {
    pub fn new(iterations: u64, seed: u64) -> Self {
        Self { iterations, batch_size: DEFAULT_BATCH_SIZE, seed, augment: true }
    }

    /// Augmentations for iteration `it`, identities when disabled.
    pub fn augmentations(&self, it: u64) -> Vec<Augmentation> {
        if self.augment {
            batch_augmentations(self.seed, self.batch_size, it)
        } else {
            vec![Augmentation::IDENTITY; self.batch_size]
        }
    }
}

/// Dataset indices used by iteration `it`.
pub fn batch_indices(seed: u64, dataset_len: usize, batch: usize, it: u64) -> Vec<usize> {
    let n = dataset_len as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|k| {
            let j = it * batch as u64 + k;
            let epoch = j / n;
            if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled").1[(j % n) as usize]
        })
        .collect()
}

/// Precomputed MaskNet supervision.
#[derive(Debug, Clone)]
pub struct MaskDataset {
    examples: Vec<TrainingExample>,
    /// Per example, ground-truth masks finest first.
    targets: Vec<Vec<MultiplaneMask>>,
    neighbours: usize,
}

impl MaskDataset {
    pub fn new(examples: Vec<TrainingExample>, planes: &PlaneSet, cfg: &NetworkConfig) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::Empty("no training examples".into()))?;
        let neighbours = first.volumes.len();
        if neighbours == 0 {
            return Err(Error::InvalidArgument("training examples need at least one neighbour".into()));
        }
        for (i, e) in examples.iter().enumerate() {
            if e.volumes.len() != neighbours {
                return Err(Error::ShapeMismatch(format!("example {i} has {} neighbours, expected {neighbours}", e.volumes.len())));
            }
            for v in &e.volumes {
                if (v.planes, v.height, v.width) != (cfg.planes, cfg.input_height, cfg.input_width) {
                    return Err(Error::ShapeMismatch(format!(
                        "example {i} volume is {}x{}x{}, network expects {}x{}x{}",
                        v.planes, v.width, v.height, cfg.planes, cfg.input_width, cfg.input_height
                    )));
                }
            }
            if (e.truth.height, e.truth.width) != (cfg.input_height, cfg.input_width) {
                return Err(Error::ShapeMismatch(format!("example {i} depth map does not match the input size")));
            }
        }
        if planes.len() != cfg.planes {
            return Err(Error::ShapeMismatch(format!("{} planes for a {}-plane network", planes.len(), cfg.planes)));
        }
        let targets = examples
            .iter()
            .map(|e| mask_pyramid(&make_ground_truth_masks(&e.truth, planes), cfg.mask_scales))
            .collect();
        Ok(Self { examples, targets, neighbours })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    /// Ground-truth finest masks of example `i`.
    pub fn truth_masks(&self, i: usize) -> &MultiplaneMask {
        &self.targets[i][0]
    }
}

/// DispNet inputs: fused masks from a frozen MaskNet.
#[derive(Debug, Clone)]
pub struct DispExample {
    pub masks: MultiplaneMask,
    pub reference: ImageBuffer,
    pub truth: DepthMap,
}

pub fn prepare_disp_examples(masknet: &MaskNet, examples: &[TrainingExample]) -> Result<Vec<DispExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(DispExample {
                masks: predict_fused_masks(masknet, &e.volumes)?,
                reference: e.reference.clone(),
                truth: e.truth.clone(),
            })
        })
        .collect()
}

fn stack(parts: Vec<&[f64]>, shape_tail: [usize; 3]) -> Result<Tensor> {
    let n = parts.len();
    let data = parts.concat();
    Tensor::new(vec![n, shape_tail[0], shape_tail[1], shape_tail[2]], data)
}

fn apply_update(
    g: Graph,
    loss: super::graph::Var,
    params: &mut ParamStore,
    buffers: &mut ParamStore,
    adam: &mut AdamState,
) -> Result<()> {
    let mut g = g;
    let stats = g.take_batch_stats();
    let grads = g.backward(loss)?.into_param_grads();
    adam_step(params, &grads, adam)?;
    update_running_stats(buffers, &stats)
}

fn save_common(ck: &mut Checkpoint, params: &ParamStore, buffers: &ParamStore, adam: &AdamState, iteration: u64, cfg: &NetworkConfig) {
    ck.insert_store("param", params);
    ck.insert_store("buffer", buffers);
    ck.insert_store("adam.m", &adam.first);
    ck.insert_store("adam.v", &adam.second);
    ck.insert_scalar("adam/step", adam.step as f64);
    ck.insert_scalar("adam/lr", adam.config.lr);
    ck.insert_scalar("train/iteration", iteration as f64);
    ck.insert_scalar("config/planes", cfg.planes as f64);
    ck.insert_scalar("config/base_channels", cfg.base_channels as f64);
    ck.insert_scalar("config/height", cfg.input_height as f64);
    ck.insert_scalar("config/width", cfg.input_width as f64);
}

/// Network configuration recorded in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<NetworkConfig> {
    let get = |k: &str| -> Result<usize> {
        let v = ck.scalar(k)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("`{k}` = {v} is not a count")));
        }
        Ok(v as usize)
    };
    let mut cfg = NetworkConfig::new(get("config/planes")?, get("config/height")?, get("config/width")?);
    cfg.base_channels = get("config/base_channels")?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_common(ck: &Checkpoint, params: &mut ParamStore, buffers: &mut ParamStore) -> Result<(AdamState, u64)> {
    params.load_from(&ck.store("param"))?;
    buffers.load_from(&ck.store("buffer"))?;
    let mut adam = AdamState::new(AdamConfig::with_lr(ck.scalar("adam/lr")?))?;
    adam.first = ck.store("adam.m");
    adam.second = ck.store("adam.v");
    adam.step = ck.scalar("adam/step")? as u64;
    Ok((adam, ck.scalar("train/iteration")? as u64))
}

pub struct MaskStage {
    pub net: MaskNet,
    pub adam: AdamState,
    /// Iterations completed.
    pub iteration: u64,
}

impl MaskStage {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        Self::with_optimizer(cfg, seed, AdamConfig::with_lr(MASKNET_LR))
    }

    pub fn with_optimizer(cfg: NetworkConfig, seed: u64, adam: AdamConfig) -> Result<Self> {
        Ok(Self { net: MaskNet::new(cfg, seed)?, adam: AdamState::new(adam)?, iteration: 0 })
    }

    /// One optimisation step on the given examples, each with its augmentation.
    pub fn step(&mut self, data: &MaskDataset, items: &[usize], augs: &[Augmentation]) -> Result<LossRecord> {
        if augs.len() != items.len() {
            return Err(Error::ShapeMismatch(format!("{} items but {} augmentations", items.len(), augs.len())));
        }
        let cfg = self.net.config().clone();
        let k = data.neighbours;
        let (c, h, w) = (cfg.masknet_in_channels(), cfg.input_height, cfg.input_width);
        let volumes: Vec<Vec<f64>> = items
            .iter()
            .zip(augs)
            .flat_map(|(&i, a)| data.examples[i].volumes.iter().map(move |v| a.apply_rgb(&v.data, h, w)))
            .collect();
        let pyramids: Vec<Vec<MultiplaneMask>> = items
            .iter()
            .zip(augs)
            .map(|(&i, a)| data.targets[i].iter().map(|m| a.apply_masks(m)).collect())
            .collect();
        let mut g = Graph::training();
        let x = g.input(stack(volumes.iter().map(Vec::as_slice).collect(), [c, h, w])?);
        let mut outputs = self.net.forward(&mut g, x)?;

        // Coarse scales per neighbour, the finest after fusing neighbours.
        let finest = outputs.pop().expect("four scales");
        let fused = g.group_mean(finest, k)?;
        let scales = outputs.len();
        let mut targets: Vec<ScaleTarget> = Vec::with_capacity(scales + 1);
        for s in 0..scales {
            let level = scales - s; // outputs are coarse to fine
            let mut t = ScaleTarget::default();
            for p in &pyramids {
                for _ in 0..k {
                    t.push_masks(&p[level]);
                }
            }
            targets.push(t);
        }
        let mut fine = ScaleTarget::default();
        for p in &pyramids {
            fine.push_masks(&p[0]);
        }
        let finest_bce = g.bce(fused, &fine.target, &fine.weight)?;
        let coarse = graph_mask_loss(&mut g, &outputs, &targets)?;
        let loss = g.add(coarse, finest_bce)?;
        let record = LossRecord { iteration: self.iteration, loss: g.value(loss).item(), finest: g.value(finest_bce).item() };
        if !record.loss.is_finite() {
            return Err(Error::NonFinite(format!("MaskNet loss at iteration {}", self.iteration)));
        }
        let (p, b) = self.net.params_mut_raw();
        apply_update(g, loss, p, b, &mut self.adam)?;
        self.iteration += 1;
        Ok(record)
    }

    /// Train until `opts.iterations` or until `stop` returns true.
    pub fn run<F>(&mut self, data: &MaskDataset, opts: &TrainOptions, mut stop: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(&Self, &LossRecord) -> Result<bool>,
    {
        let mut log = Vec::new();
        while self.iteration < opts.iterations {
            let items = batch_indices(opts.seed, data.len(), opts.batch_size, self.iteration);
            let rec = self.step(data, &items, &opts.augmentations(self.iteration))?;
            log.push(rec);
            if stop(self, &rec)? {
                break;
            }
        }
        Ok(log)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        save_common(&mut ck, self.net.params(), self.net.buffers(), &self.adam, self.iteration, self.net.config());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = MaskNet::new(checkpoint_config(ck)?, 0)?;
        let (adam, iteration) = {
            let (p, b) = net.params_mut_raw();
            load_common(ck, p, b)?
        };
        Ok(Self { net, adam, iteration })
    }
}

/// Mean finest-scale cross-entropy of the fused masks over a dataset, in
/// inference mode.
pub fn evaluate_masknet(net: &MaskNet, data: &MaskDataset) -> Result<f64> {
    let mut total = 0.0;
    for (i, e) in data.examples.iter().enumerate() {
        let fused = predict_fused_masks(net, &e.volumes)?;
        let truth = &data.targets[i][0];
        let validity = truth.validity.clone().unwrap_or_else(|| vec![true; truth.height * truth.width]);
        total += super::loss::bce_mask_loss(&fused, truth, &validity)?;
    }
    Ok(total / data.len() as f64)
}

pub struct DispStage {
    pub net: DispNet,
    pub adam: AdamState,
    pub iteration: u64,
}

impl DispStage {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        Self::with_optimizer(cfg, seed, AdamConfig::with_lr(DISPNET_LR))
    }

    pub fn with_optimizer(cfg: NetworkConfig, seed: u64, adam: AdamConfig) -> Result<Self> {
        Ok(Self { net: DispNet::new(cfg, seed)?, adam: AdamState::new(adam)?, iteration: 0 })
    }

    pub fn step(&mut self, data: &[DispExample], items: &[usize], augs: &[Augmentation]) -> Result<LossRecord> {
        if augs.len() != items.len() {
            return Err(Error::ShapeMismatch(format!("{} items but {} augmentations", items.len(), augs.len())));
        }
        let cfg = self.net.config().clone();
        let (c, h, w) = (cfg.dispnet_in_channels(), cfg.input_height, cfg.input_width);
        let inputs: Vec<Vec<f64>> = items
            .iter()
            .zip(augs)
            .map(|(&i, a)| dispnet_input(&a.apply_masks(&data[i].masks), &a.apply_image(&data[i].reference)))
            .collect::<Result<_>>()?;
        let mut g = Graph::training();
        let x = g.input(stack(inputs.iter().map(Vec::as_slice).collect(), [c, h, w])?);
        let outputs = self.net.forward(&mut g, x)?;
        let scales = outputs.len();
        let pyramids: Vec<Vec<DepthMap>> =
            items.iter().zip(augs).map(|(&i, a)| depth_pyramid(&a.apply_depth(&data[i].truth), scales)).collect();
        let mut targets = Vec::with_capacity(scales);
        for s in 0..scales {
            let level = scales - 1 - s;
            let mut t = ScaleTarget::default();
            for p in &pyramids {
                t.push_inverse_depth(&p[level]);
            }
            targets.push(t);
        }
        let weights: Vec<f64> = cfg.loss_weights.iter().rev().copied().collect();
        let loss = graph_multiscale_l1(&mut g, &outputs, &targets, &weights)?;
        let fine = targets.last().expect("six scales");
        let finest = g.value(outputs[scales - 1])
            .data()
            .iter()
            .zip(&fine.target)
            .zip(&fine.weight)
            .filter(|(_, &wt)| wt != 0.0)
            .map(|((p, t), _)| (p - t).abs())
            .sum::<f64>()
            / fine.weight.iter().filter(|&&wt| wt != 0.0).count().max(1) as f64;
        let record = LossRecord { iteration: self.iteration, loss: g.value(loss).item(), finest };
        if !record.loss.is_finite() {
            return Err(Error::NonFinite(format!("DispNet loss at iteration {}", self.iteration)));
        }
        let (p, b) = self.net.params_mut_raw();
        apply_update(g, loss, p, b, &mut self.adam)?;
        self.iteration += 1;
        Ok(record)
    }

    pub fn run<F>(&mut self, data: &[DispExample], opts: &TrainOptions, mut stop: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(&Self, &LossRecord) -> Result<bool>,
    {
        if data.is_empty() {
            return Err(Error::Empty("no training examples".into()));
        }
        let mut log = Vec::new();
        while self.iteration < opts.iterations {
            let items = batch_indices(opts.seed, data.len(), opts.batch_size, self.iteration);
            let rec = self.step(data, &items, &opts.augmentations(self.iteration))?;
            log.push(rec);
            if stop(self, &rec)? {
                break;
            }
        }
        Ok(log)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        save_common(&mut ck, self.net.params(), self.net.buffers(), &self.adam, self.iteration, self.net.config());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = DispNet::new(checkpoint_config(ck)?, 0)?;
        let (adam, iteration) = {
            let (p, b) = net.params_mut_raw();
            load_common(ck, p, b)?
        };
        Ok(Self { net, adam, iteration })
    }
}

/// Tab-separated loss log: iteration, loss, finest-scale term.
pub fn format_loss_log(records: &[LossRecord]) -> String {
    let mut out = String::from("iteration\tloss\tfinest\n");
    for r in records {
        out.push_str(&format!("{}\t{:e}\t{:e}\n", r.iteration, r.loss, r.finest));
    }
    out
}
