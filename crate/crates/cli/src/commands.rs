use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use mmvs::evalkit::{build_sample, compute_metrics, MotionProfile, Sample, SceneSpec, SceneStyle};
use mmvs::geometry::{build_warp_volume, CameraModel};
use mmvs::io::{
    self, format_manifest, load_depth, masks_from_tensor, masks_to_tensor, read_manifest, read_sample, read_sample_dir,
    save_depth, volume_to_tensor, ManifestEntry, TensorFile,
};
use mmvs::masks::{decode_depth_from_masks, make_ground_truth_masks, DepthMap};
use mmvs::neural::adam::AdamConfig;
use mmvs::neural::checkpoint::Checkpoint;
use mmvs::neural::nets::{forward_dispnet, predict_fused_masks, DispNet, MaskNet};
use mmvs::neural::train::{
    format_loss_log, prepare_disp_examples, DispStage, LossRecord, MaskDataset, MaskStage, TrainOptions,
    TrainingExample,
};
use mmvs::sampling::{
    accumulate_histogram, sample_histogram_planes, sample_inverse_depth_planes, to_cdf, DepthHistogram, PlaneSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    resolve_seed, BuildVolumeArgs, Cli, Command, DecodeMasksArgs, EvalArgs, GenDataArgs, MakeMasksArgs, PredictArgs,
    RunConfig, SamplePlanesArgs, Scheme, Stage, TrainArgs,
};

/// Floor applied to predicted inverse depth before inversion.
pub const INVERSE_DEPTH_FLOOR: f64 = 1e-6;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::SamplePlanes(a) => sample_planes(a),
        Command::BuildVolume(a) => build_volume(a),
        Command::MakeMasks(a) => make_masks(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::DecodeMasks(a) => decode_masks(a),
    }
}

fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:04}")
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    ensure!(a.scenes > 0, "--scenes must be positive");
    let camera = CameraModel::centered(a.focal, a.width, a.height)?;
    let style = SceneStyle::new(a.depth_range.0, a.depth_range.1);
    style.validate()?;
    let profile = MotionProfile {
        neighbours: a.neighbours,
        max_rotation: a.max_rotation,
        translation_min: a.translation_min,
        translation_max: a.translation_max,
    };
    profile.validate().context("invalid motion profile")?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(a.scenes);
    for i in 0..a.scenes {
        let scene_seed: u64 = rng.gen();
        let spec = SceneSpec::random(scene_seed, &camera, &style)?;
        let sample = build_sample(&spec, &camera, &profile).with_context(|| format!("scene {i}"))?;
        let dir = sample_dir_name(i);
        io::write_sample(&a.out.join(&dir), &sample).with_context(|| format!("writing {dir}"))?;
        entries.push(ManifestEntry { dir, seed: scene_seed });
    }
    fs::write(a.out.join(io::MANIFEST_FILE), format_manifest(&entries))?;
    println!("wrote {} samples to {}", entries.len(), a.out.display());
    Ok(())
}

fn load_dataset(root: &Path) -> Result<Vec<(ManifestEntry, Sample)>> {
    let entries = read_manifest(root)?;
    ensure!(!entries.is_empty(), "dataset {} is empty", root.display());
    entries
        .into_iter()
        .map(|(e, path)| {
            let s = read_sample(&path, e.seed).with_context(|| format!("sample {}", e.dir))?;
            Ok((e, s))
        })
        .collect()
}

fn load_planes(path: &Path) -> Result<PlaneSet> {
    let f = File::open(path).with_context(|| format!("cannot open plane file {}", path.display()))?;
    Ok(PlaneSet::read_text(BufReader::new(f))?)
}

fn write_planes(path: &Path, planes: &PlaneSet) -> Result<()> {
    let mut buf = Vec::new();
    planes.write_text(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))
}

fn sample_planes(a: SamplePlanesArgs) -> Result<()> {
    let planes = match a.scheme {
        Scheme::Inverse => sample_inverse_depth_planes(a.dmin, a.dmax.unwrap_or(50.0), a.planes)?,
        Scheme::Hist => {
            let hist = if let Some(path) = &a.histogram {
                DepthHistogram::read_from(BufReader::new(File::open(path)?))?
            } else {
                let root = a.data.as_ref().ok_or_else(|| anyhow!("histogram scheme needs --data or --histogram"))?;
                let depths: Vec<f64> = load_dataset(root)?
                    .iter()
                    .flat_map(|(_, s)| s.truth.valid_values().collect::<Vec<_>>())
                    .collect();
                ensure!(!depths.is_empty(), "dataset {} has no valid depths", root.display());
                let d_max = a.dmax.unwrap_or_else(|| depths.iter().copied().fold(f64::MIN, f64::max));
                let hist = accumulate_histogram(depths, a.bins, d_max)?;
                let mut hist_path = a.out.clone().into_os_string();
                hist_path.push(".hist");
                let mut f = File::create(PathBuf::from(hist_path))?;
                hist.write_to(&mut f)?;
                hist
            };
            sample_histogram_planes(&to_cdf(&hist)?, a.planes, a.theta_min, a.theta_max)?
        }
    };
    write_planes(&a.out, &planes)?;
    println!("wrote {} planes to {}", planes.len(), a.out.display());
    Ok(())
}

fn build_volume(a: BuildVolumeArgs) -> Result<()> {
    let s = read_sample_dir(&a.sample)?;
    let planes = load_planes(&a.planes)?;
    let (img, pose) = s
        .neighbours
        .get(a.neighbour)
        .ok_or_else(|| anyhow!("sample has {} neighbours, no index {}", s.neighbours.len(), a.neighbour))?;
    let vol = build_warp_volume(&s.reference, img, &s.camera, pose, &planes)?;
    volume_to_tensor(&vol)?.save(&a.out)?;
    Ok(())
}

fn make_masks(a: MakeMasksArgs) -> Result<()> {
    let s = read_sample_dir(&a.sample)?;
    let truth = s.truth.ok_or_else(|| anyhow!("{} has no depth file", a.sample.display()))?;
    let planes = load_planes(&a.planes)?;
    masks_to_tensor(&make_ground_truth_masks(&truth, &planes))?.save(&a.out)?;
    Ok(())
}

fn training_examples(samples: &[(ManifestEntry, Sample)], planes: &PlaneSet) -> Result<Vec<TrainingExample>> {
    samples
        .iter()
        .map(|(e, s)| s.to_training_example(planes).with_context(|| format!("sample {}", e.dir)))
        .collect()
}

struct RunLog {
    loss: File,
    timing: File,
    start: Instant,
}

impl RunLog {
    fn open(out: &Path, stage: &str, resume: bool) -> Result<Self> {
        let open = |name: String, header: &str| -> Result<File> {
            let path = out.join(name);
            if resume && path.exists() {
                return Ok(OpenOptions::new().append(true).open(path)?);
            }
            let mut f = File::create(path)?;
            f.write_all(header.as_bytes())?;
            Ok(f)
        };
        Ok(Self {
            loss: open(format!("{stage}_loss.tsv"), format_loss_log(&[]).as_str())?,
            timing: open(format!("{stage}_timing.tsv"), "iteration\tseconds\n")?,
            start: Instant::now(),
        })
    }

    fn record(&mut self, r: &LossRecord) -> mmvs::Result<()> {
        let line = format_loss_log(std::slice::from_ref(r));
        let body = line.split_once('\n').map_or("", |(_, rest)| rest);
        self.loss.write_all(body.as_bytes())?;
        writeln!(self.timing, "{}\t{:.3}", r.iteration, self.start.elapsed().as_secs_f64())?;
        Ok(())
    }
}

fn train(a: TrainArgs) -> Result<()> {
    if a.dump_config {
        let planes = match &a.planes {
            Some(p) => load_planes(p)?.len(),
            None => crate::config::DEFAULT_PLANES,
        };
        let cfg = RunConfig::from_train_args(&a, planes, 48, 64)?;
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let data = a.data.as_ref().ok_or_else(|| anyhow!("--data is required"))?;
    let planes_path = a.planes.as_ref().ok_or_else(|| anyhow!("--planes is required"))?;
    let out = a.out.as_ref().ok_or_else(|| anyhow!("--out is required"))?;
    if a.stage == Stage::Dispnet && a.masknet.is_none() {
        bail!("the dispnet stage needs a trained MaskNet checkpoint (--masknet)");
    }
    let planes = load_planes(planes_path)?;
    let samples = load_dataset(data)?;
    let first = &samples[0].1.reference;
    let run = RunConfig::from_train_args(&a, planes.len(), first.height, first.width)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{}_config.json", stage_name(a.stage))), serde_json::to_string_pretty(&run)? + "\n")?;

    let adam = AdamConfig { lr: run.optimizer.lr, beta1: run.optimizer.beta1, beta2: run.optimizer.beta2, eps: run.optimizer.eps };
    let opts = TrainOptions {
        iterations: a.iterations,
        batch_size: a.batch_size,
        seed: run.seed,
        augment: run.optimizer.augment,
    };
    ensure!(opts.batch_size > 0, "--batch-size must be positive");
    let examples = training_examples(&samples, &planes)?;
    let name = stage_name(a.stage);
    let mut log = RunLog::open(out, name, a.resume.is_some())?;
    let every = a.checkpoint_every;

    let final_ck = match a.stage {
        Stage::Masknet => {
            let dataset = MaskDataset::new(examples, &planes, &run.network)?;
            let mut stage = match &a.resume {
                Some(p) => {
                    let mut s = MaskStage::from_checkpoint(&Checkpoint::load(p)?)?;
                    check_config(s.net.config(), &run.network)?;
                    s.adam.config = adam;
                    s
                }
                None => MaskStage::with_optimizer(run.network.clone(), run.seed, adam)?,
            };
            stage.run(&dataset, &opts, |s, r| {
                log.record(r)?;
                periodic(out, name, every, s.iteration, || s.to_checkpoint())?;
                Ok(false)
            })?;
            stage.to_checkpoint()
        }
        Stage::Dispnet => {
            let mask_ck = Checkpoint::load(a.masknet.as_ref().expect("checked"))?;
            let masknet = MaskStage::from_checkpoint(&mask_ck).context("loading MaskNet checkpoint")?.net;
            check_config(masknet.config(), &run.network)?;
            let disp = prepare_disp_examples(&masknet, &examples)?;
            let mut stage = match &a.resume {
                Some(p) => {
                    let mut s = DispStage::from_checkpoint(&Checkpoint::load(p)?)?;
                    check_config(s.net.config(), &run.network)?;
                    s.adam.config = adam;
                    s
                }
                None => DispStage::with_optimizer(run.network.clone(), run.seed, adam)?,
            };
            stage.run(&disp, &opts, |s, r| {
                log.record(r)?;
                periodic(out, name, every, s.iteration, || s.to_checkpoint())?;
                Ok(false)
            })?;
            stage.to_checkpoint()
        }
    };
    final_ck.save(&out.join(format!("{name}.ckpt")))?;
    println!("wrote {}", out.join(format!("{name}.ckpt")).display());
    Ok(())
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Masknet => "masknet",
        Stage::Dispnet => "dispnet",
    }
}

fn periodic(out: &Path, name: &str, every: u64, iteration: u64, ck: impl FnOnce() -> Checkpoint) -> mmvs::Result<()> {
    if every > 0 && iteration % every == 0 {
        ck().save(&out.join(format!("{name}_iter{iteration}.ckpt")))?;
    }
    Ok(())
}

fn check_config(found: &mmvs::neural::NetworkConfig, expected: &mmvs::neural::NetworkConfig) -> Result<()> {
    ensure!(
        (found.planes, found.input_height, found.input_width, found.base_channels)
            == (expected.planes, expected.input_height, expected.input_width, expected.base_channels),
        "checkpoint was trained for {} planes at {}x{} with {} base channels, run expects {} planes at {}x{} with {}",
        found.planes,
        found.input_width,
        found.input_height,
        found.base_channels,
        expected.planes,
        expected.input_width,
        expected.input_height,
        expected.base_channels
    );
    Ok(())
}

fn load_masknet(path: &Path) -> Result<MaskNet> {
    Ok(MaskStage::from_checkpoint(&Checkpoint::load(path)?).with_context(|| format!("loading {}", path.display()))?.net)
}

fn load_dispnet(path: &Path) -> Result<DispNet> {
    Ok(DispStage::from_checkpoint(&Checkpoint::load(path)?).with_context(|| format!("loading {}", path.display()))?.net)
}

struct Predictor {
    planes: PlaneSet,
    masknet: MaskNet,
    dispnet: Option<DispNet>,
}

struct Prediction {
    depth: DepthMap,
    masks: mmvs::masks::MultiplaneMask,
    floored: usize,
}

impl Predictor {
    fn predict(&self, dir: &Path, select: Option<&[usize]>) -> Result<Prediction> {
        let s = read_sample_dir(dir)?;
        ensure!(!s.neighbours.is_empty(), "{} has no neighbour views", dir.display());
        let chosen: Vec<usize> = select.map_or_else(|| (0..s.neighbours.len()).collect(), <[usize]>::to_vec);
        let volumes = chosen
            .iter()
            .map(|&k| {
                let (img, pose) = s
                    .neighbours
                    .get(k)
                    .ok_or_else(|| anyhow!("neighbour {k} of {} has no image or pose", dir.display()))?;
                Ok(build_warp_volume(&s.reference, img, &s.camera, pose, &self.planes)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = predict_fused_masks(&self.masknet, &volumes)?;
        let (depth, floored) = match &self.dispnet {
            None => (decode_depth_from_masks(&masks, &self.planes)?, 0),
            Some(net) => {
                let inv = forward_dispnet(net, &masks, &s.reference)?.pop().expect("six scales");
                let floored = inv.values.iter().filter(|&&v| v < INVERSE_DEPTH_FLOOR).count();
                let values = inv.values.iter().map(|&v| 1.0 / v.max(INVERSE_DEPTH_FLOOR)).collect();
                (DepthMap::from_values(inv.height, inv.width, values)?, floored)
            }
        };
        Ok(Prediction { depth, masks, floored })
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let planes = load_planes(&a.planes)?;
    let masknet = load_masknet(&a.masknet)?;
    ensure!(
        masknet.config().planes == planes.len(),
        "MaskNet expects {} planes, plane file has {}",
        masknet.config().planes,
        planes.len()
    );
    let dispnet = if a.decode_from_masks {
        None
    } else {
        let p = a.dispnet.as_ref().ok_or_else(|| anyhow!("--dispnet is required unless --decode-from-masks is given"))?;
        Some(load_dispnet(p)?)
    };
    let predictor = Predictor { planes, masknet, dispnet };
    let select = a.neighbours.as_deref();
    match (&a.sample, &a.data) {
        (Some(dir), None) => {
            let p = predictor.predict(dir, select)?;
            save_depth(&a.out, &p.depth)?;
            if let Some(m) = &a.dump_masks {
                masks_to_tensor(&p.masks)?.save(m)?;
            }
            report_floor(&dir.display().to_string(), p.floored);
        }
        (None, Some(root)) => {
            fs::create_dir_all(&a.out)?;
            for (e, path) in read_manifest(root)? {
                let p = predictor.predict(&path, select).with_context(|| format!("sample {}", e.dir))?;
                save_depth(&a.out.join(format!("{}.mmvs", e.dir)), &p.depth)?;
                report_floor(&e.dir, p.floored);
            }
        }
        _ => bail!("give exactly one of --sample or --data"),
    }
    Ok(())
}

fn report_floor(name: &str, floored: usize) {
    if floored > 0 {
        eprintln!("{name}: {floored} pixels floored at inverse depth {INVERSE_DEPTH_FLOOR}");
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut table = String::from("sample\tl1_rel\tl1_inv\tsc_inv\tvalid\texcluded\n");
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for (e, path) in read_manifest(&a.data)? {
        let pred_path = a.pred.join(format!("{}.mmvs", e.dir));
        if !pred_path.exists() {
            bail!("missing prediction for sample {} ({})", e.dir, pred_path.display());
        }
        let pred = load_depth(&pred_path)?;
        let truth = load_depth(&path.join(io::DEPTH_FILE)).with_context(|| format!("sample {}", e.dir))?;
        let r = compute_metrics(&pred, &truth).with_context(|| format!("sample {}", e.dir))?;
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.dir, r.l1_rel, r.l1_inv, r.sc_inv, r.valid_pixel_count, r.excluded_count
        ));
        sums[0] += r.l1_rel;
        sums[1] += r.l1_inv;
        sums[2] += r.sc_inv;
        count += 1;
    }
    ensure!(count > 0, "dataset {} lists no samples", a.data.display());
    let n = count as f64;
    table.push_str(&format!("mean\t{}\t{}\t{}\t\t\n", sums[0] / n, sums[1] / n, sums[2] / n));
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out, &table)?;
    }
    Ok(())
}

fn decode_masks(a: DecodeMasksArgs) -> Result<()> {
    let masks = masks_from_tensor(&TensorFile::load(&a.masks)?)?;
    let planes = load_planes(&a.planes)?;
    save_depth(&a.out, &decode_depth_from_masks(&masks, &planes)?)?;
    Ok(())
}
