//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! Run alone with `cargo test -p mmvs-core --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mmvs::evalkit::{build_dataset, compute_metrics, render_scene, MotionProfile, Sample, SceneSpec, SceneStyle, Texture};
use mmvs::geometry::{homography_for_plane, warp_image, CameraModel, ImageBuffer, RelativePose};
use mmvs::io::{depth_to_tensor, write_sample};
use mmvs::masks::{decode_depth_from_masks, make_ground_truth_masks, DepthMap};
use mmvs::neural::gradcheck::{check_gradients, check_gradients_in};
use mmvs::neural::train::{evaluate_masknet, format_loss_log, prepare_disp_examples, DispExample, MaskDataset, TrainOptions};
use mmvs::neural::{forward_dispnet, DispStage, Graph, MaskNet, MaskStage, NetworkConfig, Tensor, Var};
use mmvs::sampling::{accumulate_histogram, histogram_quantile_levels, sample_histogram_planes, sample_inverse_depth_planes, to_cdf, PlaneSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, started: Instant, limit: Duration, outcome: Outcome) {
        let took = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} ({took:.1?})"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL {id} {name}: {detail} ({took:.1?})");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- geometry

fn mean_abs_error(warped: &ImageBuffer, reference: &ImageBuffer, mask: &[bool]) -> f64 {
    let n = reference.height * reference.width;
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for p in (0..n).filter(|&p| mask[p]) {
            sum += (warped.data[c * n + p] - reference.data[c * n + p]).abs();
            count += 1;
        }
    }
    sum / count as f64
}

fn geometry_oracle() -> Outcome {
    let cam = CameraModel::centered(50.0, 64, 48).map_err(fail)?;
    let factors = [0.5, 0.75, 1.25, 1.5, 2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_true: f64 = 0.0;
    let mut worst_ratio = f64::INFINITY;
    for scene in 0..100u64 {
        let depth = rng.gen_range(1.0..10.0);
        let spec = SceneSpec {
            seed: scene,
            layers: Vec::new(),
            background_depth: depth,
            background: Texture::random(&mut rng, depth, cam.fx, 6.0, 16.0),
        };
        // 4 to 8 px of horizontal disparity plus a little rotation and forward motion.
        let disparity = rng.gen_range(4.0..8.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let t = [disparity * depth / cam.fx, rng.gen_range(-0.02..0.02) * depth, rng.gen_range(-0.02..0.02) * depth];
        let aa = [rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)];
        let pose = RelativePose::from_axis_angle(aa, t);
        let (reference, _) = render_scene(&spec, &cam, &RelativePose::identity()).map_err(fail)?;
        let (neighbour, _) = render_scene(&spec, &cam, &pose).map_err(fail)?;

        let mut warps = vec![warp_image(&neighbour, &homography_for_plane(&cam, &pose, depth).map_err(fail)?)];
        for f in factors {
            warps.push(warp_image(&neighbour, &homography_for_plane(&cam, &pose, depth * f).map_err(fail)?));
        }
        let n = cam.width * cam.height;
        let mask: Vec<bool> = (0..n)
            .map(|p| warps.iter().all(|w| w.validity_mask.as_ref().is_some_and(|m| m[p])))
            .collect();
        if mask.iter().filter(|&&v| v).count() < n / 4 {
            return Err(format!("scene {scene}: too little overlap"));
        }
        let at_truth = mean_abs_error(&warps[0], &reference, &mask);
        worst_true = worst_true.max(at_truth);
        for w in &warps[1..] {
            worst_ratio = worst_ratio.min(mean_abs_error(w, &reference, &mask) / at_truth);
        }
    }
    check(
        worst_true < 0.02 && worst_ratio >= 3.0,
        format!("max error at true depth {worst_true:.5}, min wrong/true ratio {worst_ratio:.1}"),
    )
}

// ---------------------------------------------------------------- sampling

fn quantile_law() -> Outcome {
    const BINS: usize = 200;
    const D_MAX: f64 = 50.0;
    const PLANES: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 200_000;
    let uniform: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..20.0)).collect();
    let near = Normal::new(3.0, 1.0).map_err(fail)?;
    let far = Normal::new(30.0, 5.0).map_err(fail)?;
    let bimodal: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { near.sample(&mut rng) } else { far.sample(&mut rng) }).collect();
    let heavy = LogNormal::new(5f64.ln(), 0.6).map_err(fail)?;
    let heavy: Vec<f64> = (0..n).map(|_| heavy.sample(&mut rng)).collect();

    let levels = histogram_quantile_levels(PLANES, 0.1, 1.0);
    let mut worst: f64 = 0.0;
    for (name, values) in [("uniform", uniform), ("bimodal", bimodal), ("heavy-tailed", heavy)] {
        let kept: Vec<f64> = values.into_iter().filter(|&v| v > 0.0 && v < D_MAX).collect();
        let hist = accumulate_histogram(kept.iter().copied(), BINS, D_MAX).map_err(fail)?;
        let planes = sample_histogram_planes(&to_cdf(&hist).map_err(fail)?, PLANES, 0.1, 1.0).map_err(fail)?;
        for (&d, &theta) in planes.depths().iter().zip(&levels) {
            let p = kept.iter().filter(|&&v| v <= d).count() as f64 / kept.len() as f64;
            let dev = (p - theta).abs();
            if dev > 1.0 / BINS as f64 {
                return Err(format!("{name}: plane {d:.4} has P={p:.5} vs theta {theta:.5}"));
            }
            worst = worst.max(dev);
        }
    }
    let inv = sample_inverse_depth_planes(0.5, 50.0, 16).map_err(fail)?;
    let (first, last) = (inv.depths()[0], inv.depths()[15]);
    check(
        first == 0.5 && last == 50.0 && inv.len() == 16,
        format!("max |P - theta| {worst:.5} (bound {}), inverse endpoints {first} and {last}", 1.0 / BINS as f64),
    )
}

// ---------------------------------------------------------------- masks

/// Mean |decoded - truth| of ground-truth masks, and whether every decoded
/// depth stayed inside its bracketing plane interval.
fn quantisation(maps: &[DepthMap], planes: &PlaneSet) -> Result<(f64, bool), String> {
    let d = planes.depths();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut bracketed = true;
    for truth in maps {
        let decoded = decode_depth_from_masks(&make_ground_truth_masks(truth, planes), planes).map_err(fail)?;
        for (&z, &e) in truth.values.iter().zip(&decoded.values) {
            let k = d.partition_point(|&p| p < z).clamp(1, d.len() - 1);
            bracketed &= d[k - 1] <= e && e <= d[k];
            sum += (e - z).abs();
            count += 1;
        }
    }
    Ok((sum / count as f64, bracketed))
}

fn encode_decode() -> Outcome {
    let planes = sample_inverse_depth_planes(0.5, 50.0, 16).map_err(fail)?;
    let d = planes.depths();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    // Pick an interval, then a depth inside it, so far intervals get pixels too.
    let maps: Vec<DepthMap> = (0..1000)
        .map(|_| {
            let values = (0..32 * 32)
                .map(|_| {
                    let k = rng.gen_range(1..d.len());
                    rng.gen_range(d[k - 1]..=d[k])
                })
                .collect();
            DepthMap::from_values(32, 32, values).expect("positive depths")
        })
        .collect();
    let (err, bracketed) = quantisation(&maps, &planes)?;
    let half_gap = (d[d.len() - 1] - d[0]) / (d.len() - 1) as f64 / 2.0;
    check(bracketed && err <= half_gap, format!("all bracketed: {bracketed}, mean error {err:.4} vs half gap {half_gap:.4}"))
}

// ---------------------------------------------------------------- gradients

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values with magnitude in [0.1, 1] and random sign, away from activation kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Scalar probe `sum(x * r)` with fixed pseudo-random `r`, so every output
/// element contributes a distinct weight.
fn probe(g: &mut Graph, x: Var, seed: u64) -> mmvs::Result<Var> {
    let shape = g.shape(x).to_vec();
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0) / len as f64).collect();
    let r = g.input(Tensor::new(shape, r)?);
    let prod = g.mul(x, r)?;
    Ok(g.sum(prod))
}

fn gradient_suite() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: Vec<(&str, f64, f64)> = Vec::new();
    let mut note = |name: &'static str, tol: f64, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e, tol)),
    };
    for trial in 0..20u64 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=6);
        let w = rng.gen_range(3..=6);
        let oc = rng.gen_range(1..=3);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = [n, c, h, w];
        let s = trial * 100;

        let inputs = [random_tensor(&mut rng, &x), random_tensor(&mut rng, &[oc, c, k, k]), random_tensor(&mut rng, &[oc])];
        let r = check_gradients(&inputs, H, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1)?;
            probe(g, y, s)
        })
        .map_err(fail)?;
        note("conv2d", 1e-4, r.max_rel_error);

        let r = check_gradients(&inputs[..2], H, |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2)?;
            probe(g, y, s + 1)
        })
        .map_err(fail)?;
        note("conv2d stride 2", 1e-4, r.max_rel_error);

        let bx = [4, c, h, w];
        let inputs = [random_tensor(&mut rng, &bx), away_from_zero(&mut rng, &[c]), random_tensor(&mut rng, &[c])];
        let r = check_gradients(&inputs, H, |g, v| {
            let y = g.batch_norm("bn", v[0], v[1], v[2], None)?;
            probe(g, y, s + 2)
        })
        .map_err(fail)?;
        note("batch_norm", 1e-3, r.max_rel_error);

        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let r = check_gradients_in(Graph::inference, &inputs, H, |g, v| {
            let y = g.batch_norm("bn", v[0], v[1], v[2], Some((&mean, &var)))?;
            probe(g, y, s + 3)
        })
        .map_err(fail)?;
        note("batch_norm (running stats)", 1e-3, r.max_rel_error);

        let kinked = [away_from_zero(&mut rng, &x)];
        let r = check_gradients(&kinked, H, |g, v| {
            let y = g.relu(v[0]);
            probe(g, y, s + 4)
        })
        .map_err(fail)?;
        note("relu", 1e-4, r.max_rel_error);
        let r = check_gradients(&kinked, H, |g, v| {
            let y = g.leaky_relu(v[0], 0.1);
            probe(g, y, s + 5)
        })
        .map_err(fail)?;
        note("leaky_relu", 1e-4, r.max_rel_error);

        let smooth = [random_tensor(&mut rng, &x), random_tensor(&mut rng, &x), random_tensor(&mut rng, &x)];
        let r = check_gradients(&smooth[..1], H, |g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y, s + 6)
        })
        .map_err(fail)?;
        note("sigmoid", 1e-4, r.max_rel_error);
        let r = check_gradients(&smooth[..1], H, |g, v| {
            let y = g.scale(v[0], -1.7);
            probe(g, y, s + 7)
        })
        .map_err(fail)?;
        note("scale", 1e-4, r.max_rel_error);
        let (uh, uw) = (2 * h - rng.gen_range(0..=1), 2 * w - rng.gen_range(0..=1));
        let r = check_gradients(&smooth[..1], H, |g, v| {
            let y = g.upsample2x(v[0], uh, uw)?;
            probe(g, y, s + 8)
        })
        .map_err(fail)?;
        note("upsample2x", 1e-4, r.max_rel_error);
        let r = check_gradients(&smooth[..2], H, |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            probe(g, y, s + 9)
        })
        .map_err(fail)?;
        note("concat", 1e-4, r.max_rel_error);
        let r = check_gradients(&smooth, H, |g, v| {
            let y = g.mean(v)?;
            probe(g, y, s + 10)
        })
        .map_err(fail)?;
        note("mean", 1e-4, r.max_rel_error);
        let r = check_gradients(&smooth[..2], H, |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, s + 11)
        })
        .map_err(fail)?;
        note("add", 1e-4, r.max_rel_error);
        let r = check_gradients(&smooth[..2], H, |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, s + 12)
        })
        .map_err(fail)?;
        note("mul", 1e-4, r.max_rel_error);
        let r = check_gradients(&smooth[..1], H, |g, v| Ok(g.sum(v[0]))).map_err(fail)?;
        note("sum", 1e-4, r.max_rel_error);

        let group = rng.gen_range(1..=3);
        let grouped = [random_tensor(&mut rng, &[n * group, c, h, w])];
        let r = check_gradients(&grouped, H, |g, v| {
            let y = g.group_mean(v[0], group)?;
            probe(g, y, s + 13)
        })
        .map_err(fail)?;
        note("group_mean", 1e-4, r.max_rel_error);

        let len = n * c * h * w;
        let target: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let weight: Vec<f64> = (0..len).map(|i| if i == 0 || rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
        let r = check_gradients(&smooth[..1], H, |g, v| {
            let p = g.sigmoid(v[0]);
            g.bce(p, &target, &weight)
        })
        .map_err(fail)?;
        note("bce", 1e-4, r.max_rel_error);
        let offsets = away_from_zero(&mut rng, &x);
        let l1_target: Vec<f64> = smooth[0].data().iter().zip(offsets.data()).map(|(a, b)| a + b).collect();
        let r = check_gradients(&smooth[..1], H, |g, v| g.l1(v[0], &l1_target, &weight)).map_err(fail)?;
        note("l1", 1e-4, r.max_rel_error);
    }
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e, tol)| !(e < tol))
        .map(|(name, e, tol)| format!("{name} {e:.2e} >= {tol:.0e}"))
        .collect();
    let overall = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    check(
        failing.is_empty(),
        if failing.is_empty() {
            format!("{} ops x 20 shapes, max relative error {overall:.2e}", worst.len())
        } else {
            failing.join(", ")
        },
    )
}

// ---------------------------------------------------------------- metrics

/// Straight transcription of the three metric formulas.
fn oracle(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let mut rel = 0.0;
    let mut inv = 0.0;
    let mut z_sum = 0.0;
    let mut z_sq = 0.0;
    for i in 0..pred.len() {
        rel += (pred[i] - truth[i]).abs() / truth[i];
        inv += (1.0 / pred[i] - 1.0 / truth[i]).abs();
        let z = pred[i].ln() - truth[i].ln();
        z_sum += z;
        z_sq += z * z;
    }
    let var = z_sq / n - (z_sum / n) * (z_sum / n);
    (rel / n, inv / n, var.max(0.0).sqrt())
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut max_diff: f64 = 0.0;
    let mut max_scale: f64 = 0.0;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let truth: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.5..50.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t * rng.gen_range(0.5..2.0)).collect();
        let t = DepthMap::from_values(h, w, truth.clone()).map_err(fail)?;
        let p = DepthMap::from_values(h, w, pred.clone()).map_err(fail)?;
        let r = compute_metrics(&p, &t).map_err(fail)?;
        let (rel, inv, sc) = oracle(&pred, &truth);
        max_diff = max_diff.max((r.l1_rel - rel).abs()).max((r.l1_inv - inv).abs()).max((r.sc_inv - sc).abs());
        let k = rng.gen_range(0.1..10.0);
        let scaled = DepthMap::from_values(h, w, pred.iter().map(|v| v * k).collect()).map_err(fail)?;
        max_scale = max_scale.max((compute_metrics(&scaled, &t).map_err(fail)?.sc_inv - r.sc_inv).abs());
    }
    check(
        max_diff <= 1e-10 && max_scale <= 1e-10,
        format!("max oracle difference {max_diff:.1e}, max sc-inv change under rescaling {max_scale:.1e}"),
    )
}

// ---------------------------------------------------------------- learning

const TRAIN_SEEDS: u64 = 1000;
const HELD_OUT_SEEDS: u64 = 2000;

fn samples(first_seed: u64, count: u64, cam: &CameraModel) -> mmvs::Result<Vec<Sample>> {
    let style = SceneStyle::new(1.0, 10.0);
    let specs = (first_seed..first_seed + count)
        .map(|s| SceneSpec::random(s, cam, &style))
        .collect::<mmvs::Result<Vec<_>>>()?;
    build_dataset(&specs, cam, &MotionProfile::handheld(2))
}

struct Trained {
    cam: CameraModel,
    planes: PlaneSet,
    train: Vec<Sample>,
    masknet: MaskNet,
}

fn masknet_learning(out: &mut Option<Trained>) -> Outcome {
    let cam = CameraModel::centered(50.0, 64, 48).map_err(fail)?;
    let train = samples(TRAIN_SEEDS, 8, &cam).map_err(fail)?;
    // Evenly spaced in disparity over the generator's depth range. Histogram
    // planes bunch up in the far background, where neighbouring planes are a
    // fraction of a pixel apart and matching cannot tell them apart.
    let planes = sample_inverse_depth_planes(1.0, 10.0, 16).map_err(fail)?;
    let cfg = NetworkConfig::new(16, 48, 64);
    let examples = train.iter().map(|s| s.to_training_example(&planes)).collect::<mmvs::Result<Vec<_>>>().map_err(fail)?;
    let data = MaskDataset::new(examples, &planes, &cfg).map_err(fail)?;

    let mut stage = MaskStage::new(cfg, 1).map_err(fail)?;
    let start = evaluate_masknet(&stage.net, &data).map_err(fail)?;
    let mut last = start;
    stage
        .run(&data, &TrainOptions::new(3000, 1), |s, r| {
            if (r.iteration + 1) % 100 != 0 {
                return Ok(false);
            }
            last = evaluate_masknet(&s.net, &data)?;
            Ok(last < 0.1)
        })
        .map_err(fail)?;
    let detail = format!("BCE {start:.4} -> {last:.4} after {} iterations", stage.iteration);
    *out = Some(Trained { cam, planes, train, masknet: stage.net });
    check(last < 0.1, detail)
}

/// Mean L1 of inverse depth of DispNet predictions over samples.
fn dispnet_l1_inv(stage: &DispStage, data: &[DispExample]) -> mmvs::Result<f64> {
    let mut total = 0.0;
    for e in data {
        let outs = forward_dispnet(&stage.net, &e.masks, &e.reference)?;
        let fine = outs.last().expect("six scales");
        let depth = fine.values.iter().map(|&v| 1.0 / v.max(1e-6)).collect();
        total += compute_metrics(&DepthMap::from_values(fine.height, fine.width, depth)?, &e.truth)?.l1_inv;
    }
    Ok(total / data.len() as f64)
}

/// Best L1-inv reachable by predicting one plane depth everywhere.
fn best_constant_plane(planes: &PlaneSet, data: &[DispExample]) -> mmvs::Result<f64> {
    let mut best = f64::INFINITY;
    for &d in planes.depths() {
        let mut total = 0.0;
        for e in data {
            total += compute_metrics(&DepthMap::constant(e.truth.height, e.truth.width, d), &e.truth)?.l1_inv;
        }
        best = best.min(total / data.len() as f64);
    }
    Ok(best)
}

fn dispnet_learning(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("needs the MaskNet from the previous criterion")?;
    let to_examples = |s: &[Sample]| -> mmvs::Result<Vec<DispExample>> {
        let ex = s.iter().map(|s| s.to_training_example(&t.planes)).collect::<mmvs::Result<Vec<_>>>()?;
        prepare_disp_examples(&t.masknet, &ex)
    };
    let held_in = to_examples(&t.train).map_err(fail)?;
    let held_out = to_examples(&samples(HELD_OUT_SEEDS, 8, &t.cam).map_err(fail)?).map_err(fail)?;

    let mut stage = DispStage::new(t.masknet.config().clone(), 2).map_err(fail)?;
    let mut fit = f64::INFINITY;
    stage
        .run(&held_in, &TrainOptions::new(6000, 2), |s, r| {
            if (r.iteration + 1) % 100 != 0 {
                return Ok(false);
            }
            fit = dispnet_l1_inv(s, &held_in)?;
            Ok(fit < 0.05)
        })
        .map_err(fail)?;
    let out = dispnet_l1_inv(&stage, &held_out).map_err(fail)?;
    let baseline = best_constant_plane(&t.planes, &held_out).map_err(fail)?;
    let gain = 1.0 - out / baseline;
    check(
        fit < 0.05 && gain >= 0.25,
        format!(
            "held-in L1-inv {fit:.4} after {} iterations; held-out {out:.4} vs constant plane {baseline:.4} ({:.0}% better)",
            stage.iteration,
            100.0 * gain
        ),
    )
}

// ---------------------------------------------------------------- ablation

fn ablation() -> Outcome {
    let cam = CameraModel::centered(50.0, 64, 48).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut maps = Vec::new();
    for seed in 0..20u64 {
        let near = rng.gen_range(1.0..3.0);
        let far = rng.gen_range(20.0..40.0);
        let (u0, u1) = (rng.gen_range(-0.6..-0.1), rng.gen_range(0.1..0.6));
        let layer = mmvs::evalkit::SceneLayer {
            depth: near,
            slope: [rng.gen_range(-0.3..0.3), 0.0],
            extent: [u0, u1, -0.6, 0.6],
            texture: Texture::flat([0.5; 3]),
        };
        let spec = SceneSpec { seed, layers: vec![layer], background_depth: far, background: Texture::flat([0.2; 3]) };
        maps.push(render_scene(&spec, &cam, &RelativePose::identity()).map_err(fail)?.1);
    }
    let hist = accumulate_histogram(maps.iter().flat_map(|m| m.valid_values().collect::<Vec<_>>()), 200, 50.0).map_err(fail)?;
    let histogram = sample_histogram_planes(&to_cdf(&hist).map_err(fail)?, 16, 0.1, 1.0).map_err(fail)?;
    let inverse = sample_inverse_depth_planes(0.5, 50.0, 16).map_err(fail)?;
    let (h_err, _) = quantisation(&maps, &histogram)?;
    let (i_err, _) = quantisation(&maps, &inverse)?;
    check(h_err < i_err, format!("mean quantisation error: histogram {h_err:.4} m, inverse {i_err:.4} m"))
}

// ---------------------------------------------------------------- determinism

fn one_run(dir: &std::path::Path) -> mmvs::Result<(String, String, Vec<u8>, Vec<u8>)> {
    let cam = CameraModel::centered(40.0, 32, 24)?;
    let data = samples(500, 3, &cam)?;
    for (i, s) in data.iter().enumerate() {
        write_sample(&dir.join(format!("sample_{i}")), s)?;
    }
    let planes = sample_inverse_depth_planes(1.0, 10.0, 8)?;
    let mut cfg = NetworkConfig::new(8, 24, 32);
    cfg.base_channels = 2;
    let examples = data.iter().map(|s| s.to_training_example(&planes)).collect::<mmvs::Result<Vec<_>>>()?;
    let masks = MaskDataset::new(examples.clone(), &planes, &cfg)?;
    let mut mask_stage = MaskStage::new(cfg.clone(), 7)?;
    let mask_log = mask_stage.run(&masks, &TrainOptions { batch_size: 2, ..TrainOptions::new(6, 7) }, |_, _| Ok(false))?;
    let mut mask_ckpt = Vec::new();
    mask_stage.to_checkpoint().write_to(&mut mask_ckpt)?;

    let disp_data = prepare_disp_examples(&mask_stage.net, &examples)?;
    let mut disp_stage = DispStage::new(cfg, 8)?;
    let disp_log = disp_stage.run(&disp_data, &TrainOptions { batch_size: 2, ..TrainOptions::new(6, 8) }, |_, _| Ok(false))?;
    let fine = forward_dispnet(&disp_stage.net, &disp_data[0].masks, &disp_data[0].reference)?.pop().expect("outputs");
    let depth = DepthMap::from_values(fine.height, fine.width, fine.values.iter().map(|v| 1.0 / v.max(1e-6)).collect())?;
    let mut outputs = Vec::new();
    disp_stage.to_checkpoint().write_to(&mut outputs)?;
    depth_to_tensor(&depth)?.write_to(&mut outputs)?;
    Ok((format_loss_log(&mask_log), format_loss_log(&disp_log), mask_ckpt, outputs))
}

fn dir_bytes(root: &std::path::Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            for (name, bytes) in dir_bytes(&entry.path())? {
                files.push((format!("{}/{name}", entry.file_name().to_string_lossy()), bytes));
            }
        } else {
            files.push((entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path())?));
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(fail)?;
    let b = tempfile::tempdir().map_err(fail)?;
    let first = one_run(a.path()).map_err(fail)?;
    let second = one_run(b.path()).map_err(fail)?;
    let files_a = dir_bytes(a.path()).map_err(fail)?;
    let files_b = dir_bytes(b.path()).map_err(fail)?;
    check(
        first == second && files_a == files_b && !files_a.is_empty(),
        format!(
            "loss logs equal: {}, checkpoints and predictions equal: {}, {} dataset files equal: {}",
            first.0 == second.0 && first.1 == second.1,
            first.2 == second.2 && first.3 == second.3,
            files_a.len(),
            files_a == files_b
        ),
    )
}

fn main() -> ExitCode {
    // Accept and ignore libtest flags such as --nocapture.
    let mut report = Report { failures: 0 };
    let secs = Duration::from_secs;
    let t = Instant::now();
    report.record(1, "geometry oracle", t, secs(30), geometry_oracle());
    let t = Instant::now();
    report.record(2, "sampling quantile law", t, secs(5), quantile_law());
    let t = Instant::now();
    report.record(3, "mask encode-decode", t, secs(10), encode_decode());
    let t = Instant::now();
    report.record(4, "gradient suite", t, secs(120), gradient_suite());
    let t = Instant::now();
    report.record(5, "metric oracle", t, secs(5), metric_oracle());
    let mut trained = None;
    let t = Instant::now();
    report.record(6, "MaskNet learning", t, secs(20 * 60), masknet_learning(&mut trained));
    let t = Instant::now();
    report.record(7, "DispNet learning", t, secs(30 * 60), dispnet_learning(trained.as_ref()));
    let t = Instant::now();
    report.record(8, "plane sampling ablation", t, secs(10), ablation());
    let t = Instant::now();
    report.record(9, "determinism", t, secs(120), determinism());
    println!("{} of 9 criteria passed", 9 - report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
