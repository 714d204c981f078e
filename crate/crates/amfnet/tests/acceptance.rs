//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_CRITERIA=1,3,5` restricts the run to those criteria.
//! Criteria listed in `EXPECTED_RED` are reported but do not fail the
//! process.

mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use amfnet::checkpoint::{self, Checkpoint};
use amfnet::dataset::Dataset;
use amfnet::run;
use amfnet_core::amf::{make_adaptive_masks_batch, masked_fuse, AdaptiveWeights, Amf, Amg, ChannelAttention, SpatialAttention};
use amfnet_core::data::{make_batch, split, synth_corpus, Sample, SynthParams, DEFAULT_SPLIT};
use amfnet_core::decoder::DualResidualBlock;
use amfnet_core::maskgen::{build_pyramid, stage_shapes};
use amfnet_core::metrics::ConfusionMatrix;
use amfnet_core::network::{AblationSpec, AmfNet, NetworkConfig, NetworkInput};
use amfnet_core::nn::{rng_from_seed, Mode, Module};
use amfnet_core::train::{self, evaluate, TrainConfig, TrainState};
use amfnet_core::types::{LabelMap, Mask, StageIndex, NUM_CLASSES};
use amfnet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

/// Criteria known not to hold; see the project notes for the analysis.
const EXPECTED_RED: [u32; 2] = [7, 9];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, || format!("took {:.1} s, budget {} s", t.as_secs_f64(), budget.as_secs()))
}

fn core<T>(r: amfnet_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn std_err<T>(r: amfnet::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bernoulli_mask(shape: Shape, p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

fn scenes(seed: u64, count: usize, hw: (usize, usize), invalid: f64) -> Vec<Sample> {
    let params = SynthParams {
        height: hw.0,
        width: hw.1,
        invalid_fraction: invalid,
        ..SynthParams::desk(seed)
    };
    synth_corpus(&params, count).expect("valid synthetic parameters")
}

fn batch<T: amfnet_core::Scalar>(samples: &[Sample]) -> NetworkInput<T> {
    let refs: Vec<&Sample> = samples.iter().collect();
    make_batch::<T>(&refs, 10.0).expect("aligned samples").0
}

// 1 -------------------------------------------------------------------------

fn mask_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut untrusted = 0usize;
    for case in 0..1000 {
        let s = Shape::new(rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..13), rng.random_range(1..13));
        let ms = s.with_c(1);
        let p = rng.random_range(0.0..1.0);
        let mask: Tensor<f32> = bernoulli_mask(ms, p, &mut rng).cast();
        let weights: Vec<AdaptiveWeights<f32>> =
            (0..s.n).map(|_| AdaptiveWeights::from_logits(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect();
        let rgb: Tensor<f32> = Tensor::from_fn(s, |_, _, _, _| rng.random_range(-10.0..10.0));
        let depth: Tensor<f32> = Tensor::from_fn(s, |_, _, _, _| rng.random_range(-10.0..10.0));
        let masks = core(make_adaptive_masks_batch(&weights, &mask))?;
        let fused = core(masked_fuse(&rgb, &depth, &masks))?;
        for n in 0..s.n {
            for i in 0..s.plane() {
                let (mr, md, m) = (masks.m_rgb.plane(n, 0)[i], masks.m_depth.plane(n, 0)[i], mask.plane(n, 0)[i]);
                ensure(((mr + md) as f64 - 1.0).abs() <= 1e-6, || format!("case {case}: m_rgb + m_depth = {}", mr + md))?;
                if m == 0.0 {
                    untrusted += 1;
                    ensure(md == 0.0, || format!("case {case}: m_depth {md} on an untrusted pixel"))?;
                    for c in 0..s.c {
                        let (f, r) = (fused.plane(n, c)[i], rgb.plane(n, c)[i]);
                        ensure(f.to_bits() == r.to_bits(), || format!("case {case}: fused {f} != rgb {r} on an untrusted pixel"))?;
                    }
                } else {
                    ensure(md == weights[n].w_depth, || format!("case {case}: m_depth {md} != w_depth on a trusted pixel"))?;
                }
            }
        }
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!("1000 cases, {untrusted} untrusted pixels checked"))
}

// 2 -------------------------------------------------------------------------

fn softmax_contract() -> Outcome {
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let w = AdaptiveWeights::<f32>::from_logits(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        worst = worst.max(((w.w_rgb + w.w_depth) as f64 - 1.0).abs());
        ensure((0.0..=1.0).contains(&w.w_rgb) && (0.0..=1.0).contains(&w.w_depth), || format!("{w:?} outside [0,1]"))?;
        let a: f32 = rng.random_range(-50.0..50.0);
        let s = AdaptiveWeights::from_logits(a, a);
        ensure((s.w_rgb - 0.5).abs() <= 1e-6 && (s.w_depth - 0.5).abs() <= 1e-6, || format!("symmetric logits {a}: {s:?}"))?;
    }
    // Whole generation block on random features, both modes.
    for case in 0..1000 {
        let c = rng.random_range(1..33);
        let n = rng.random_range(1..5);
        let s = Shape::new(n, c, rng.random_range(1..7), rng.random_range(1..7));
        let mut amg = Amg::<f32>::new(c, &mut rng_from_seed(case));
        let rgb: Tensor<f32> = random(s, &mut rng).cast();
        let depth: Tensor<f32> = random(s, &mut rng).cast();
        let mode = if n > 1 && case % 2 == 0 { Mode::Train } else { Mode::Eval };
        for w in core(amg.forward(&rgb, &depth, mode))? {
            worst = worst.max(((w.w_rgb + w.w_depth) as f64 - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("worst |sum - 1| = {worst:e}"))?;
    // Identical logit rows give an even split.
    let mut amg = Amg::<f64>::new(8, &mut rng_from_seed(3));
    randomize_norms(&mut amg, &mut rng);
    let width = amg.fc3.inputs();
    let row: Vec<f64> = amg.fc3.weight.value.data()[..width].to_vec();
    amg.fc3.weight.value.data_mut()[width..].copy_from_slice(&row);
    amg.visit_mut("", &mut |name, p| {
        if name.starts_with("bn3.") {
            let v = p.value.data()[0];
            p.value.data_mut()[1] = v;
        }
    });
    let s = Shape::new(3, 8, 4, 4);
    for w in core(amg.forward(&random(s, &mut rng), &random(s, &mut rng), Mode::Eval))? {
        ensure((w.w_rgb - 0.5).abs() <= 1e-6 && (w.w_depth - 0.5).abs() <= 1e-6, || format!("symmetric block: {w:?}"))?;
    }
    Ok(format!("worst |w_rgb + w_depth - 1| = {worst:.1e}"))
}

// 3 -------------------------------------------------------------------------

fn pyramid_contract() -> Outcome {
    let start = Instant::now();
    let (h, w) = (288, 512);
    let shapes = core(stage_shapes(h, w))?;
    let expected = [(144, 256), (72, 128), (36, 64), (18, 32), (9, 16)];
    ensure(shapes == expected, || format!("stage shapes {shapes:?}"))?;
    let mut rng = rng(3);
    for case in 0..100 {
        let data: Vec<u8> = match case % 4 {
            0 => {
                let p = rng.random_range(0.0..1.0);
                (0..h * w).map(|_| rng.random_bool(p) as u8).collect()
            }
            1 => {
                // Axis-aligned holes.
                let mut d = vec![1u8; h * w];
                for _ in 0..rng.random_range(1..20) {
                    let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                    let (y1, x1) = ((y0 + rng.random_range(1..60)).min(h), (x0 + rng.random_range(1..100)).min(w));
                    for y in y0..y1 {
                        d[y * w + x0..y * w + x1].fill(0);
                    }
                }
                d
            }
            2 => (0..h * w).map(|i| ((i / w + i % w + case) % 3 != 0) as u8).collect(),
            _ => vec![(case % 8 != 3) as u8; h * w],
        };
        let mask = core(Mask::new(h, w, data))?;
        let pyramid = core(build_pyramid(&mask, &shapes))?;
        for (level, (&(lh, lw), m)) in shapes.iter().zip(pyramid.levels()).enumerate() {
            ensure((m.height(), m.width()) == (lh, lw), || format!("case {case} level {level}: {}x{}", m.height(), m.width()))?;
            for y in 0..lh {
                // floor(t * src / dst) via floating point, independent of the integer path.
                let sy = ((y as f64) * (h as f64) / (lh as f64)).floor() as usize;
                for x in 0..lw {
                    let sx = ((x as f64) * (w as f64) / (lw as f64)).floor() as usize;
                    let v = m.get(y, x);
                    ensure(v <= 1, || format!("case {case} level {level}: non-binary {v}"))?;
                    ensure(v == mask.get(sy, sx), || format!("case {case} level {level} ({y},{x}) differs from source ({sy},{sx})"))?;
                }
            }
        }
    }
    within(start, Duration::from_secs(30))?;
    Ok("100 masks, 5 levels each".into())
}

// 4 -------------------------------------------------------------------------

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(4);
    let steps = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
    let mut lines = Vec::new();

    let mut ca = core(ChannelAttention::<f64>::new(16, 4, &mut rng_from_seed(41)))?;
    let x = random(Shape::new(4, 16, 5, 5), &mut rng);
    let r = check_grads(
        &mut ca,
        &[x],
        |m, xs| m.forward(&xs[0], Mode::Train).unwrap(),
        |m, dy| vec![m.backward(dy).unwrap()],
        &steps,
        None,
        true,
        1e-12,
        &mut rng,
    );
    lines.push(("channel attention", r));

    let mut sa = core(SpatialAttention::<f64>::new(4, 7, &mut rng_from_seed(42)))?;
    let x = random(Shape::new(2, 4, 8, 8), &mut rng);
    let r = check_grads(
        &mut sa,
        &[x],
        |m, xs| m.forward(&xs[0], Mode::Train).unwrap(),
        |m, dy| vec![m.backward(dy).unwrap()],
        &steps,
        None,
        true,
        1e-12,
        &mut rng,
    );
    lines.push(("spatial attention", r));

    let mut amf = core(Amf::<f64>::new(8, 4, 7, &mut rng_from_seed(43)))?;
    let s = Shape::new(4, 8, 8, 8);
    let mask = bernoulli_mask(s.with_c(1), 0.6, &mut rng);
    let (xr, xd) = (random(s, &mut rng), random(s, &mut rng));
    let r = check_grads(
        &mut amf,
        &[xr, xd],
        |m, xs| m.forward(&xs[0], &xs[1], &mask, Mode::Train).unwrap(),
        |m, dy| {
            let (a, b) = m.backward(dy).unwrap();
            vec![a, b]
        },
        &steps,
        None,
        true,
        1e-12,
        &mut rng,
    );
    lines.push(("fusion block", r));

    let mut drb = DualResidualBlock::<f64>::new(4, &mut rng_from_seed(44));
    let x = random(Shape::new(2, 4, 6, 6), &mut rng);
    let r = check_grads(
        &mut drb,
        &[x],
        |m, xs| m.forward(&xs[0], Mode::Train).unwrap(),
        |m, dy| vec![m.backward(dy).unwrap()],
        &steps,
        None,
        true,
        1e-12,
        &mut rng,
    );
    lines.push(("dual residual block", r));

    let mut failures = Vec::new();
    let mut detail = Vec::new();
    for (name, r) in &lines {
        detail.push(format!("{name} {:.1e}", r.worst));
        if r.worst >= 1e-3 {
            failures.push(format!("{name}: {:.2e} at {}", r.worst, r.worst_name));
        }
    }

    // Whole network at one-eighth width, sampled coordinates.
    let cfg = NetworkConfig::desk_scale((32, 32), 45);
    let mut net = core(AmfNet::<f64>::build_variant(AblationSpec::all(), &cfg))?;
    let input = batch::<f64>(&scenes(46, 4, (32, 32), 0.4));
    let r = check_grads(
        &mut net,
        &[],
        |m, _| m.forward(&input, Mode::Train).unwrap(),
        |m, dy| {
            m.backward(dy).unwrap();
            Vec::new()
        },
        &[1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10, 1e-11],
        Some(2),
        false,
        1e-3,
        &mut rng,
    );
    detail.push(format!("network {:.1e} over {} groups", r.worst, r.groups));
    if r.worst >= 1e-2 {
        failures.push(format!("network: {:.2e} at {}", r.worst, r.worst_name));
    }
    within(start, Duration::from_secs(300)).map_err(|e| format!("{e}; {}", detail.join(", ")))?;
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(detail.join(", "))
}

// 5 -------------------------------------------------------------------------

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn amf_oracle(p: &std::collections::BTreeMap<String, Tensor<f64>>, rgb: &Tensor<f64>, depth: &Tensor<f64>, mask: &Tensor<f64>) -> Tensor<f64> {
    let s = rgb.shape();
    let (pr, pd) = (avg_pool(rgb), avg_pool(depth));
    let cat = Tensor::from_fn(Shape::new(s.n, 2 * s.c, 1, 1), |n, c, _, _| if c < s.c { pr.at(n, c, 0, 0) } else { pd.at(n, c - s.c, 0, 0) });
    let h1 = relu(&bn_eval(&linear(&cat, p, "amg.fc1"), p, "amg.bn1"));
    let h2 = relu(&bn_eval(&linear(&h1, p, "amg.fc2"), p, "amg.bn2"));
    let z = bn_eval(&linear(&h2, p, "amg.fc3"), p, "amg.bn3");
    let w_depth: Vec<f64> = (0..s.n)
        .map(|n| {
            let (a, b) = (z.at(n, 0, 0, 0), z.at(n, 1, 0, 0));
            b.exp() / (a.exp() + b.exp())
        })
        .collect();
    let fused = Tensor::from_fn(s, |n, c, y, x| {
        let md = w_depth[n] * mask.at(n, 0, y, x);
        rgb.at(n, c, y, x) * (1.0 - md) + depth.at(n, c, y, x) * md
    });
    let hidden = relu(&bn_eval(&linear(&avg_pool(&fused), p, "channel.fc1"), p, "channel.bn"));
    let g = linear(&hidden, p, "channel.fc2").map(sigmoid);
    let x1 = gate(&fused, &g);
    let k = p["spatial.conv.weight"].shape().h;
    let sg = conv2d(&x1, &p["spatial.conv.weight"], Some(&p["spatial.conv.bias"]), 1, k / 2).map(sigmoid);
    gate(&x1, &sg)
}

fn shape_and_composition() -> Outcome {
    let mut rng = rng(5);
    let mut notes = Vec::new();

    // Native resolution.
    let sample = scenes(50, 1, (288, 512), 0.3);
    let mut net = core(AmfNet::<f32>::build_variant(AblationSpec::all(), &NetworkConfig::desk_scale((288, 512), 50)))?;
    let logits = core(net.forward(&batch(&sample), Mode::Eval))?;
    ensure(logits.shape() == Shape::new(1, NUM_CLASSES, 288, 512), || format!("logits {:?}", logits.shape()))?;
    notes.push("288x512 -> 3x288x512".to_string());

    // Fusion block against the written-out composition.
    let mut amf = core(Amf::<f64>::new(16, 4, 7, &mut rng_from_seed(51)))?;
    randomize_norms(&mut amf, &mut rng);
    let s = Shape::new(3, 16, 8, 8);
    let (xr, xd) = (random(s, &mut rng), random(s, &mut rng));
    let mask = bernoulli_mask(s.with_c(1), 0.5, &mut rng);
    let got = core(amf.forward(&xr, &xd, &mask, Mode::Eval))?;
    let want = amf_oracle(&named(&amf), &xr, &xd, &mask);
    let d = max_abs_diff(&got, &want);
    ensure(d < 1e-12, || format!("fusion block differs from oracle by {d:e}"))?;
    notes.push(format!("fusion {d:.0e}"));

    // Dual residual block against its formula.
    let mut drb = DualResidualBlock::<f64>::new(6, &mut rng_from_seed(52));
    randomize_norms(&mut drb, &mut rng);
    let x = random(Shape::new(2, 6, 7, 7), &mut rng);
    let got = core(drb.forward(&x, Mode::Eval))?;
    let p = named(&drb);
    let a = cbr(&x, &p, "cbr1", 1);
    let b = add(&a, &cbr(&a, &p, "cbr2", 1));
    let want = add(&cbr(&b, &p, "cbr3", 1), &cbr(&x, &p, "cbr4", 0));
    let d = max_abs_diff(&got, &want);
    ensure(d < 1e-12, || format!("dual residual block differs from oracle by {d:e}"))?;
    notes.push(format!("drb {d:.0e}"));

    // Variant A against hand wiring with element-wise addition.
    let cfg = NetworkConfig::desk_scale((64, 64), 53);
    let mut net = core(AmfNet::<f32>::build_variant(AblationSpec::none(), &cfg))?;
    let input = batch::<f32>(&scenes(53, 2, (64, 64), 0.4));
    let got = core(net.forward(&input, Mode::Eval))?;
    let depth = core(net.depth_encoder.forward(&input.depth, Mode::Eval))?;
    let mut fused = Vec::new();
    let mut x = input.rgb.clone();
    for stage in StageIndex::all() {
        let out = core(net.rgb_encoder.forward_stage(stage, &x, Mode::Eval))?;
        x = core(out.add(&depth.stages[stage.zero_based()]))?;
        fused.push(x.clone());
    }
    let y = core(net.decoder.forward(&fused[4], &[&fused[3], &fused[2], &fused[1], &fused[0]], Mode::Eval))?;
    let want = core(net.head.forward(&y, Mode::Eval))?;
    ensure(got.shape() == want.shape(), || "variant A shape differs".into())?;
    let same = got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "variant A differs from the addition wiring".into())?;
    notes.push("variant A bitwise".into());
    Ok(notes.join(", "))
}

// 6 -------------------------------------------------------------------------

fn metrics_oracle() -> Outcome {
    let mut rng = rng(6);
    let mut pairs = Vec::new();
    for case in 0..100 {
        // Skewed class mixes so some classes are absent from a pair.
        let weights: [f64; NUM_CLASSES] = std::array::from_fn(|c| if (case + c) % 5 == 0 { 0.0 } else { rng.random_range(0.1..1.0) });
        let draw = |rng: &mut ChaCha8Rng| -> u8 {
            let total: f64 = weights.iter().sum();
            let mut t = rng.random_range(0.0..total);
            for (c, w) in weights.iter().enumerate() {
                if t < *w {
                    return c as u8;
                }
                t -= w;
            }
            (NUM_CLASSES - 1) as u8
        };
        let gt: Vec<u8> = (0..256).map(|_| draw(&mut rng)).collect();
        let pred: Vec<u8> = gt.iter().map(|&g| if rng.random_bool(0.3) { rng.random_range(0..3) } else { g }).collect();
        pairs.push((core(LabelMap::new(16, 16, pred))?, core(LabelMap::new(16, 16, gt))?));
    }

    let mut whole = ConfusionMatrix::new();
    let mut f1_checks = 0;
    for (case, (pred, gt)) in pairs.iter().enumerate() {
        let mut conf = ConfusionMatrix::new();
        core(conf.accumulate(pred, gt))?;
        core(whole.accumulate(pred, gt))?;
        let report = core(conf.compute())?;
        let mut acc = [0.0; NUM_CLASSES];
        let mut iou = [0.0; NUM_CLASSES];
        let mut f1 = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES as u8 {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &g) in pred.data().iter().zip(gt.data()) {
                match (p == c, g == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let ci = c as usize;
            ensure(
                (conf.true_positives(ci), conf.false_positives(ci), conf.false_negatives(ci)) == (tp, fp, fn_),
                || format!("case {case} class {c}: counts differ"),
            )?;
            let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            acc[ci] = frac(tp, tp + fn_);
            iou[ci] = frac(tp, tp + fp + fn_);
            f1[ci] = frac(2 * tp, 2 * tp + fp + fn_);
            let m = report.classes[ci];
            ensure((m.acc, m.iou, m.f1) == (acc[ci], iou[ci], f1[ci]), || format!("case {case} class {c}: {m:?}"))?;
            if tp + fp + fn_ > 0 {
                f1_checks += 1;
                let identity = 2.0 * m.iou / (1.0 + m.iou);
                ensure((identity - m.f1).abs() < 1e-12, || format!("case {case} class {c}: F1 {} vs 2IoU/(1+IoU) {identity}", m.f1))?;
            }
        }
        let mean = |v: [f64; NUM_CLASSES]| v.iter().sum::<f64>() / NUM_CLASSES as f64;
        ensure(
            (report.m_acc, report.m_iou, report.m_f1) == (mean(acc), mean(iou), mean(f1)),
            || format!("case {case}: means differ"),
        )?;
    }

    // Random partitions merged back together.
    for _ in 0..10 {
        let parts = rng.random_range(2..8);
        let mut partial = vec![ConfusionMatrix::new(); parts];
        for (pred, gt) in &pairs {
            core(partial[rng.random_range(0..parts)].accumulate(pred, gt))?;
        }
        let mut merged = ConfusionMatrix::new();
        for p in &partial {
            merged.merge(p);
        }
        ensure(merged == whole, || "merged partitions differ from whole-set counts".into())?;
        ensure(core(merged.compute())? == core(whole.compute())?, || "merged report differs".into())?;
    }
    Ok(format!("100 pairs exact, {f1_checks} F1 identities, 10 partitions"))
}

// 7 -------------------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let samples = scenes(70, 8, (96, 128), 0.0);
    let config = TrainConfig {
        batch_size: 1,
        epochs: 25,
        augment: false,
        seed: 70,
        ..TrainConfig::desk()
    };
    let mut state = core(TrainState::<f32>::new(&config, &samples))?;
    let records = core(train::train(&mut state, &samples, &samples, &config, |_, _, _| Ok(())))?;
    let iterations: usize = records.iter().map(|r| r.batch_losses.len()).sum();
    let loss = records.last().map_or(f64::NAN, |r| r.train_loss);
    let m_iou = core(core(evaluate(&mut state.net, &samples, state.depth_divisor, 1))?.compute())?.m_iou;
    let detail = format!("{iterations} iterations, final loss {loss:.4}, train mIoU {:.2}%", 100.0 * m_iou);
    ensure(iterations == 200, || format!("{detail}; expected 200 iterations"))?;
    within(start, Duration::from_secs(600)).map_err(|e| format!("{detail}; {e}"))?;
    ensure(loss < 0.05 && m_iou >= 0.95, || format!("{detail}; needs loss < 0.05 and mIoU >= 95%"))?;
    Ok(detail)
}

// 8 -------------------------------------------------------------------------

fn ablation_harness() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("data");
    let params = SynthParams {
        height: 64,
        width: 64,
        invalid_fraction: 0.4,
        ..SynthParams::desk(80)
    };
    std_err(run::synth(&root, &params, 8, 80, DEFAULT_SPLIT))?;
    let data = std_err(Dataset::open(&root))?;
    let base = TrainConfig {
        input_hw: (64, 64),
        epochs: 1,
        batch_size: 2,
        seed: 80,
        ..TrainConfig::desk()
    };
    let rows = std_err(run::ablate(&data, &base, &tmp.path().join("ablate"), &run::all_rows(), &mut |_, _, _| {}))?;
    let labels: String = rows.iter().map(|r| r.label).collect();
    ensure(labels == "ABCDEFGHIJ", || format!("rows {labels}"))?;
    for r in &rows {
        ensure(r.report.columns().iter().all(|v| v.is_finite()), || format!("row {} has non-finite metrics", r.label))?;
    }
    let p = |c: char| rows.iter().find(|r| r.label == c).map(|r| r.params).unwrap_or(0);
    for c in ['B', 'C', 'D', 'E', 'F'] {
        ensure(p('A') < p(c) && p(c) < p('J'), || format!("A {} < {c} {} < J {} fails", p('A'), p(c), p('J')))?;
    }
    let chain = ['A', 'G', 'H', 'I', 'J'];
    for w in chain.windows(2) {
        ensure(p(w[0]) < p(w[1]), || format!("{} {} < {} {} fails", w[0], p(w[0]), w[1], p(w[1])))?;
    }
    let counts: Vec<String> = chain.iter().map(|&c| format!("{c} {}", p(c))).collect();
    Ok(format!("10 rows trained and evaluated, params {}", counts.join(" < ")))
}

// 9 -------------------------------------------------------------------------

fn best_val_miou(spec: AblationSpec, seed: u64, train_set: &[Sample], val: &[Sample]) -> Result<f64, String> {
    let config = TrainConfig {
        variant: spec,
        seed,
        ..TrainConfig::desk()
    };
    let mut state = core(TrainState::<f32>::new(&config, train_set))?;
    core(train::train(&mut state, train_set, val, &config, |_, _, _| Ok(())))?;
    state.best.map(|(_, m)| m).ok_or_else(|| "no epochs ran".into())
}

fn degradation_trend() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let corpus = scenes(900 + seed, 128, (96, 128), 0.4);
        let ids: Vec<usize> = (0..corpus.len()).collect();
        let [train_ids, val_ids, _] = core(split(&ids, seed, DEFAULT_SPLIT))?;
        let train_set: Vec<Sample> = train_ids.iter().map(|&i| corpus[i].clone()).collect();
        let val: Vec<Sample> = val_ids.iter().map(|&i| corpus[i].clone()).collect();
        let j = best_val_miou(AblationSpec::all(), seed, &train_set, &val)?;
        let a = best_val_miou(AblationSpec::none(), seed, &train_set, &val)?;
        if j >= a {
            wins += 1;
        }
        let line = format!("seed {seed}: J {:.2}% A {:.2}%", 100.0 * j, 100.0 * a);
        eprintln!("  criterion 9 {line} ({:.0} s)", start.elapsed().as_secs_f64());
        per_seed.push(line);
    }
    let detail = format!("J >= A in {wins}/5 ({})", per_seed.join("; "));
    within(start, Duration::from_secs(7200)).map_err(|e| format!("{detail}; {e}"))?;
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

// 10 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("data");
    let params = SynthParams {
        height: 64,
        width: 64,
        invalid_fraction: 0.3,
        ..SynthParams::desk(100)
    };
    std_err(run::synth(&root, &params, 8, 100, DEFAULT_SPLIT))?;
    let data = std_err(Dataset::open(&root))?;
    let config = TrainConfig {
        input_hw: (64, 64),
        epochs: 2,
        batch_size: 2,
        seed: 100,
        ..TrainConfig::desk()
    };
    let a = std_err(run::train(&data, &config, &tmp.path().join("a"), None, &mut |_, _| {}))?;
    let b = std_err(run::train(&data, &config, &tmp.path().join("b"), None, &mut |_, _| {}))?;
    let read = |p: &std::path::Path| fs::read(p).map_err(|e| e.to_string());
    ensure(read(&a.log)? == read(&b.log)?, || "training logs differ".into())?;
    ensure(read(&a.last_checkpoint)? == read(&b.last_checkpoint)?, || "final checkpoints differ".into())?;

    // Save, reload, and compare logits on a fixed batch.
    let samples = scenes(101, 4, (64, 64), 0.3);
    let mut state = core(TrainState::<f32>::new(&TrainConfig { epochs: 1, ..config.clone() }, &samples))?;
    core(train::train(&mut state, &samples, &samples, &TrainConfig { epochs: 1, ..config.clone() }, |_, _, _| Ok(())))?;
    let path = tmp.path().join("state.safetensors");
    std_err(checkpoint::save(&path, &state, &config))?;
    let mut reloaded = std_err(std_err(Checkpoint::read(&path))?.network())?;
    let input = batch::<f32>(&samples);
    let x = core(state.net.forward(&input, Mode::Eval))?;
    let y = core(reloaded.forward(&input, Mode::Eval))?;
    ensure(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()), || "reloaded logits differ".into())?;
    Ok(format!("logs and checkpoints byte-identical, {} logits bitwise after reload", x.data().len()))
}

// ---------------------------------------------------------------------------

const CRITERIA: [(u32, &str, fn() -> Outcome); 10] = [
    (1, "mask algebra", mask_algebra),
    (2, "softmax contract", softmax_contract),
    (3, "pyramid contract", pyramid_contract),
    (4, "gradient checks", gradient_checks),
    (5, "shape and composition", shape_and_composition),
    (6, "metrics oracle", metrics_oracle),
    (7, "overfit sanity", overfit),
    (8, "ablation harness", ablation_harness),
    (9, "degradation trend", degradation_trend),
    (10, "determinism and round trip", determinism),
];

fn selected() -> Option<Vec<u32>> {
    let spec = std::env::var("ACCEPTANCE_CRITERIA").ok()?;
    Some(spec.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut unexpected = 0;
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let expected_red = EXPECTED_RED.contains(&id);
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => ("FAIL", d.clone()),
        };
        let note = match (result.is_ok(), expected_red) {
            (false, true) => " [expected failure]",
            (true, true) => " [listed as expected failure but passed]",
            _ => "",
        };
        println!("criterion {id:>2} [{name}] {status} {detail} ({secs:.1} s){note}");
        if result.is_err() && !expected_red {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
