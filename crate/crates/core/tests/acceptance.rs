//! Acceptance criteria, one test per criterion. Every test prints a single
//! `criterion N ...: PASS|FAIL` line before asserting. Tests share a lock so
//! the measured runtimes are not inflated by each other.

use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use boxdistill::labels::{BinaryMask, LabelMap};
use boxdistill::metrics::{evaluate_pairs, Evaluation, MetricReport};
use boxdistill::model::{BackboneSpec, ModelConfig, NormKind, ParamRole, StudentModel};
use boxdistill::objectives::{
    asymmetric_dice, self_correct, total_loss, weighted_cross_entropy, LossConfig,
};
use boxdistill::pseudo_labels::{rasterize, OverlapPolicy};
use boxdistill::synthetic::{
    format_paired, generate_dataset, run_paired, AblationSetup, NoiseProfile, SceneConfig,
    SplitSizes,
};
use boxdistill::teacher::TeacherMask;
use boxdistill::trainer::{
    clip_gradients, cosine_lr, fit, gradient_norm, predict_image, prepare, EmaState, FitOptions,
    InMemory, Sample, Trainer, TrainingConfig,
};
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} {name} failed: {detail}");
}

// ---------------------------------------------------------------- 1

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn central_difference(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> f64, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let tp = Tensor::from_vec(plus, shape, &Device::Cpu).unwrap();
            let tm = Tensor::from_vec(minus, shape, &Device::Cpu).unwrap();
            (f(&tp) - f(&tm)) / (2.0 * h)
        })
        .collect()
}

fn analytic_gradient(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let v = Var::from_tensor(&Tensor::from_vec(x.to_vec(), shape, &Device::Cpu).unwrap()).unwrap();
    let loss = f(v.as_tensor());
    let grads = loss.backward().unwrap();
    grads
        .get(v.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

#[test]
fn criterion_1_loss_gradients() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_dice: f64 = 0.0;
    let mut worst_ce: f64 = 0.0;
    let cases = 100;
    for _ in 0..cases {
        let shape = [
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        ];
        let n: usize = shape.iter().product();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
        let beta = rng.gen_range(0.1..0.9);
        let eps = 10f64.powf(rng.gen_range(-6.0..-1.0));
        let gt = Tensor::from_vec(g, &shape[..], &Device::Cpu).unwrap();
        let loss = |t: &Tensor| asymmetric_dice(t, &gt, beta, eps).unwrap();
        let a = analytic_gradient(&p, &shape, &loss);
        let fd = central_difference(&p, &shape, &|t| scalar(&loss(t)), 1e-6);
        worst_dice = worst_dice.max(rel_err(&a, &fd));
    }
    for _ in 0..cases {
        let (b, c, h, w) = (
            rng.gen_range(1..3),
            rng.gen_range(2..5),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let shape = [b, c, h, w];
        let x: Vec<f64> = (0..b * c * h * w)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let targets: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..c) as u8).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..5.0)).collect();
        let loss = |t: &Tensor| weighted_cross_entropy(t, &targets, &weights).unwrap();
        let a = analytic_gradient(&x, &shape, &loss);
        let fd = central_difference(&x, &shape, &|t| scalar(&loss(t)), 1e-6);
        worst_ce = worst_ce.max(rel_err(&a, &fd));
    }
    let ones =
        Tensor::from_vec(vec![1.0f64, 0.0, 1.0, 1.0, 0.0, 0.0], (2, 3), &Device::Cpu).unwrap();
    let zeros = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
    let perfect = scalar(&asymmetric_dice(&ones, &ones, 0.4, 1e-6).unwrap());
    let background = scalar(&asymmetric_dice(&zeros, &zeros, 0.4, 1e-6).unwrap());
    let elapsed = start.elapsed();
    let pass = worst_dice < 1e-4
        && worst_ce < 1e-4
        && perfect == 0.0
        && background == 0.0
        && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "loss gradients",
        pass,
        &format!(
            "{cases}+{cases} cases, max rel err dice {worst_dice:.2e} wCE {worst_ce:.2e}, perfect {perfect}, \
             all-background {background}, {:.1?}",
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- 2

fn next_up(x: f32) -> f32 {
    f32::from_bits(x.to_bits() + 1)
}

#[test]
fn criterion_2_self_correction_contract() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pixels = 0usize;
    let mut violations = Vec::<String>::new();
    let mut boundary_checked = 0usize;
    while pixels < 120_000 {
        let k = rng.gen_range(2..6usize);
        let n = rng.gen_range(50..400usize);
        let tau = (rng.gen_range(0.3..0.99f64) as f32) as f64;
        let pseudo: Vec<u8> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.6) {
                    0
                } else {
                    rng.gen_range(1..k) as u8
                }
            })
            .collect();
        // 0: random row, 1: defect prob exactly tau, 2: just above tau
        let kinds: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let mut probs = Vec::with_capacity(n * k);
        for &kind in &kinds {
            let mut row: Vec<f32> = match kind {
                0 => {
                    let raw: Vec<f64> =
                        (0..k).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
                    let s: f64 = raw.iter().sum::<f64>().max(1e-9);
                    raw.iter().map(|v| (v / s) as f32).collect()
                }
                _ => {
                    let top = if kind == 1 {
                        tau as f32
                    } else {
                        next_up(tau as f32)
                    };
                    let c = rng.gen_range(1..k);
                    let mut r = vec![0f32; k];
                    r[c] = top;
                    r[0] = 1.0 - top;
                    r
                }
            };
            if row.iter().all(|&v| v == 0.0) {
                row[0] = 1.0;
            }
            probs.extend(row);
        }
        let (out, stats) = self_correct(&pseudo, &probs, k, tau, false).unwrap();
        let mut changed = 0u64;
        for i in 0..n {
            let row = &probs[i * k..(i + 1) * k];
            let (mut best, mut best_p) = (1, row[1]);
            for (c, &p) in row.iter().enumerate().skip(2) {
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            let expect = if pseudo[i] != 0 {
                pseudo[i]
            } else if best_p as f64 > tau {
                best as u8
            } else {
                0
            };
            if pseudo[i] != 0 && out[i] != pseudo[i] {
                violations.push(format!("defect label altered at pixel {i}"));
            }
            if out[i] != expect {
                violations.push(format!("pixel {i}: got {} expected {expect}", out[i]));
            }
            if pseudo[i] == 0 && kinds[i] == 1 {
                boundary_checked += 1;
                if out[i] != 0 {
                    violations.push(format!("pixel {i} at exactly tau was relabeled"));
                }
            }
            if pseudo[i] == 0 && kinds[i] == 2 && out[i] == 0 {
                violations.push(format!("pixel {i} just above tau was not relabeled"));
            }
            changed += (out[i] != pseudo[i]) as u64;
        }
        if stats.pixels_corrected != changed {
            violations.push("corrected count disagrees with changed pixels".into());
        }
        let (warm, warm_stats) = self_correct(&pseudo, &probs, k, tau, true).unwrap();
        if warm != pseudo || warm_stats.pixels_corrected != 0 {
            violations.push("warm-up changed labels".into());
        }
        let (again, _) = self_correct(&out, &probs, k, tau, false).unwrap();
        if again != out {
            violations.push("correction is not idempotent".into());
        }
        pixels += n;
    }
    let elapsed = start.elapsed();
    let pass = violations.is_empty() && pixels >= 100_000 && elapsed < Duration::from_secs(60);
    verdict(
        2,
        "self-correction contract",
        pass,
        &format!(
            "{pixels} pixels, {boundary_checked} exactly at tau, {} violations{}, {:.1?}",
            violations.len(),
            violations
                .first()
                .map(|v| format!(" (first: {v})"))
                .unwrap_or_default(),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- 3

fn brute_force_label(masks: &[TeacherMask], idx: usize, policy: OverlapPolicy) -> u8 {
    let covering: Vec<u8> = masks
        .iter()
        .filter(|m| m.mask.as_slice()[idx])
        .map(|m| m.class_id as u8 + 1)
        .collect();
    match (covering.is_empty(), policy) {
        (true, _) => 0,
        (false, OverlapPolicy::HighestClassPriority) => *covering.iter().max().unwrap(),
        (false, OverlapPolicy::LastWins) => *covering.last().unwrap(),
        (false, OverlapPolicy::FirstWins) => covering[0],
    }
}

#[test]
fn criterion_3_rasterization_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    let mut overlapping_pixels = 0usize;
    let scenes = 200;
    for _ in 0..scenes {
        let (w, h) = (rng.gen_range(1..=64u32), rng.gen_range(1..=64u32));
        let masks: Vec<TeacherMask> = (0..rng.gen_range(0..8usize))
            .map(|i| {
                let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
                let (x1, y1) = (rng.gen_range(x0 + 1..=w), rng.gen_range(y0 + 1..=h));
                let speckle = rng.gen_range(0.0..0.2);
                let data = (0..w * h)
                    .map(|p| {
                        let (x, y) = (p % w, p / w);
                        let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                        inside && !rng.gen_bool(0.1) || rng.gen_bool(speckle)
                    })
                    .collect();
                TeacherMask {
                    mask: BinaryMask::from_vec(w, h, data).unwrap(),
                    source_box_index: i,
                    class_id: rng.gen_range(0..4),
                }
            })
            .collect();
        overlapping_pixels += (0..(w * h) as usize)
            .filter(|&i| masks.iter().filter(|m| m.mask.as_slice()[i]).count() > 1)
            .count();
        for policy in [
            OverlapPolicy::HighestClassPriority,
            OverlapPolicy::LastWins,
            OverlapPolicy::FirstWins,
        ] {
            let got = rasterize(&masks, w, h, policy).unwrap();
            mismatches += (0..(w * h) as usize)
                .filter(|&i| got.as_slice()[i] != brute_force_label(&masks, i, policy))
                .count();
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && overlapping_pixels > 0 && elapsed < Duration::from_secs(60);
    verdict(
        3,
        "rasterization oracle",
        pass,
        &format!("{scenes} scenes x 3 policies, {overlapping_pixels} overlapping pixels, {mismatches} mismatches, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------- 4

/// Metrics recomputed from raw per-pixel tallies.
fn brute_force_report(
    pairs: &[(String, LabelMap, LabelMap)],
    k: usize,
    ignore: u8,
) -> MetricReport {
    let mut tp = vec![0u64; k];
    let mut fp = vec![0u64; k];
    let mut fn_ = vec![0u64; k];
    let (mut btp, mut bfp, mut bfn) = (0u64, 0u64, 0u64);
    for (_, pred, gt) in pairs {
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == ignore {
                continue;
            }
            for c in 0..k as u8 {
                match (p == c, g == c) {
                    (true, true) => tp[c as usize] += 1,
                    (true, false) => fp[c as usize] += 1,
                    (false, true) => fn_[c as usize] += 1,
                    _ => {}
                }
            }
            match (p > 0, g > 0) {
                (true, true) => btp += 1,
                (true, false) => bfp += 1,
                (false, true) => bfn += 1,
                _ => {}
            }
        }
    }
    let frac = |n: u64, d: u64| {
        if d == 0 {
            None
        } else {
            Some(n as f64 / d as f64)
        }
    };
    let avg = |v: Vec<Option<f64>>| {
        let d: Vec<f64> = v.into_iter().flatten().collect();
        if d.is_empty() {
            None
        } else {
            Some(d.iter().sum::<f64>() / d.len() as f64)
        }
    };
    let iou: Vec<Option<f64>> = (0..k)
        .map(|c| frac(tp[c], tp[c] + fp[c] + fn_[c]))
        .collect();
    MetricReport {
        miou: avg(iou.clone()),
        miou_anom: avg(iou[1..].to_vec()),
        f1_anom: frac(2 * btp, 2 * btp + bfp + bfn),
        f1_anom_macro: avg((1..k)
            .map(|c| frac(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c]))
            .collect()),
        iou_bin: frac(btp, btp + bfp + bfn),
        recall_bin: frac(btp, btp + bfn),
        precision_bin: frac(btp, btp + bfp),
        per_class_iou: iou,
    }
}

fn random_pair(rng: &mut ChaCha8Rng, id: usize, k: usize) -> (String, LabelMap, LabelMap) {
    let (w, h) = (rng.gen_range(1..40u32), rng.gen_range(1..40u32));
    let fg = rng.gen_range(0.0..0.5);
    let mut draw = |ignore: bool| -> Vec<u8> {
        (0..w * h)
            .map(|_| {
                if ignore && rng.gen_bool(0.05) {
                    255
                } else if rng.gen_bool(fg) {
                    rng.gen_range(1..k) as u8
                } else {
                    0
                }
            })
            .collect()
    };
    let pred = draw(false);
    let gt = draw(true);
    (
        format!("img{id}"),
        LabelMap::from_vec(w, h, pred).unwrap(),
        LabelMap::from_vec(w, h, gt).unwrap(),
    )
}

#[test]
fn criterion_4_metrics_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 3;
    let pairs: Vec<_> = (0..200).map(|i| random_pair(&mut rng, i, k)).collect();
    let mut worst: f64 = 0.0;
    for pair in &pairs {
        let one = std::slice::from_ref(pair);
        let got = evaluate_pairs(one, k, Some(255)).unwrap().report;
        worst = worst.max(got.max_abs_diff(&brute_force_report(one, k, 255)));
    }
    let mut other_k: f64 = 0.0;
    for kk in [2, 4, 6] {
        let ps: Vec<_> = (0..20).map(|i| random_pair(&mut rng, i, kk)).collect();
        let got = evaluate_pairs(&ps, kk, Some(255)).unwrap().report;
        other_k = other_k.max(got.max_abs_diff(&brute_force_report(&ps, kk, 255)));
    }
    let whole = evaluate_pairs(&pairs, k, Some(255)).unwrap();
    let pooled = whole
        .report
        .max_abs_diff(&brute_force_report(&pairs, k, 255));

    let mut shuffled = pairs.clone();
    let mut order_rng = ChaCha8Rng::seed_from_u64(40);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, order_rng.gen_range(0..=i));
    }
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(7)
        .build()
        .unwrap();
    let a: Evaluation = single.install(|| evaluate_pairs(&shuffled, k, Some(255)).unwrap());
    let b: Evaluation = many.install(|| evaluate_pairs(&shuffled, k, Some(255)).unwrap());
    let invariant = a.confusion == whole.confusion
        && b.confusion == whole.confusion
        && a.report == whole.report
        && b.report == whole.report;

    let elapsed = start.elapsed();
    let worst_all = worst.max(other_k).max(pooled);
    let pass = worst_all <= 1e-12 && invariant && elapsed < Duration::from_secs(60);
    verdict(
        4,
        "metrics oracle",
        pass,
        &format!(
            "200 pairs, max |diff| {worst_all:.1e} (per pair {worst:.1e}, pooled {pooled:.1e}, K=2/4/6 {other_k:.1e}), \
             order/thread invariance {invariant}, {elapsed:.1?}"
        ),
    );
}

// ---------------------------------------------------------------- 5

fn snapshot(
    model: &StudentModel,
    keep: impl Fn(ParamRole, usize) -> bool,
) -> Vec<(String, Vec<u32>)> {
    model
        .params()
        .iter()
        .filter(|p| keep(p.role, p.var().rank()))
        .map(|p| {
            let v: Vec<f32> = p
                .var()
                .as_tensor()
                .to_dtype(DType::F32)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            (p.name.clone(), v.into_iter().map(f32::to_bits).collect())
        })
        .collect()
}

fn synthetic_samples(n: usize, seed: u64, image_size: u32) -> Vec<Sample> {
    let scene = SceneConfig {
        seed,
        image_size,
        defect_image_fraction: 1.0,
        ..SceneConfig::default()
    };
    let items = generate_dataset(
        &scene,
        &NoiseProfile::default(),
        SplitSizes {
            train: n,
            val: 0,
            test: 0,
        },
    )
    .unwrap();
    items
        .into_iter()
        .map(|it| Sample {
            image_id: it.image_id,
            image: it.sample.image,
            labels: it.labels.pseudo,
        })
        .collect()
}

#[test]
fn criterion_5_architecture_and_freezing() {
    let _g = serial();
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    let small = ModelConfig::desk_scale(2);
    let large = ModelConfig {
        num_classes: 2,
        input_size: 518,
        decoder_width: 8,
        detail_width: 4,
        head_width: 4,
        norm: NormKind::Batch,
        bitfit: true,
        backbone: BackboneSpec::test_stub(14, 16),
    };
    for cfg in [&small, &large] {
        let model = StudentModel::new(cfg, 5).unwrap();
        let s = cfg.input_size;
        let x = Tensor::randn(0f32, 1.0, (1, 3, s, s), &Device::Cpu).unwrap();
        let out = model.forward(&x, false).unwrap();
        let shapes_ok =
            out.binary_logits.dims() == [1, 2, s, s] && out.fine_logits.dims() == [1, 3, s, s];
        ok &= shapes_ok;
        notes.push(format!(
            "{s}px heads {:?}/{:?}",
            out.binary_logits.dims(),
            out.fine_logits.dims()
        ));
    }

    let cfg = TrainingConfig {
        model: small.clone(),
        lr: 1e-2,
        batch_size: 2,
        ..TrainingConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, 10, 0, vec![1.0; 3]).unwrap();
    let weights_before = snapshot(trainer.model(), |r, rank| {
        r == ParamRole::BackboneFrozen && rank >= 2
    });
    let biases_before = snapshot(trainer.model(), |r, _| r == ParamRole::BackboneBias);
    let samples = synthetic_samples(2, 5, 128);
    let batch: Vec<_> = samples
        .iter()
        .map(|s| prepare(s, 128, false).unwrap())
        .collect();
    for _ in 0..10 {
        trainer.train_step(&batch, 0).unwrap();
    }
    let weights_after = snapshot(trainer.model(), |r, rank| {
        r == ParamRole::BackboneFrozen && rank >= 2
    });
    let biases_after = snapshot(trainer.model(), |r, _| r == ParamRole::BackboneBias);
    let frozen_identical = weights_before == weights_after && !weights_before.is_empty();
    let biases_changed = biases_before
        .iter()
        .zip(&biases_after)
        .filter(|(a, b)| a.1 != b.1)
        .count();
    let trainable = trainer.model().trainable_vars();
    let leaked = trainable
        .iter()
        .filter(|(_, role, _)| *role == ParamRole::BackboneFrozen)
        .count();
    ok &= frozen_identical && biases_changed >= 1 && leaked == 0;
    notes.push(format!(
        "{} backbone weight matrices bit-identical: {frozen_identical}, {biases_changed}/{} backbone biases changed, \
         {leaked} frozen tensors among trainable",
        weights_before.len(),
        biases_before.len()
    ));

    let full = ModelConfig::default();
    let ratio = match std::env::var_os("BOXDISTILL_VIT_WEIGHTS") {
        Some(path) => {
            let cfg = ModelConfig {
                backbone: BackboneSpec::vit_s14(Some(path.into())),
                ..full
            };
            let r = StudentModel::new(&cfg, 0).unwrap().parameter_report();
            notes.push("pretrained weights loaded".into());
            r.trainable_ratio()
        }
        None => {
            notes.push("pretrained ratio from the analytic budget".into());
            full.parameter_budget().trainable_ratio()
        }
    };
    ok &= ratio < 0.35;
    notes.push(format!("ViT-S/14 trainable/total {ratio:.3}"));

    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    notes.push(format!("{elapsed:.1?}"));
    verdict(5, "architecture shape/freeze", ok, &notes.join(", "));
}

// ---------------------------------------------------------------- 6

fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        input_size: 32,
        decoder_width: 8,
        detail_width: 4,
        head_width: 4,
        norm: NormKind::Batch,
        bitfit: true,
        backbone: BackboneSpec::test_stub(8, 16),
    }
}

#[test]
fn criterion_6_trainer_mechanics() {
    let _g = serial();
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    // clipping under adversarial loss scales
    let cfg = TrainingConfig {
        model: tiny_model(),
        ..TrainingConfig::default()
    };
    let model = StudentModel::new(&cfg.model, 6).unwrap();
    let vars: Vec<(String, Var)> = model
        .trainable_vars()
        .into_iter()
        .map(|(n, _, v)| (n, v))
        .collect();
    let samples = synthetic_samples(2, 6, 64);
    let batch: Vec<_> = samples
        .iter()
        .map(|s| prepare(s, 32, false).unwrap())
        .collect();
    let x = Tensor::stack(
        &batch.iter().map(|p| p.image.clone()).collect::<Vec<_>>(),
        0,
    )
    .unwrap();
    let labels: Vec<u8> = batch.iter().flat_map(|p| p.labels.clone()).collect();
    let mut worst_post: f64 = 0.0;
    let mut largest_pre: f64 = 0.0;
    for scale in [1e-3, 1.0, 1e3, 1e6, 1e9, -1e7] {
        let out = model.forward(&x, true).unwrap();
        let loss = total_loss(
            &out.binary_logits,
            &out.fine_logits,
            &labels,
            &LossConfig::default(),
            &[1.0; 3],
            true,
        )
        .unwrap();
        let mut grads = (loss.total * scale).unwrap().backward().unwrap();
        let pre = clip_gradients(&mut grads, &vars, 1.0).unwrap();
        let post = gradient_norm(&grads, &vars).unwrap();
        largest_pre = largest_pre.max(pre);
        worst_post = worst_post.max(post);
    }
    let clip_ok = worst_post <= 1.0 + 1e-6 && largest_pre > 1e3;
    ok &= clip_ok;
    notes.push(format!(
        "max post-clip norm {worst_post:.9} (pre up to {largest_pre:.1e})"
    ));

    // schedule endpoints
    let base = 3e-3;
    let start_lr = cosine_lr(0, 500, base, 0.01).unwrap();
    let end_lr = cosine_lr(500, 500, base, 0.01).unwrap();
    let cos_ok = start_lr == base && end_lr == base * 0.01;
    ok &= cos_ok;
    notes.push(format!("cosine endpoints {start_lr:e} -> {end_lr:e}"));

    // EMA recurrence against a scalar oracle
    let decay = 0.9;
    let mut ema = EmaState::new(&model, decay).unwrap();
    let tracked: Vec<_> = model
        .params()
        .iter()
        .filter(|p| p.is_tracked())
        .cloned()
        .collect();
    let mut oracle: Vec<Vec<f32>> = tracked
        .iter()
        .map(|p| {
            p.var()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut ema_err: f32 = 0.0;
    for _ in 0..5 {
        for (p, o) in tracked.iter().zip(oracle.iter_mut()) {
            let vals: Vec<f32> = (0..o.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            p.var()
                .set(&Tensor::from_vec(vals.clone(), p.var().shape(), &Device::Cpu).unwrap())
                .unwrap();
            for (s, v) in o.iter_mut().zip(&vals) {
                *s = *s * decay as f32 + *v * (1.0 - decay) as f32;
            }
        }
        ema.update(&model).unwrap();
        for (p, o) in tracked.iter().zip(&oracle) {
            let shadow: Vec<f32> = ema
                .model()
                .params()
                .get(&p.name)
                .unwrap()
                .var()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            for (a, b) in shadow.iter().zip(o) {
                ema_err = ema_err.max((a - b).abs());
            }
        }
    }
    let ema_ok = ema_err <= 1e-6;
    ok &= ema_ok;
    notes.push(format!(
        "EMA max |shadow - oracle| {ema_err:.1e} over {} tensors x 5 steps",
        tracked.len()
    ));

    // bit-exact reproducibility of logged losses
    let run_cfg = TrainingConfig {
        model: tiny_model(),
        epochs: 2,
        batch_size: 2,
        seed: 11,
        lr: 3e-3,
        ..TrainingConfig::default()
    };
    let train = InMemory(synthetic_samples(6, 7, 64));
    let val = InMemory(synthetic_samples(2, 8, 64));
    let losses = || -> Vec<(u64, u64, u64)> {
        fit(&run_cfg, &train, Some(&val), &FitOptions::default())
            .unwrap()
            .steps
            .iter()
            .map(|s| {
                (
                    s.loss_total.to_bits(),
                    s.loss_bin.to_bits(),
                    s.grad_norm.to_bits(),
                )
            })
            .collect()
    };
    let first = losses();
    let second = losses();
    let repro_ok = first == second && !first.is_empty();
    ok &= repro_ok;
    notes.push(format!(
        "{} logged steps reproduced bit-for-bit: {repro_ok}",
        first.len()
    ));

    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    notes.push(format!("{elapsed:.1?}"));
    verdict(6, "trainer mechanics", ok, &notes.join(", "));
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_overfit_one_sample() {
    let _g = serial();
    let start = Instant::now();
    let sample = synthetic_samples(32, 70, 128)
        .into_iter()
        .max_by_key(|s| s.labels.count_nonzero())
        .unwrap();
    let model_cfg = ModelConfig::desk_scale(2);
    let mut loss = LossConfig::default();
    loss.self_correction = false;
    let cfg = TrainingConfig {
        model: model_cfg,
        lr: 3e-3,
        use_ema: false,
        weight_decay: 0.0,
        loss,
        ..TrainingConfig::default()
    };
    let mut counts = vec![0u64; 3];
    for &v in sample.labels.as_slice() {
        counts[v as usize] += 1;
    }
    let weights = cfg.loss.class_weights.resolve(3, &counts).unwrap();
    let max_steps = 800;
    let mut trainer = Trainer::new(&cfg, max_steps, 0, weights).unwrap();
    let prepared = vec![prepare(&sample, 128, false).unwrap()];
    let total = sample.labels.as_slice().len() as f64;
    let defect = sample.labels.count_nonzero() as f64;
    let (mut agreement, mut defect_agreement) = (0.0, 0.0);
    let mut steps = 0;
    // trained until the defect pixels are fit too, since background alone clears the bar
    while steps < max_steps {
        trainer.train_step(&prepared, 0).unwrap();
        steps += 1;
        if steps % 25 == 0 {
            let pred = predict_image(trainer.inference_model(), &sample.image).unwrap();
            let pairs = pred.classes.as_slice().iter().zip(sample.labels.as_slice());
            let same = pairs.clone().filter(|(a, b)| a == b).count();
            let same_defect = pairs.filter(|(a, b)| **b > 0 && a == b).count();
            agreement = same as f64 / total;
            defect_agreement = same_defect as f64 / defect;
            if agreement >= 0.99 && defect_agreement >= 0.99 {
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = agreement >= 0.99 && elapsed < Duration::from_secs(600);
    verdict(
        7,
        "overfit one sample",
        pass,
        &format!(
            "pixel agreement {agreement:.4}, on pseudo-defect pixels {defect_agreement:.4}, after {steps} steps ({defect} defect px of {total}), {elapsed:.1?}"
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_directional_self_correction() {
    let _g = serial();
    let start = Instant::now();
    let setup = AblationSetup::default();
    let noise = &setup.noise;
    let fn_heavy = noise.fn_component_drop_rate == 0.3
        && noise.fn_erode_radius == 1
        && noise.box_omission_rate == 0.15;
    let noisy = run_paired(&setup, &[1, 2, 3], |o| {
        println!(
            "  seed {} correction {}: recall_bin {:?} miou_anom {:?}",
            o.seed, o.with_correction, o.test.recall_bin, o.test.miou_anom
        )
    })
    .unwrap();
    let clean_setup = AblationSetup {
        noise: NoiseProfile::clean(),
        ..setup.clone()
    };
    let clean = run_paired(&clean_setup, &[1], |_| {}).unwrap();
    println!(
        "noisy teacher\n{}clean teacher\n{}",
        format_paired(&noisy),
        format_paired(&clean)
    );

    let recall = noisy.mean_recall_delta.unwrap_or(f64::NAN);
    let miou = noisy.mean_miou_anom_delta.unwrap_or(f64::NAN);
    let clean_recall = clean.mean_recall_delta.unwrap_or(f64::NAN);
    let clean_frac = clean
        .rows
        .iter()
        .map(|r| r.with.corrected_fraction())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = fn_heavy
        && recall >= 0.05
        && miou >= 0.0
        && clean_recall.abs() < 0.03
        && clean_frac < 0.02
        && elapsed <= Duration::from_secs(45 * 60);
    verdict(
        8,
        "directional self-correction",
        pass,
        &format!(
            "3 seeds: mean recall delta {recall:+.4} (>= +0.05), mean anomaly mIoU delta {miou:+.4} (>= 0); \
             clean teacher: recall delta {clean_recall:+.4} (|.| < 0.03), corrected {:.3}% (< 2%); {elapsed:.1?}",
            100.0 * clean_frac
        ),
    );
}

// ---------------------------------------------------------------- 9

fn boxdistill(args: &[&str], config: &Path, overrides: &[String]) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_boxdistill"));
    cmd.args(args).arg("--config").arg(config);
    for o in overrides {
        cmd.arg("--override").arg(o);
    }
    let out = cmd
        .env_remove("BOXDISTILL_TEACHER_ENDPOINT")
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn read_eval(path: &Path) -> Evaluation {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn criterion_9_pipeline_integrity() {
    let _g = serial();
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut cfg = boxdistill::config::RunConfig::default();
    cfg.training = TrainingConfig {
        model: ModelConfig::desk_scale(2),
        epochs: 2,
        batch_size: 4,
        lr: 3e-3,
        ..TrainingConfig::default()
    };
    cfg.synth.sizes = SplitSizes {
        train: 8,
        val: 4,
        test: 6,
    };
    cfg.synth.scene.image_size = 96;
    let bench_cfg = root.join("bench.toml");
    std::fs::write(&bench_cfg, cfg.to_toml().unwrap()).unwrap();

    let mut codes = Vec::new();
    codes.push(boxdistill(
        &[
            "synth-bench",
            "--seeds",
            "0",
            "--output",
            root.join("bench").to_str().unwrap(),
        ],
        &bench_cfg,
        &[],
    ));
    let data_cfg = root.join("bench/dataset/config.toml");
    // a fresh cache proves pseudo-label regenerates what synth-bench produced
    let cache = format!("data.cache_root={:?}", root.join("cache").to_str().unwrap());
    codes.push(boxdistill(
        &[
            "pseudo-label",
            "--output",
            root.join("pl").to_str().unwrap(),
        ],
        &data_cfg,
        &[cache.clone()],
    ));
    codes.push(boxdistill(
        &["train", "--output", root.join("train").to_str().unwrap()],
        &data_cfg,
        &[cache.clone()],
    ));
    let ckpt = format!(
        "data.checkpoint={:?}",
        root.join("train/ckpt_best.safetensors").to_str().unwrap()
    );
    codes.push(boxdistill(
        &["predict", "--output", root.join("pred").to_str().unwrap()],
        &data_cfg,
        &[ckpt],
    ));
    let preds = format!(
        "data.predictions={:?}",
        root.join("pred/classes").to_str().unwrap()
    );
    codes.push(boxdistill(
        &["eval", "--output", root.join("eval").to_str().unwrap()],
        &data_cfg,
        &[preds],
    ));

    let all_ok = codes.iter().all(|&c| c == 0);
    let (diff, same_cm) = if all_ok {
        let internal = read_eval(&root.join("train/test_metrics.json"));
        let external = read_eval(&root.join("eval/test_metrics.json"));
        (
            internal.report.max_abs_diff(&external.report),
            internal.confusion == external.confusion,
        )
    } else {
        (f64::INFINITY, false)
    };
    let elapsed = start.elapsed();
    let pass = all_ok && diff <= 1e-9 && same_cm && elapsed < Duration::from_secs(600);
    verdict(
        9,
        "pipeline integrity",
        pass,
        &format!(
            "exit codes synth-bench/pseudo-label/train/predict/eval {codes:?}, predict+eval vs trainer evaluation \
             max |diff| {diff:.1e}, identical confusion {same_cm}, {elapsed:.1?}"
        ),
    );
}
