//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::Instant;

use colora::data::synth::noise_split;
use colora::data::{distill, predictive_entropy, Keep};
use colora::gradcheck::{model_gradient_errors, op_gradient_errors};
use colora::metrics::{f1_score, roc_binary};
use colora::model::{build_tiny_vgg, colora_count, conv_original, inject_colora, HeadSpec, InjectPolicy, Targets};
use colora::tensor::relative_error;
use colora::trainer::Arm;
use colora::{CoLoRALayer, ConvGeometry, ConvKernel, GradTape, Order, Padding, Tensor, Var};
use colora_cli::{cmd_synth, cmd_train, cmd_transfer, merge_equivalence, SynthTask, TransferOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn merge_equivalence_suite() -> Outcome {
    let m = merge_equivalence(200, 0).map_err(|e| e.to_string())?;
    let (pd, dp) = (m.count(Order::PwThenDw), m.count(Order::DwThenPw));
    let ok = m.passed() && m.seconds < 60.0 && pd >= 50 && dp >= 50;
    Ok((
        ok,
        format!(
            "{} layers ({pd} pw_dw, {dp} dw_pw), max relative deviation {:.2e} (limit 1e-5), {:.2}s",
            m.cases.len(),
            m.max_deviation(),
            m.seconds
        ),
    ))
}

fn zero_init_transparency() -> Outcome {
    let e = |e: colora::Error| e.to_string();
    let base = build_tiny_vgg([12, 12, 3], &[6, 8], HeadSpec::new(6, 8, 4), 1).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for order in [Order::PwThenDw, Order::DwThenPw] {
        let inj = inject_colora(&base, &Targets::All, order, InjectPolicy::FreezeBackbone, 3).map_err(e)?;
        for _ in 0..100 {
            let x = random(&[1, 12, 12, 3], &mut rng);
            if !base.forward(&x).map_err(e)?.bit_eq(&inj.forward(&x).map_err(e)?) {
                return Ok((false, format!("output differs after {checked} identical inputs ({order})")));
            }
            checked += 1;
        }
    }
    Ok((true, format!("{checked} inputs over both orders, outputs bit-identical")))
}

fn cumulative_merge() -> Outcome {
    let e = |e: colora::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for order in [Order::PwThenDw, Order::DwThenPw] {
        let k0 = ConvKernel::new(random(&[3, 3, 4, 6], &mut rng), Some(random(&[6], &mut rng))).map_err(e)?;
        let mut layer = CoLoRALayer::new(k0.clone(), order, ConvGeometry::default(), 5);
        let mut want_k: Vec<f64> = k0.weights().data().iter().map(|&v| v as f64).collect();
        let mut want_b: Vec<f64> = k0.bias().unwrap().data().iter().map(|&v| v as f64).collect();
        for epoch in 0..5u64 {
            let x = random(&[2, 7, 7, 4], &mut rng);
            let w = random(&[2, 7, 7, 6], &mut rng);
            for _ in 0..4 {
                let mut tape = GradTape::new();
                let xv = tape.constant(x.clone());
                let y = layer.record(&mut tape, xv, "l", true).map_err(e)?;
                let loss = tape.weighted_sum(y, w.clone()).map_err(e)?;
                let g = tape.backward(loss).map_err(e)?;
                let step = |p: &mut Tensor, d: &Tensor| p.data_mut().iter_mut().zip(d.data()).for_each(|(v, d)| *v -= 0.01 * d);
                step(layer.kp_mut(), &g["l.kp"]);
                step(layer.kd_mut(), &g["l.kd"]);
                if let Some(db) = layer.db_mut() {
                    step(db, &g["l.db"]);
                }
            }
            let delta = layer.compose();
            want_k.iter_mut().zip(delta.weights().data()).for_each(|(a, &d)| *a += d as f64);
            want_b.iter_mut().zip(delta.bias().unwrap().data()).for_each(|(a, &d)| *a += d as f64);
            layer.merge();
            layer.reinit(100 + epoch);
        }
        let wk = Tensor::new(vec![3, 3, 4, 6], want_k.iter().map(|&v| v as f32).collect()).map_err(e)?;
        let wb = Tensor::new(vec![6], want_b.iter().map(|&v| v as f32).collect()).map_err(e)?;
        worst = worst.max(relative_error(layer.base().weights(), &wk).map_err(e)?);
        worst = worst.max(relative_error(layer.base().bias().unwrap(), &wb).map_err(e)?);
        if layer.merge_count() != 5 {
            return Ok((false, format!("{order}: {} merges recorded", layer.merge_count())));
        }
    }
    Ok((worst <= 1e-5, format!("5 cycles per order, max relative deviation {worst:.2e} (limit 1e-5)")))
}

type Build = Box<dyn Fn(&mut GradTape, &[Var]) -> colora::Result<Var>>;

fn gradient_correctness() -> Outcome {
    let e = |e: colora::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = |s: &[usize], rng: &mut ChaCha8Rng| random(s, rng);
    let away = |s: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::from_fn(s, |_| {
            let v = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
    };
    let mut pool_vals: Vec<f32> = (0..48).map(|i| i as f32 * 0.05 - 1.2).collect();
    for i in (1..48).rev() {
        pool_vals.swap(i, rng.gen_range(0..=i));
    }
    let pool_in = Tensor::new(vec![1, 4, 4, 3], pool_vals).map_err(e)?;
    let same = ConvGeometry::default();
    let valid = ConvGeometry { padding: Padding::Valid, stride: 1 };
    let strided = ConvGeometry { padding: Padding::Same, stride: 2 };
    let labels = [0usize, 2, 1, 2];
    let mut cases: Vec<(&str, Vec<Tensor>, Build, f32)> = vec![
        ("conv2d", vec![r(&[4, 4, 3], &mut rng), r(&[3, 3, 3, 2], &mut rng), r(&[2], &mut rng)], Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), same)), 0.1),
        ("conv2d valid", vec![r(&[4, 4, 3], &mut rng), r(&[3, 3, 3, 2], &mut rng)], Box::new(move |t, v| t.conv2d(v[0], v[1], None, valid)), 0.1),
        ("conv2d stride 2", vec![r(&[4, 4, 3], &mut rng), r(&[3, 3, 3, 2], &mut rng)], Box::new(move |t, v| t.conv2d(v[0], v[1], None, strided)), 0.1),
        ("depthwise", vec![r(&[4, 4, 3], &mut rng), r(&[3, 3, 3], &mut rng)], Box::new(move |t, v| t.depthwise_conv2d(v[0], v[1], same)), 0.1),
        ("pointwise", vec![r(&[4, 4, 3], &mut rng), r(&[3, 2], &mut rng)], Box::new(|t, v| t.pointwise_conv2d(v[0], v[1])), 0.1),
        ("add", vec![r(&[4, 4, 3], &mut rng), r(&[4, 4, 3], &mut rng)], Box::new(|t, v| t.add(v[0], v[1])), 0.1),
        ("bias_add", vec![r(&[4, 4, 3], &mut rng), r(&[3], &mut rng)], Box::new(|t, v| t.bias_add(v[0], v[1])), 0.1),
        ("relu", vec![away(&[4, 4, 3], &mut rng)], Box::new(|t, v| t.relu(v[0])), 1e-3),
        ("max_pool2", vec![pool_in.clone()], Box::new(|t, v| t.max_pool2(v[0])), 1e-3),
        ("global_avg_pool", vec![pool_in.clone()], Box::new(|t, v| t.global_avg_pool(v[0])), 0.1),
        ("flatten", vec![pool_in.clone()], Box::new(|t, v| t.flatten(v[0])), 0.1),
        ("reshape", vec![pool_in], Box::new(|t, v| t.reshape(v[0], &[2, 24])), 0.1),
        ("linear", vec![r(&[3, 4], &mut rng), r(&[2, 4], &mut rng)], Box::new(|t, v| t.linear(v[0], v[1])), 0.1),
        ("scale_shift", vec![r(&[4, 4, 3], &mut rng), Tensor::scalar(1.3), Tensor::scalar(-0.2)], Box::new(|t, v| t.scale_shift(v[0], v[1], v[2])), 0.1),
        ("sum", vec![r(&[4, 4, 3], &mut rng)], Box::new(|t, v| t.sum(v[0])), 0.1),
        ("softmax_cross_entropy", vec![r(&[4, 3], &mut rng)], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)), 1e-3),
    ];
    let w = r(&[4, 4, 3], &mut rng);
    cases.push(("weighted_sum", vec![r(&[4, 4, 3], &mut rng)], Box::new(move |t, v| t.weighted_sum(v[0], w.clone())), 0.1));

    let mut worst: (f64, String) = (0.0, String::new());
    for (i, (name, inputs, build, eps)) in cases.iter().enumerate() {
        for err in op_gradient_errors(inputs, build, *eps, 50 + i as u64).map_err(e)? {
            if err >= worst.0 {
                worst = (err, name.to_string());
            }
        }
    }
    let n_ops = cases.len();

    for order in [Order::PwThenDw, Order::DwThenPw] {
        let g = build_tiny_vgg([4, 4, 3], &[3], HeadSpec::new(3, 3, 2), 30).map_err(e)?;
        let targets = Targets::Named(vec!["block1.conv1".into(), "block1.conv2".into()]);
        let mut g = inject_colora(&g, &targets, order, InjectPolicy::FreezeBackbone, 31).map_err(e)?;
        let mut prng = ChaCha8Rng::seed_from_u64(32);
        for (_, p) in g.params_mut() {
            *p = random(p.shape(), &mut prng);
        }
        let x = random(&[3, 4, 4, 3], &mut prng);
        for (name, err) in model_gradient_errors(&g, &x, &[0, 1, 1], 1e-3).map_err(e)? {
            if err >= worst.0 {
                worst = (err, format!("{order} model {name}"));
            }
        }
    }
    Ok((
        worst.0 <= 1e-3,
        format!("{n_ops} ops + 2-layer CoLoRA model (both orders), max relative error {:.2e} at {} (limit 1e-3)", worst.0, worst.1),
    ))
}

fn parameter_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let (c, t) = (rng.gen_range(1..=128), rng.gen_range(1..=128));
        for order in [Order::PwThenDw, Order::DwThenPw] {
            let layer = CoLoRALayer::with_bias_delta(ConvKernel::zeros(h, w, c, t, false), order, ConvGeometry::default(), 0, false);
            let want = match order {
                Order::PwThenDw => h * w * t + c * t,
                Order::DwThenPw => h * w * c + c * t,
            };
            if layer.trainable_count() != want || colora_count(h, w, c, t, order) != want || conv_original(h, w, c, t) != h * w * c * t {
                return Ok((false, format!("mismatch at h={h} w={w} C={c} T={t} {order}")));
            }
        }
    }
    let (n, d) = (colora_count(3, 3, 64, 64, Order::PwThenDw), conv_original(3, 3, 64, 64));
    let ratio = n as f64 / d as f64;
    let ok = n == 4_672 && d == 36_864 && format!("{:.1}", 100.0 * ratio) == "12.7";
    Ok((ok, format!("20 random configs x 2 orders exact; 3x3, 64->64: {n}/{d} = {:.1}%", 100.0 * ratio)))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=64);
        let levels = rng.gen_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            pos[a] = true;
            pos[b] = false;
        } else {
            pos[0] = true;
            pos[1] = false;
        }
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let auc = roc_binary(&scores, &pos).map_err(|e| e.to_string())?.auc;
        worst = worst.max((auc - wins / pairs).abs());
    }
    let f1 = format!("{:.3}", f1_score(0.927, 0.972));
    Ok((
        worst <= 1e-12 && f1 == "0.949",
        format!("1000 score sets, max |AUC - pairwise| {worst:.1e} (limit 1e-12); F1(0.927, 0.972) = {f1}"),
    ))
}

fn transfer_experiment() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = TransferOptions::default();
    let r = cmd_transfer(&opts, &dir.path().join("transfer")).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (head, full, colora) = (r.arm(Arm::HeadOnly), r.arm(Arm::FullFineTune), r.arm(Arm::CoLoRA));
    let fraction = colora.trainable as f64 / full.trainable as f64;
    let acc_ok = colora.final_test_acc >= head.final_test_acc;
    let frac_ok = fraction < 0.25;
    let time_ok = colora.median_epoch_seconds < full.median_epoch_seconds;
    Ok((
        acc_ok && frac_ok && time_ok && secs <= 600.0,
        format!(
            "test acc CoLoRA {:.3} vs head-only {:.3} (full {:.3}); trainable {:.1}% of full; median epoch {:.3}s vs full {:.3}s; total {secs:.0}s",
            colora.final_test_acc,
            head.final_test_acc,
            full.final_test_acc,
            100.0 * fraction,
            colora.median_epoch_seconds,
            full.median_epoch_seconds
        ),
    ))
}

fn distillation() -> Outcome {
    let e = |e: colora::Error| e.to_string();
    let split = noise_split(7_754, 4, [4, 4, 1], "s", 8).map_err(e)?;
    let g = build_tiny_vgg([4, 4, 1], &[2], HeadSpec::new(3, 4, 4), 9).map_err(e)?;
    let (kept, report) = distill(&split, &g, 4, 10, Keep::Count(7_040)).map_err(e)?;
    // Entropies recomputed independently of the report.
    let entropy = predictive_entropy(&g.predict_proba(split.images()).map_err(e)?).map_err(e)?;
    let index: std::collections::HashMap<&str, f64> =
        split.ids().iter().map(String::as_str).zip(entropy.iter().copied()).collect();
    let mut ordered = true;
    for c in &report.per_class {
        let lo_discarded = c.discarded.iter().map(|id| index[id.as_str()]).fold(f64::INFINITY, f64::min);
        let hi_retained = c.retained.iter().map(|id| index[id.as_str()]).fold(f64::NEG_INFINITY, f64::max);
        ordered &= hi_retained <= lo_discarded && c.retained.len() == 7_040 && c.discarded.len() == 10;
    }
    let total = kept.len();
    Ok((
        total == 28_160 && report.retained_total() == 28_160 && ordered,
        format!("4 x 7754 samples, discard 10, keep 7040: retained {total}; entropy ordering per class {}", if ordered { "holds" } else { "violated" }),
    ))
}

fn determinism() -> Outcome {
    let err = |e: colora_cli::CliError| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    cmd_synth(SynthTask::StripesSource, [20, 5, 5], 12, 3, &data).map_err(err)?;
    let run = |name: &str| {
        let o: Vec<String> = vec![
            format!("data.dir={}", data.display()),
            format!("out.dir={}", dir.path().join(name).display()),
            "train.epochs=3".into(),
            "train.batch_size=8".into(),
            "arch.widths=6,8".into(),
            "runs=2".into(),
            "parallel=false".into(),
            "seed=11".into(),
        ];
        cmd_train(None, &o)
    };
    run("a").map_err(err)?;
    run("b").map_err(err)?;
    let mut same = true;
    for f in ["run0/history.csv", "run1/history.csv", "aggregate.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("b").join(f)).map_err(|e| e.to_string())?;
        same &= a == b;
    }
    Ok((same, format!("two executions, 2 runs x 3 epochs: history CSVs {}", if same { "byte-identical" } else { "differ" })))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("merge equivalence", merge_equivalence_suite),
        ("zero-init transparency", zero_init_transparency),
        ("cumulative merge", cumulative_merge),
        ("gradient correctness", gradient_correctness),
        ("parameter accounting", parameter_accounting),
        ("metrics oracle", metrics_oracle),
        ("transfer experiment", transfer_experiment),
        ("distillation", distillation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let (ok, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += !ok as usize;
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
