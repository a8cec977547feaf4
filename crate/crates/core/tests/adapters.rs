use colora::model::{
    build_tiny_vgg, colora_count, conv_original, count_params, inject_colora, HeadSpec, InjectPolicy, Targets,
};
use colora::tensor::relative_error;
use colora::{
    CoLoRALayer, ConvGeometry, ConvKernel, DepthwiseKernel, GradTape, Order, Padding, PointwiseKernel, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_layer(h: usize, w: usize, c: usize, t: usize, order: Order, geom: ConvGeometry, rng: &mut ChaCha8Rng) -> CoLoRALayer {
    let g = match order {
        Order::PwThenDw => t,
        Order::DwThenPw => c,
    };
    CoLoRALayer::from_parts(
        ConvKernel::new(random(&[h, w, c, t], rng), Some(random(&[t], rng))).unwrap(),
        PointwiseKernel::new(random(&[c, t], rng)).unwrap(),
        DepthwiseKernel::new(random(&[h, w, g], rng)).unwrap(),
        Some(random(&[t], rng)),
        order,
        geom,
        0,
    )
    .unwrap()
}

#[test]
fn merged_layer_matches_factored_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let sizes = [1, 3, 5];
    let chans = [1, 2, 4, 8];
    let mut worst = 0f64;
    for i in 0..60 {
        let order = if i % 2 == 0 { Order::PwThenDw } else { Order::DwThenPw };
        let (h, w) = (*sizes.choose(&mut rng).unwrap(), *sizes.choose(&mut rng).unwrap());
        let (c, t) = (*chans.choose(&mut rng).unwrap(), *chans.choose(&mut rng).unwrap());
        let layer = random_layer(h, w, c, t, order, ConvGeometry::default(), &mut rng);
        let x = random(&[2, 6, 7, c], &mut rng);
        let factored = layer.forward(&x).unwrap();
        let mut merged = layer.clone();
        merged.merge();
        let direct = colora::conv::conv2d_with(&x, merged.base(), merged.geometry()).unwrap();
        worst = worst.max(relative_error(&factored, &direct).unwrap());
    }
    assert!(worst <= 1e-5, "worst relative deviation {worst:.3e}");
}

#[test]
fn merge_is_exact_for_valid_and_strided_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for (padding, stride) in [(Padding::Valid, 1), (Padding::Same, 2), (Padding::Valid, 2)] {
        for order in [Order::PwThenDw, Order::DwThenPw] {
            let geom = ConvGeometry { padding, stride };
            let layer = random_layer(3, 3, 4, 2, order, geom, &mut rng);
            let x = random(&[1, 9, 8, 4], &mut rng);
            let mut merged = layer.clone();
            merged.merge();
            let direct = colora::conv::conv2d_with(&x, merged.base(), geom).unwrap();
            assert!(relative_error(&layer.forward(&x).unwrap(), &direct).unwrap() <= 1e-5);
        }
    }
}

#[test]
fn fresh_injection_is_bit_identical() {
    let base = build_tiny_vgg([8, 8, 3], &[4, 8], HeadSpec::new(4, 6, 3), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for order in [Order::PwThenDw, Order::DwThenPw] {
        let inj = inject_colora(&base, &Targets::All, order, InjectPolicy::FreezeBackbone, 8).unwrap();
        for _ in 0..25 {
            let x = random(&[2, 8, 8, 3], &mut rng);
            assert!(base.forward(&x).unwrap().bit_eq(&inj.forward(&x).unwrap()));
        }
    }
}

/// One SGD step on `Σ w ⊙ layer(x)` with respect to the factors.
fn sgd_step(layer: &mut CoLoRALayer, x: &Tensor, w: &Tensor, lr: f32) {
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let y = layer.record(&mut tape, xv, "l", true).unwrap();
    let loss = tape.weighted_sum(y, w.clone()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let step = |p: &mut Tensor, g: &Tensor| {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    };
    step(layer.kp_mut(), &grads["l.kp"]);
    step(layer.kd_mut(), &grads["l.kd"]);
    if let Some(db) = layer.db_mut() {
        step(db, &grads["l.db"]);
    }
}

#[test]
fn repeated_merges_accumulate_composed_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for order in [Order::PwThenDw, Order::DwThenPw] {
        let base = ConvKernel::new(random(&[3, 3, 4, 5], &mut rng), Some(random(&[5], &mut rng))).unwrap();
        let mut layer = CoLoRALayer::new(base.clone(), order, ConvGeometry::default(), 1);
        let mut expected_k: Vec<f64> = base.weights().data().iter().map(|&v| v as f64).collect();
        let mut expected_b: Vec<f64> = base.bias().unwrap().data().iter().map(|&v| v as f64).collect();
        for epoch in 0..5u64 {
            let x = random(&[2, 6, 6, 4], &mut rng);
            let w = random(&[2, 6, 6, 5], &mut rng);
            for _ in 0..3 {
                sgd_step(&mut layer, &x, &w, 0.01);
            }
            let delta = layer.compose();
            for (e, &d) in expected_k.iter_mut().zip(delta.weights().data()) {
                *e += d as f64;
            }
            for (e, &d) in expected_b.iter_mut().zip(delta.bias().unwrap().data()) {
                *e += d as f64;
            }
            layer.merge();
            layer.reinit(10 + epoch);
        }
        assert_eq!(layer.merge_count(), 5);
        let want = Tensor::new(vec![3, 3, 4, 5], expected_k.iter().map(|&v| v as f32).collect()).unwrap();
        let want_b = Tensor::new(vec![5], expected_b.iter().map(|&v| v as f32).collect()).unwrap();
        assert!(relative_error(layer.base().weights(), &want).unwrap() <= 1e-5);
        assert!(relative_error(layer.base().bias().unwrap(), &want_b).unwrap() <= 1e-5);
        assert!(!layer.base().weights().bit_eq(base.weights()));
    }
}

#[test]
fn factor_counts_follow_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let (c, t) = (rng.gen_range(1..=96), rng.gen_range(1..=96));
        for order in [Order::PwThenDw, Order::DwThenPw] {
            let layer = CoLoRALayer::with_bias_delta(ConvKernel::zeros(h, w, c, t, false), order, ConvGeometry::default(), 0, false);
            let g = if order == Order::PwThenDw { t } else { c };
            assert_eq!(colora_count(h, w, c, t, order), h * w * g + c * t);
            assert_eq!(layer.trainable_count(), colora_count(h, w, c, t, order));
            assert_eq!(conv_original(h, w, c, t), layer.base().weights().len());
        }
    }
    assert_eq!(colora_count(3, 3, 64, 64, Order::PwThenDw), 4_672);
    assert_eq!(conv_original(3, 3, 64, 64), 36_864);
    let ratio = 4_672f64 / 36_864.0;
    assert!((ratio - 0.1267).abs() < 1e-4);
}

#[test]
fn model_report_counts_factors_and_bias_delta() {
    let g = build_tiny_vgg([8, 8, 2], &[4], HeadSpec::new(4, 4, 2), 0).unwrap();
    let inj = inject_colora(&g, &Targets::All, Order::PwThenDw, InjectPolicy::FreezeBackbone, 0).unwrap();
    let report = count_params(&inj);
    let row = report.row("block1.conv2").unwrap();
    assert_eq!(row.n_original, 3 * 3 * 4 * 4);
    assert_eq!(row.n_colora, Some(3 * 3 * 4 + 4 * 4 + 4));
    assert_eq!(row.trainable, row.n_colora.unwrap());
    assert_eq!(report.total, report.trainable + report.frozen);
    assert!(report.trainable_fraction() < 1.0);
}
