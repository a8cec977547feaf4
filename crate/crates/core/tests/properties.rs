use colora::conv::{conv2d, depthwise_conv2d, pointwise_conv2d};
use colora::data::{balance_by_first_n, distill_by_entropy, Balance, Keep, Split};
use colora::metrics::{classwise, confusion, f1_score, roc_binary};
use colora::tensor::relative_error;
use colora::{CoLoRALayer, ConvGeometry, ConvKernel, DepthwiseKernel, Order, Padding, PointwiseKernel, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-1.0f32..1.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn pairwise_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn split_from(labels: &[usize], ids: &[String], k: usize) -> Split {
    let n = labels.len();
    Split::new(Tensor::from_fn(&[n, 1, 1, 1], |i| i as f32), labels.to_vec(), ids.to_vec(), k).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_the_input(
        (x1, x2, k) in (1usize..4, 1usize..4).prop_flat_map(|(c, t)| (
            tensor(vec![5, 4, c]), tensor(vec![5, 4, c]), tensor(vec![3, 3, c, t]),
        )),
        a in -2.0f32..2.0,
        valid in any::<bool>(),
    ) {
        let pad = if valid { Padding::Valid } else { Padding::Same };
        let k = ConvKernel::new(k, None).unwrap();
        let mix = x1.scale(a).add(&x2).unwrap();
        let lhs = conv2d(&mix, &k, pad).unwrap();
        let rhs = conv2d(&x1, &k, pad).unwrap().scale(a).add(&conv2d(&x2, &k, pad).unwrap()).unwrap();
        prop_assert!(relative_error(&lhs, &rhs).unwrap() < 1e-5);
    }

    #[test]
    fn separable_chain_commutes_with_channelwise_kernel(
        (x, kp, kd) in (1usize..4, 1usize..4).prop_flat_map(|(c, t)| (
            tensor(vec![4, 5, c]), tensor(vec![c, t]), tensor(vec![3, 3, t]),
        )),
    ) {
        // Pointwise then depthwise equals the dense kernel kp[c,t]·kd[tap,t].
        let (c, t) = (kp.shape()[0], kp.shape()[1]);
        let dense = Tensor::from_fn(&[3, 3, c, t], |i| {
            let (ti, ci, tap) = (i % t, (i / t) % c, i / (c * t));
            kp.data()[ci * t + ti] * kd.data()[tap * t + ti]
        });
        let chain = depthwise_conv2d(
            &pointwise_conv2d(&x, &PointwiseKernel::new(kp).unwrap()).unwrap(),
            &DepthwiseKernel::new(kd).unwrap(),
            Padding::Same,
        ).unwrap();
        let direct = conv2d(&x, &ConvKernel::new(dense, None).unwrap(), Padding::Same).unwrap();
        prop_assert!(relative_error(&chain, &direct).unwrap() < 1e-5);
    }

    #[test]
    fn merge_preserves_the_function(
        h in prop::sample::select(vec![1usize, 3, 5]),
        w in prop::sample::select(vec![1usize, 3, 5]),
        c in prop::sample::select(vec![1usize, 2, 4, 8]),
        t in prop::sample::select(vec![1usize, 2, 4, 8]),
        dw_first in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let order = if dw_first { Order::DwThenPw } else { Order::PwThenDw };
        let g = if dw_first { c } else { t };
        let layer = CoLoRALayer::from_parts(
            ConvKernel::new(r(&[h, w, c, t]), Some(r(&[t]))).unwrap(),
            PointwiseKernel::new(r(&[c, t])).unwrap(),
            DepthwiseKernel::new(r(&[h, w, g])).unwrap(),
            Some(r(&[t])),
            order,
            ConvGeometry::default(),
            0,
        ).unwrap();
        let x = r(&[6, 6, c]);
        let mut merged = layer.clone();
        merged.merge();
        let direct = colora::conv::conv2d_with(&x, merged.base(), ConvGeometry::default()).unwrap();
        prop_assert!(relative_error(&layer.forward(&x).unwrap(), &direct).unwrap() <= 1e-5);
    }

    #[test]
    fn auc_equals_pairwise_oracle(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..64)
            .prop_filter("both classes present", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1)),
    ) {
        // Few distinct scores force plenty of ties.
        let scores: Vec<f64> = data.iter().map(|p| p.0 as f64 / 5.0).collect();
        let pos: Vec<bool> = data.iter().map(|p| p.1).collect();
        let roc = roc_binary(&scores, &pos).unwrap();
        prop_assert!((roc.auc - pairwise_auc(&scores, &pos)).abs() <= 1e-12);
        prop_assert_eq!(roc.points.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(roc.points.last().copied(), Some((1.0, 1.0)));
    }

    #[test]
    fn auc_ignores_monotone_rescaling(
        data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)
            .prop_filter("both classes present", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1)),
    ) {
        let scores: Vec<f64> = data.iter().map(|p| p.0).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| 3.0 * s.tanh() + 1.0).collect();
        let pos: Vec<bool> = data.iter().map(|p| p.1).collect();
        let a = roc_binary(&scores, &pos).unwrap().auc;
        let b = roc_binary(&squashed, &pos).unwrap().auc;
        let flipped: Vec<bool> = pos.iter().map(|p| !p).collect();
        let c = roc_binary(&scores, &flipped).unwrap().auc;
        prop_assert_eq!(a, b);
        prop_assert!((a + c - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn relabelling_classes_permutes_metrics(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&truth, &pred, 4).unwrap();
        let t2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let cm2 = confusion(&t2, &p2, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(cm.get(i, j), cm2.get(perm[i], perm[j]));
            }
        }
        let (a, b) = (classwise(&cm), classwise(&cm2));
        prop_assert_eq!(a.accuracy, b.accuracy);
        for i in 0..4 {
            let (x, y) = (a.per_class[i], b.per_class[perm[i]]);
            prop_assert!(x.recall.to_bits() == y.recall.to_bits());
            prop_assert!(x.specificity.to_bits() == y.specificity.to_bits());
        }
        prop_assert_eq!(cm.total(), pairs.len() as u64);
    }

    #[test]
    fn f1_lies_between_precision_and_recall(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1_score(p, r);
        prop_assert_eq!(f, f1_score(r, p));
        prop_assert!(f <= p.max(r) + 1e-15 && f >= 0.0);
        if p > 0.0 && r > 0.0 {
            prop_assert!(f >= p.min(r) - 1e-15);
        }
    }

    #[test]
    fn balancing_is_idempotent(
        labels in prop::collection::vec(0usize..3, 3..60)
            .prop_filter("every class present", |l| (0..3).all(|c| l.contains(&c))),
        salt in any::<u32>(),
    ) {
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("{:08x}-{i}", (i as u32).wrapping_mul(salt | 1))).collect();
        let s = split_from(&labels, &ids, 3);
        let once = balance_by_first_n(&s, Balance::Min, 3).unwrap();
        let twice = balance_by_first_n(&once, Balance::Min, 3).unwrap();
        prop_assert_eq!(once.ids(), twice.ids());
        let counts = once.class_counts(3);
        prop_assert!(counts.iter().all(|&c| c == counts[0]));
        prop_assert!(once.ids().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn distillation_keeps_the_low_entropy_band(
        entries in prop::collection::vec((0usize..2, 0u8..8), 12..60)
            .prop_filter("enough per class", |v| (0..2).all(|c| v.iter().filter(|e| e.0 == c).count() >= 5)),
        discard in 0usize..3,
        keep in 1usize..3,
    ) {
        let labels: Vec<usize> = entries.iter().map(|e| e.0).collect();
        let entropy: Vec<f64> = entries.iter().map(|e| e.1 as f64 / 4.0).collect();
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("s{i:03}")).collect();
        let s = split_from(&labels, &ids, 2);
        let (out, report) = distill_by_entropy(&s, &entropy, 2, discard, Keep::Count(keep)).unwrap();
        prop_assert_eq!(out.len(), 2 * keep);
        prop_assert_eq!(report.retained_total(), 2 * keep);
        let h = |id: &str| entropy[ids.iter().position(|x| x == id).unwrap()];
        for c in &report.per_class {
            prop_assert_eq!(c.discarded.len(), discard);
            let lo_discarded = c.discarded.iter().map(|i| h(i)).fold(f64::INFINITY, f64::min);
            let hi_retained = c.retained.iter().map(|i| h(i)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(hi_retained <= lo_discarded);
        }
        // The retained split keeps input order.
        let pos: Vec<usize> = out.ids().iter().map(|id| ids.iter().position(|x| x == id).unwrap()).collect();
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}
