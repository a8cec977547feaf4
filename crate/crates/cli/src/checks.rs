//! Randomized merge-equivalence suite behind `colora merge-check`.

use std::time::Instant;

use colora::conv::conv2d_with;
use colora::init;
use colora::tensor::relative_error;
use colora::{CoLoRALayer, ConvGeometry, ConvKernel, DepthwiseKernel, Order, PointwiseKernel, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

pub const MERGE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct MergeCase {
    pub order: Order,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub t: usize,
    pub deviation: f64,
}

#[derive(Clone, Debug)]
pub struct MergeCheck {
    pub cases: Vec<MergeCase>,
    pub seconds: f64,
}

impl MergeCheck {
    pub fn worst(&self) -> Option<&MergeCase> {
        self.cases.iter().max_by(|a, b| a.deviation.total_cmp(&b.deviation))
    }

    pub fn max_deviation(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.deviation)
    }

    pub fn passed(&self) -> bool {
        self.max_deviation() <= MERGE_TOLERANCE
    }

    pub fn count(&self, order: Order) -> usize {
        self.cases.iter().filter(|c| c.order == order).count()
    }
}

/// `n` random layers with `h, w ∈ {1,3,5}` and `C, T ∈ {1,2,4,8}`, orders
/// alternating. Every factor and both biases are drawn from U(-1, 1) so the
/// residual is far from zero. Each case compares the factored forward
/// against a plain convolution with the merged kernel.
pub fn merge_equivalence(n: usize, seed: u64) -> colora::Result<MergeCheck> {
    let start = Instant::now();
    let mut rng = init::rng(seed);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let order = if i % 2 == 0 { Order::PwThenDw } else { Order::DwThenPw };
        let h = *[1, 3, 5].choose(&mut rng).unwrap();
        let w = *[1, 3, 5].choose(&mut rng).unwrap();
        let c = *[1, 2, 4, 8].choose(&mut rng).unwrap();
        let t = *[1, 2, 4, 8].choose(&mut rng).unwrap();
        let g = if order == Order::PwThenDw { t } else { c };
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let layer = CoLoRALayer::from_parts(
            ConvKernel::new(r(&[h, w, c, t]), Some(r(&[t])))?,
            PointwiseKernel::new(r(&[c, t]))?,
            DepthwiseKernel::new(r(&[h, w, g]))?,
            Some(r(&[t])),
            order,
            ConvGeometry::default(),
            0,
        )?;
        let x = r(&[2, 7, 6, c]);
        let factored = layer.forward(&x)?;
        let mut merged = layer;
        merged.merge();
        let direct = conv2d_with(&x, merged.base(), merged.geometry())?;
        let deviation = relative_error(&factored, &direct)?;
        cases.push(MergeCase { order, h, w, c, t, deviation });
    }
    Ok(MergeCheck {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}
