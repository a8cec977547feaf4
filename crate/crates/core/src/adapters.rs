//! CoLoRA residual layers and the two baselines they are compared against
//! (the 1×1 CNN adapter and dense LoRA).
//!
//! A CoLoRA layer keeps a frozen base kernel `K0` and learns a residual
//! `ΔK` factored into a pointwise kernel `Kp (C×T)` and a depthwise kernel
//! `Kd`. Because both factors are linear, `ΔK` can be materialized as a
//! dense `(h, w, C, T)` kernel and folded into `K0`, so the merged layer costs
//! exactly one convolution at inference.
//!
//! Two factor orders are supported:
//!
//! * [`Order::DwThenPw`]: depthwise over the `C` input channels, then
//!   pointwise `C → T`. `ΔK(l,m,k,t) = Kd(l,m,k)·Kp(k,t)`.
//! * [`Order::PwThenDw`]: pointwise `C → T`, then depthwise over the `T`
//!   output channels. `ΔK(l,m,k,t) = Kp(k,t)·Kd(l,m,t)`.

use std::fmt;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::init;
use crate::tape::{GradTape, Var};
use crate::tensor::{ConvKernel, DepthwiseKernel, PointwiseKernel, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Order {
    /// Depthwise over inputs, then pointwise.
    DwThenPw,
    /// Pointwise first, then depthwise over outputs (Inception-style).
    #[default]
    PwThenDw,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::DwThenPw => "dw_pw",
            Order::PwThenDw => "pw_dw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dw_pw" | "dw-then-pw" | "DwThenPw" => Ok(Order::DwThenPw),
            "pw_dw" | "pw-then-dw" | "PwThenDw" => Ok(Order::PwThenDw),
            other => Err(Error::invalid(format!(
                "unknown CoLoRA order '{other}' (expected dw_pw or pw_dw)"
            ))),
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Frozen convolution plus a mergeable depthwise × pointwise residual.
#[derive(Clone, Debug, PartialEq)]
pub struct CoLoRALayer {
    base: ConvKernel,
    kp: PointwiseKernel,
    kd: DepthwiseKernel,
    db: Option<Tensor>,
    order: Order,
    geom: ConvGeometry,
    merge_count: u64,
}

impl CoLoRALayer {
    /// Wraps `base`, with Glorot `Kp`, zero `Kd`, and a zero `Δb` when the
    /// base has a bias.
    pub fn new(base: ConvKernel, order: Order, geom: ConvGeometry, seed: u64) -> Self {
        let with_db = base.bias().is_some();
        Self::with_bias_delta(base, order, geom, seed, with_db)
    }

    pub fn with_bias_delta(
        base: ConvKernel,
        order: Order,
        geom: ConvGeometry,
        seed: u64,
        bias_delta: bool,
    ) -> Self {
        let (h, w, c, t) = (base.h(), base.w(), base.in_channels(), base.out_channels());
        let g = match order {
            Order::DwThenPw => c,
            Order::PwThenDw => t,
        };
        let mut layer = CoLoRALayer {
            base,
            kp: PointwiseKernel::zeros(c, t),
            kd: DepthwiseKernel::zeros(h, w, g),
            db: bias_delta.then(|| Tensor::zeros(&[t])),
            order,
            geom,
            merge_count: 0,
        };
        layer.reinit(seed);
        layer
    }

    /// Assembles a layer from explicit factors, checking every shape invariant.
    pub fn from_parts(
        base: ConvKernel,
        kp: PointwiseKernel,
        kd: DepthwiseKernel,
        db: Option<Tensor>,
        order: Order,
        geom: ConvGeometry,
        merge_count: u64,
    ) -> Result<Self> {
        let (h, w, c, t) = (base.h(), base.w(), base.in_channels(), base.out_channels());
        if kp.in_channels() != c || kp.out_channels() != t {
            return Err(Error::shape(format!(
                "Kp must map {c} -> {t}, got {:?}",
                kp.weights().shape()
            )));
        }
        let g = match order {
            Order::DwThenPw => c,
            Order::PwThenDw => t,
        };
        if kd.weights().shape() != [h, w, g] {
            return Err(Error::shape(format!(
                "Kd for order {order} must be ({h}, {w}, {g}), got {:?}",
                kd.weights().shape()
            )));
        }
        if let Some(db) = &db {
            if db.shape() != [t] {
                return Err(Error::shape(format!("Δb must be ({t}), got {:?}", db.shape())));
            }
        }
        Ok(CoLoRALayer {
            base,
            kp,
            kd,
            db,
            order,
            geom,
            merge_count,
        })
    }

    pub fn base(&self) -> &ConvKernel {
        &self.base
    }

    pub fn kp(&self) -> &PointwiseKernel {
        &self.kp
    }

    pub fn kd(&self) -> &DepthwiseKernel {
        &self.kd
    }

    pub fn db(&self) -> Option<&Tensor> {
        self.db.as_ref()
    }

    pub fn kp_mut(&mut self) -> &mut Tensor {
        self.kp.weights_mut()
    }

    pub fn kd_mut(&mut self) -> &mut Tensor {
        self.kd.weights_mut()
    }

    pub fn db_mut(&mut self) -> Option<&mut Tensor> {
        self.db.as_mut()
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn merge_count(&self) -> u64 {
        self.merge_count
    }

    pub(crate) fn base_mut(&mut self) -> &mut ConvKernel {
        &mut self.base
    }

    /// True when the residual branch contributes nothing: `Kd = 0`, `Δb = 0`.
    pub fn residual_is_zero(&self) -> bool {
        self.kd.weights().is_all_zero() && self.db.as_ref().is_none_or(Tensor::is_all_zero)
    }

    /// `Kp`, `Kd` and `Δb` element counts.
    pub fn trainable_count(&self) -> usize {
        self.kp.weights().len() + self.kd.weights().len() + self.db.as_ref().map_or(0, Tensor::len)
    }

    /// Residual branch only, without any bias.
    pub fn residual_forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.order {
            Order::DwThenPw => {
                let z = conv::depthwise_conv2d_with(x, &self.kd, self.geom)?;
                conv::pointwise_conv2d(&z, &self.kp)
            }
            Order::PwThenDw => {
                let z = conv::pointwise_conv2d(x, &self.kp)?;
                conv::depthwise_conv2d_with(&z, &self.kd, self.geom)
            }
        }
    }

    /// `K0 ⊛ x + b0 + ΔK ⊛ x + Δb`, with the residual evaluated in factored
    /// form. A zero residual is skipped so the output bit-equals the base.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv::conv2d_with(x, &self.base, self.geom)?;
        if self.residual_is_zero() {
            return Ok(y);
        }
        let r = self.residual_forward(x)?;
        y.add_assign(&r)?;
        if let Some(db) = &self.db {
            let t = db.len();
            for row in y.data_mut().chunks_exact_mut(t) {
                for (v, &b) in row.iter_mut().zip(db.data()) {
                    *v += b;
                }
            }
        }
        Ok(y)
    }

    /// Materializes the residual as a dense kernel `ΔK` with bias `Δb`.
    pub fn compose(&self) -> ConvKernel {
        let (h, w, c, t) = (
            self.base.h(),
            self.base.w(),
            self.base.in_channels(),
            self.base.out_channels(),
        );
        let kp = self.kp.weights().data();
        let kd = self.kd.weights().data();
        let order = self.order;
        let dk = Tensor::from_fn(&[h, w, c, t], |idx| {
            let ti = idx % t;
            let ki = (idx / t) % c;
            let tap = idx / (c * t);
            match order {
                Order::DwThenPw => kd[tap * c + ki] * kp[ki * t + ti],
                Order::PwThenDw => kp[ki * t + ti] * kd[tap * t + ti],
            }
        });
        ConvKernel::new(dk, self.db.clone()).expect("composed kernel has base shape")
    }

    /// Folds the current residual into the base: `K0 += ΔK`, `b0 += Δb`.
    /// The factors are left as they are; call [`reinit`](Self::reinit) next.
    pub fn merge(&mut self) {
        let delta = self.compose();
        self.base
            .weights_mut()
            .add_assign(delta.weights())
            .expect("composed kernel has base shape");
        if let Some(db) = delta.bias() {
            match self.base.bias_mut() {
                Some(b) => b.add_assign(db).expect("bias shapes agree"),
                None => {
                    self.base = ConvKernel::new(self.base.weights().clone(), Some(db.clone()))
                        .expect("bias shapes agree")
                }
            }
        }
        self.merge_count += 1;
    }

    /// `Kp ← Glorot(fan_in = C, fan_out = T)`, `Kd ← 0`, `Δb ← 0`.
    pub fn reinit(&mut self, seed: u64) {
        let (c, t) = (self.kp.in_channels(), self.kp.out_channels());
        let mut rng = init::rng(seed);
        *self.kp.weights_mut() = init::glorot_uniform(&[c, t], c, t, &mut rng);
        self.kd.weights_mut().data_mut().fill(0.0);
        if let Some(db) = &mut self.db {
            db.data_mut().fill(0.0);
        }
    }

    /// Records the layer on a tape: base as constants, factors as params named
    /// `{prefix}.kp`, `{prefix}.kd`, `{prefix}.db`.
    pub fn record(&self, tape: &mut GradTape, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let k0 = tape.constant(self.base.weights().clone());
        let b0 = self.base.bias().map(|b| tape.constant(b.clone()));
        let base = tape.conv2d(x, k0, b0, self.geom)?;
        let kp = tape.leaf(&format!("{prefix}.kp"), self.kp.weights().clone(), trainable)?;
        let kd = tape.leaf(&format!("{prefix}.kd"), self.kd.weights().clone(), trainable)?;
        let residual = match self.order {
            Order::DwThenPw => {
                let z = tape.depthwise_conv2d(x, kd, self.geom)?;
                tape.pointwise_conv2d(z, kp)?
            }
            Order::PwThenDw => {
                let z = tape.pointwise_conv2d(x, kp)?;
                tape.depthwise_conv2d(z, kd, self.geom)?
            }
        };
        let mut y = tape.add(base, residual)?;
        if let Some(db) = &self.db {
            let dbv = tape.leaf(&format!("{prefix}.db"), db.clone(), trainable)?;
            y = tape.bias_add(y, dbv)?;
        }
        Ok(y)
    }
}

/// Frozen convolution followed by a per-layer affine, ReLU and a trainable
/// `1×1` mixing matrix `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnAdapterLayer {
    base: ConvKernel,
    a: PointwiseKernel,
    norm_scale: Tensor,
    norm_shift: Tensor,
    geom: ConvGeometry,
}

impl CnnAdapterLayer {
    /// Square adapter over the base outputs, initialized to the identity so
    /// the layer starts as `ReLU(K0 ⊛ x + b0)`.
    pub fn new(base: ConvKernel, geom: ConvGeometry) -> Self {
        let t = base.out_channels();
        CnnAdapterLayer {
            base,
            a: PointwiseKernel::identity(t),
            norm_scale: Tensor::scalar(1.0),
            norm_shift: Tensor::scalar(0.0),
            geom,
        }
    }

    pub fn from_parts(
        base: ConvKernel,
        a: PointwiseKernel,
        norm_scale: f32,
        norm_shift: f32,
        geom: ConvGeometry,
    ) -> Result<Self> {
        if a.in_channels() != base.out_channels() {
            return Err(Error::shape(format!(
                "adapter input channels {} != base output channels {}",
                a.in_channels(),
                base.out_channels()
            )));
        }
        Ok(CnnAdapterLayer {
            base,
            a,
            norm_scale: Tensor::new(vec![1], vec![norm_scale])?,
            norm_shift: Tensor::new(vec![1], vec![norm_shift])?,
            geom,
        })
    }

    pub fn base(&self) -> &ConvKernel {
        &self.base
    }

    pub fn a(&self) -> &PointwiseKernel {
        &self.a
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        self.a.weights_mut()
    }

    pub fn norm_scale(&self) -> &Tensor {
        &self.norm_scale
    }

    pub fn norm_shift(&self) -> &Tensor {
        &self.norm_shift
    }

    pub fn norm_scale_mut(&mut self) -> &mut Tensor {
        &mut self.norm_scale
    }

    pub fn norm_shift_mut(&mut self) -> &mut Tensor {
        &mut self.norm_shift
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub(crate) fn base_mut(&mut self) -> &mut ConvKernel {
        &mut self.base
    }

    pub fn out_channels(&self) -> usize {
        self.a.out_channels()
    }

    /// `A` plus the two normalization scalars.
    pub fn trainable_count(&self) -> usize {
        self.a.weights().len() + 2
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.norm_scale.data()[0];
        let b = self.norm_shift.data()[0];
        let z = conv::conv2d_with(x, &self.base, self.geom)?.map(|v| (s * v + b).max(0.0));
        conv::pointwise_conv2d(&z, &self.a)
    }

    pub fn record(&self, tape: &mut GradTape, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let k0 = tape.constant(self.base.weights().clone());
        let b0 = self.base.bias().map(|b| tape.constant(b.clone()));
        let y = tape.conv2d(x, k0, b0, self.geom)?;
        let s = tape.leaf(&format!("{prefix}.scale"), self.norm_scale.clone(), trainable)?;
        let b = tape.leaf(&format!("{prefix}.shift"), self.norm_shift.clone(), trainable)?;
        let y = tape.scale_shift(y, s, b)?;
        let y = tape.relu(y)?;
        let a = tape.leaf(&format!("{prefix}.a"), self.a.weights().clone(), trainable)?;
        tape.pointwise_conv2d(y, a)
    }
}

/// Dense layer `y = W0·x + B·(A·x)` with frozen `W0 (k×d)`, `A (r×d)` and
/// `B (k×r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLoraLayer {
    w0: Tensor,
    bias: Option<Tensor>,
    a: Tensor,
    b: Tensor,
}

impl DenseLoraLayer {
    /// Glorot `A`, zero `B`, so `ΔW = BA = 0` initially.
    pub fn new(w0: Tensor, bias: Option<Tensor>, rank: usize, seed: u64) -> Result<Self> {
        let &[k, d] = w0.shape() else {
            return Err(Error::shape(format!("W0 must be (k, d), got {:?}", w0.shape())));
        };
        if rank == 0 || rank > k.min(d) {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} must be in 1..={} for a {k}x{d} weight",
                k.min(d)
            )));
        }
        let mut rng = init::rng(seed);
        let a = init::glorot_uniform(&[rank, d], d, rank, &mut rng);
        Self::from_parts(w0, bias, a, Tensor::zeros(&[k, rank]))
    }

    pub fn from_parts(w0: Tensor, bias: Option<Tensor>, a: Tensor, b: Tensor) -> Result<Self> {
        let (&[k, d], &[r, ad], &[bk, br]) = (w0.shape(), a.shape(), b.shape()) else {
            return Err(Error::shape("W0, A, B must all be matrices"));
        };
        if ad != d || bk != k || br != r {
            return Err(Error::shape(format!(
                "incompatible LoRA factors: W0 {k}x{d}, A {r}x{ad}, B {bk}x{br}"
            )));
        }
        if r == 0 || r > k.min(d) {
            return Err(Error::invalid(format!("LoRA rank {r} exceeds min({k}, {d})")));
        }
        if let Some(bias) = &bias {
            if bias.shape() != [k] {
                return Err(Error::shape(format!("bias must be ({k}), got {:?}", bias.shape())));
            }
        }
        Ok(DenseLoraLayer { w0, bias, a, b })
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub(crate) fn w0_mut(&mut self) -> &mut Tensor {
        &mut self.w0
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `ΔW = B·A` as a `(k, d)` matrix.
    pub fn delta(&self) -> Tensor {
        let (k, d, r) = (self.out_features(), self.in_features(), self.rank());
        let (a, b) = (self.a.data(), self.b.data());
        Tensor::from_fn(&[k, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            (0..r).map(|q| b[i * r + q] as f64 * a[q * d + j] as f64).sum::<f64>() as f32
        })
    }

    /// Accepts a single vector `(d)` or a batch `(N, d)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, single) = match *x.shape() {
            [d] => (x.reshape(&[1, d])?, true),
            [_, _] => (x.clone(), false),
            _ => return Err(Error::shape(format!("dense input must be (d) or (N, d), got {:?}", x.shape()))),
        };
        let base = crate::tape::linear_forward(&batch, &self.w0)?;
        let low = crate::tape::linear_forward(&batch, &self.a)?;
        let mut y = base.add(&crate::tape::linear_forward(&low, &self.b)?)?;
        if let Some(bias) = &self.bias {
            let k = bias.len();
            for row in y.data_mut().chunks_exact_mut(k) {
                for (v, &b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
        }
        if single {
            y.reshape(&[self.out_features()])
        } else {
            Ok(y)
        }
    }

    /// `W0 += B·A`, then `B ← 0`.
    pub fn merge(&mut self) {
        let delta = self.delta();
        self.w0.add_assign(&delta).expect("ΔW has W0's shape");
        self.b.data_mut().fill(0.0);
    }

    pub fn record(&self, tape: &mut GradTape, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let w0 = tape.constant(self.w0.clone());
        let base = tape.linear(x, w0)?;
        let a = tape.leaf(&format!("{prefix}.a"), self.a.clone(), trainable)?;
        let b = tape.leaf(&format!("{prefix}.b"), self.b.clone(), trainable)?;
        let low = tape.linear(x, a)?;
        let up = tape.linear(low, b)?;
        let mut y = tape.add(base, up)?;
        if let Some(bias) = &self.bias {
            let bv = tape.constant(bias.clone());
            y = tape.bias_add(y, bv)?;
        }
        Ok(y)
    }
}
