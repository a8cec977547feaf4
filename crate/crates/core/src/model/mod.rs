//! Sequential CNN graphs with a backbone/head split, a freeze mask and a
//! named-parameter table.

mod build;
mod checkpoint;
mod params;

use std::collections::BTreeSet;

pub use build::{
    build_tiny_vgg, inject_cnn_adapters, inject_colora, replace_head, HeadSpec, InjectPolicy, Targets,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use params::{adapter_count, colora_count, conv_original, count_params, ParamReport, ParamRow};

use crate::adapters::{CnnAdapterLayer, CoLoRALayer, DenseLoraLayer};
use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::init;
use crate::tape::{self, GradTape, Var};
use crate::tensor::{ConvKernel, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        kernel: ConvKernel,
        geom: ConvGeometry,
    },
    CoLoRA {
        name: String,
        layer: CoLoRALayer,
    },
    CnnAdapter {
        name: String,
        layer: CnnAdapterLayer,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    /// `y = x·Wᵀ + b` with `W: (out, in)`.
    Dense {
        name: String,
        weight: Tensor,
        bias: Option<Tensor>,
    },
    DenseLora {
        name: String,
        layer: DenseLoraLayer,
    },
}

/// Activation shape for a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. }
            | Layer::CoLoRA { name, .. }
            | Layer::CnnAdapter { name, .. }
            | Layer::Dense { name, .. }
            | Layer::DenseLora { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::CoLoRA { .. } => "colora",
            Layer::CnnAdapter { .. } => "adapter",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::GlobalAvgPool => "gap",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::DenseLora { .. } => "dense_lora",
        }
    }

    /// Parameters with their names and whether the layer type itself pins
    /// them frozen (bases of adapted layers).
    pub fn params(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        match self {
            Layer::Conv { name, kernel, .. } => {
                out.push((format!("{name}.weight"), kernel.weights(), false));
                if let Some(b) = kernel.bias() {
                    out.push((format!("{name}.bias"), b, false));
                }
            }
            Layer::CoLoRA { name, layer } => {
                out.push((format!("{name}.weight"), layer.base().weights(), true));
                if let Some(b) = layer.base().bias() {
                    out.push((format!("{name}.bias"), b, true));
                }
                out.push((format!("{name}.colora.kp"), layer.kp().weights(), false));
                out.push((format!("{name}.colora.kd"), layer.kd().weights(), false));
                if let Some(db) = layer.db() {
                    out.push((format!("{name}.colora.db"), db, false));
                }
            }
            Layer::CnnAdapter { name, layer } => {
                out.push((format!("{name}.weight"), layer.base().weights(), true));
                if let Some(b) = layer.base().bias() {
                    out.push((format!("{name}.bias"), b, true));
                }
                out.push((format!("{name}.adapter.a"), layer.a().weights(), false));
                out.push((format!("{name}.adapter.scale"), layer.norm_scale(), false));
                out.push((format!("{name}.adapter.shift"), layer.norm_shift(), false));
            }
            Layer::Dense { name, weight, bias } => {
                out.push((format!("{name}.weight"), weight, false));
                if let Some(b) = bias {
                    out.push((format!("{name}.bias"), b, false));
                }
            }
            Layer::DenseLora { name, layer } => {
                out.push((format!("{name}.weight"), layer.w0(), true));
                if let Some(b) = layer.bias() {
                    out.push((format!("{name}.bias"), b, true));
                }
                out.push((format!("{name}.lora.a"), layer.a(), false));
                out.push((format!("{name}.lora.b"), layer.b(), false));
            }
            Layer::Relu | Layer::MaxPool2 | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            Layer::Conv { name, kernel, .. } => {
                let (w, b) = split_kernel(kernel);
                out.push((format!("{name}.weight"), w));
                if let Some(b) = b {
                    out.push((format!("{name}.bias"), b));
                }
            }
            Layer::CoLoRA { name, layer } => {
                // Split borrows: the base and the factors are disjoint fields.
                let kp = layer.kp_mut() as *mut Tensor;
                let kd = layer.kd_mut() as *mut Tensor;
                let db = layer.db_mut().map(|d| d as *mut Tensor);
                let (w, b) = split_kernel(layer.base_mut());
                out.push((format!("{name}.weight"), w));
                if let Some(b) = b {
                    out.push((format!("{name}.bias"), b));
                }
                // SAFETY: kp, kd and db point into distinct fields of `layer`,
                // none of which alias the base kernel borrowed above.
                unsafe {
                    out.push((format!("{name}.colora.kp"), &mut *kp));
                    out.push((format!("{name}.colora.kd"), &mut *kd));
                    if let Some(db) = db {
                        out.push((format!("{name}.colora.db"), &mut *db));
                    }
                }
            }
            Layer::CnnAdapter { name, layer } => {
                let a = layer.a_mut() as *mut Tensor;
                let s = layer.norm_scale_mut() as *mut Tensor;
                let sh = layer.norm_shift_mut() as *mut Tensor;
                let (w, b) = split_kernel(layer.base_mut());
                out.push((format!("{name}.weight"), w));
                if let Some(b) = b {
                    out.push((format!("{name}.bias"), b));
                }
                // SAFETY: distinct fields of `layer`, disjoint from the base.
                unsafe {
                    out.push((format!("{name}.adapter.a"), &mut *a));
                    out.push((format!("{name}.adapter.scale"), &mut *s));
                    out.push((format!("{name}.adapter.shift"), &mut *sh));
                }
            }
            Layer::Dense { name, weight, bias } => {
                out.push((format!("{name}.weight"), weight));
                if let Some(b) = bias {
                    out.push((format!("{name}.bias"), b));
                }
            }
            Layer::DenseLora { name, layer } => {
                let a = layer.a_mut() as *mut Tensor;
                let bm = layer.b_mut() as *mut Tensor;
                let bias = layer.bias_mut().map(|b| b as *mut Tensor);
                out.push((format!("{name}.weight"), layer.w0_mut()));
                // SAFETY: distinct fields of `layer`.
                unsafe {
                    if let Some(b) = bias {
                        out.push((format!("{name}.bias"), &mut *b));
                    }
                    out.push((format!("{name}.lora.a"), &mut *a));
                    out.push((format!("{name}.lora.b"), &mut *bm));
                }
            }
            Layer::Relu | Layer::MaxPool2 | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
        out
    }

    fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        let spatial = |geom: ConvGeometry, k: &ConvKernel, h: usize, w: usize, c: usize| {
            if c != k.in_channels() {
                return Err(Error::Graph(format!(
                    "layer {:?} expects {} channels, receives {c}",
                    self.name().unwrap_or(""),
                    k.in_channels()
                )));
            }
            let shape = [1, h, w, c];
            let win = conv::Window::resolve(&shape, k.h(), k.w(), c, geom)?;
            Ok((win.oh, win.ow))
        };
        match (self, input) {
            (Layer::Conv { kernel, geom, .. }, ActShape::Spatial { h, w, c }) => {
                let (oh, ow) = spatial(*geom, kernel, h, w, c)?;
                Ok(ActShape::Spatial { h: oh, w: ow, c: kernel.out_channels() })
            }
            (Layer::CoLoRA { layer, .. }, ActShape::Spatial { h, w, c }) => {
                let (oh, ow) = spatial(layer.geometry(), layer.base(), h, w, c)?;
                Ok(ActShape::Spatial { h: oh, w: ow, c: layer.base().out_channels() })
            }
            (Layer::CnnAdapter { layer, .. }, ActShape::Spatial { h, w, c }) => {
                let (oh, ow) = spatial(layer.geometry(), layer.base(), h, w, c)?;
                Ok(ActShape::Spatial { h: oh, w: ow, c: layer.out_channels() })
            }
            (Layer::Relu, s) => Ok(s),
            (Layer::MaxPool2, ActShape::Spatial { h, w, c }) => {
                if h < 2 || w < 2 {
                    return Err(Error::Graph(format!(
                        "max-pool would exhaust spatial dims ({h}x{w})"
                    )));
                }
                Ok(ActShape::Spatial { h: h / 2, w: w / 2, c })
            }
            (Layer::GlobalAvgPool, ActShape::Spatial { c, .. }) => Ok(ActShape::Flat(c)),
            (Layer::Flatten, ActShape::Spatial { h, w, c }) => Ok(ActShape::Flat(h * w * c)),
            (Layer::Flatten, s @ ActShape::Flat(_)) => Ok(s),
            (Layer::Dense { weight, .. }, ActShape::Flat(d)) => {
                if weight.shape()[1] != d {
                    return Err(Error::Graph(format!(
                        "dense layer {:?} expects {} features, receives {d}",
                        self.name().unwrap_or(""),
                        weight.shape()[1]
                    )));
                }
                Ok(ActShape::Flat(weight.shape()[0]))
            }
            (Layer::DenseLora { layer, .. }, ActShape::Flat(d)) => {
                if layer.in_features() != d {
                    return Err(Error::Graph(format!(
                        "dense layer {:?} expects {} features, receives {d}",
                        self.name().unwrap_or(""),
                        layer.in_features()
                    )));
                }
                Ok(ActShape::Flat(layer.out_features()))
            }
            (layer, s) => Err(Error::Graph(format!(
                "layer {} cannot take input of shape {s:?}",
                layer.kind()
            ))),
        }
    }

    fn forward(&self, x: Tensor) -> Result<Tensor> {
        Ok(match self {
            Layer::Conv { kernel, geom, .. } => conv::conv2d_with(&x, kernel, *geom)?,
            Layer::CoLoRA { layer, .. } => layer.forward(&x)?,
            Layer::CnnAdapter { layer, .. } => layer.forward(&x)?,
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::MaxPool2 => tape::max_pool2_forward(&x)?.0,
            Layer::GlobalAvgPool => tape::global_avg_pool_forward(&x)?,
            Layer::Flatten => {
                let n = x.shape()[0];
                let rest = x.len() / n;
                x.reshape(&[n, rest])?
            }
            Layer::Dense { weight, bias, .. } => {
                let mut y = tape::linear_forward(&x, weight)?;
                if let Some(b) = bias {
                    let k = b.len();
                    for row in y.data_mut().chunks_exact_mut(k) {
                        for (v, &bv) in row.iter_mut().zip(b.data()) {
                            *v += bv;
                        }
                    }
                }
                y
            }
            Layer::DenseLora { layer, .. } => layer.forward(&x)?,
        })
    }
}

fn split_kernel(k: &mut ConvKernel) -> (&mut Tensor, Option<&mut Tensor>) {
    let b = k.bias_mut().map(|b| b as *mut Tensor);
    let w = k.weights_mut();
    // SAFETY: weights and bias are distinct fields of the kernel.
    (w, b.map(|b| unsafe { &mut *b }))
}

/// Ordered layers with a backbone/head split and a freeze mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input: [usize; 3],
    layers: Vec<Layer>,
    head_start: usize,
    frozen: BTreeSet<String>,
}

impl ModelGraph {
    /// Assembles and validates a graph. Layers at `head_start..` form the head.
    pub fn new(input: [usize; 3], layers: Vec<Layer>, head_start: usize) -> Result<Self> {
        let mut g = ModelGraph {
            input,
            layers,
            head_start,
            frozen: BTreeSet::new(),
        };
        g.sync_structural_freeze();
        g.validate()?;
        Ok(g)
    }

    pub(crate) fn with_frozen(mut self, frozen: BTreeSet<String>) -> Result<Self> {
        self.frozen = frozen;
        self.sync_structural_freeze();
        self.validate()?;
        Ok(self)
    }

    fn sync_structural_freeze(&mut self) {
        let pinned: Vec<String> = self
            .layers
            .iter()
            .flat_map(|l| l.params())
            .filter(|(_, _, pinned)| *pinned)
            .map(|(n, _, _)| n)
            .collect();
        self.frozen.extend(pinned);
    }

    /// Checks shape compatibility, unique names and that the head is
    /// non-empty and ends in a flat output.
    pub fn validate(&self) -> Result<()> {
        if self.head_start > self.layers.len() {
            return Err(Error::Graph("head start beyond last layer".into()));
        }
        let mut names = BTreeSet::new();
        for layer in &self.layers {
            if let Some(n) = layer.name() {
                if !names.insert(n) {
                    return Err(Error::Graph(format!("duplicate layer name '{n}'")));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for (n, _, _) in self.layers.iter().flat_map(|l| l.params()) {
            if !seen.insert(n.clone()) {
                return Err(Error::Graph(format!("duplicate parameter name '{n}'")));
            }
        }
        if let Some(stale) = self.frozen.iter().find(|n| !seen.contains(*n)) {
            return Err(Error::Graph(format!("freeze mask names unknown parameter '{stale}'")));
        }
        match self.output_shape()? {
            ActShape::Flat(_) => Ok(()),
            s => Err(Error::Graph(format!("graph output must be flat, got {s:?}"))),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    pub fn is_head_layer(&self, index: usize) -> bool {
        index >= self.head_start
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        let [h, w, c] = self.input;
        self.layers
            .iter()
            .try_fold(ActShape::Spatial { h, w, c }, |s, l| l.output_shape(s))
    }

    pub fn num_classes(&self) -> usize {
        match self.output_shape() {
            Ok(ActShape::Flat(k)) => k,
            _ => 0,
        }
    }

    /// Activation shapes before each layer (and after the last).
    pub fn activation_shapes(&self) -> Result<Vec<ActShape>> {
        let [h, w, c] = self.input;
        let mut shapes = vec![ActShape::Spatial { h, w, c }];
        for l in &self.layers {
            let next = l.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == Some(name))
    }

    /// `(name, tensor)` for every parameter, in layer order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.param_names()
            .into_iter()
            .filter(|n| self.is_trainable(n))
            .collect()
    }

    fn is_pinned(&self, name: &str) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .any(|(n, _, pinned)| pinned && n == name)
    }

    /// Freezes or unfreezes one parameter. Bases of adapted layers stay frozen.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        if self.param(name).is_none() {
            return Err(Error::Graph(format!("unknown parameter '{name}'")));
        }
        if trainable {
            if self.is_pinned(name) {
                return Err(Error::Graph(format!(
                    "'{name}' is the frozen base of an adapted layer"
                )));
            }
            self.frozen.remove(name);
        } else {
            self.frozen.insert(name.to_string());
        }
        Ok(())
    }

    /// Parameter names owned by layers before the head.
    pub fn backbone_param_names(&self) -> Vec<String> {
        self.layers[..self.head_start]
            .iter()
            .flat_map(|l| l.params())
            .map(|(n, _, _)| n)
            .collect()
    }

    pub fn head_param_names(&self) -> Vec<String> {
        self.layers[self.head_start..]
            .iter()
            .flat_map(|l| l.params())
            .map(|(n, _, _)| n)
            .collect()
    }

    /// Freezes every backbone parameter that is not an adapter factor and
    /// unfreezes the head. Adapter factors (CoLoRA `Kp/Kd/Δb`, CNN-adapter
    /// `A` and scalars, LoRA `A/B`) stay trainable.
    pub fn freeze_backbone(&mut self) {
        let head: BTreeSet<String> = self.head_param_names().into_iter().collect();
        for i in 0..self.layers.len() {
            for (name, _, pinned) in self.layers[i].params() {
                let adapter_factor = !pinned && !matches!(self.layers[i], Layer::Conv { .. } | Layer::Dense { .. });
                if head.contains(&name) || adapter_factor {
                    if !pinned {
                        self.frozen.remove(&name);
                    }
                } else {
                    self.frozen.insert(name);
                }
            }
        }
    }

    /// Everything trainable except the pinned bases of adapted layers.
    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
        self.sync_structural_freeze();
    }

    /// Inference forward pass over `(N, H, W, C)` or a single `(H, W, C)`
    /// image. Returns `(N, K)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.batched_input(x)?;
        self.layers.iter().try_fold(x, |acc, l| l.forward(acc))
    }

    /// Row-wise softmax of the logits.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.forward(x)?;
        let k = logits.shape()[1];
        Ok(Tensor::from_parts(
            logits.shape().to_vec(),
            tape::softmax_rows(logits.data(), k),
        ))
    }

    fn batched_input(&self, x: &Tensor) -> Result<Tensor> {
        let [h, w, c] = self.input;
        match *x.shape() {
            [xh, xw, xc] if [xh, xw, xc] == self.input => x.reshape(&[1, h, w, c]),
            [_, xh, xw, xc] if [xh, xw, xc] == self.input => Ok(x.clone()),
            _ => Err(Error::shape(format!(
                "model expects (N, {h}, {w}, {c}) input, got {:?}",
                x.shape()
            ))),
        }
    }

    /// Records the forward pass on `tape`; trainable parameters become named
    /// params, everything else constants.
    pub fn forward_tape(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { name, kernel, geom } => {
                    let wn = format!("{name}.weight");
                    let k = tape.leaf(&wn, kernel.weights().clone(), self.is_trainable(&wn))?;
                    let b = match kernel.bias() {
                        Some(b) => {
                            let bn = format!("{name}.bias");
                            Some(tape.leaf(&bn, b.clone(), self.is_trainable(&bn))?)
                        }
                        None => None,
                    };
                    tape.conv2d(cur, k, b, *geom)?
                }
                Layer::CoLoRA { name, layer } => {
                    let prefix = format!("{name}.colora");
                    let trainable = self.is_trainable(&format!("{prefix}.kp"));
                    layer.record(tape, cur, &prefix, trainable)?
                }
                Layer::CnnAdapter { name, layer } => {
                    let prefix = format!("{name}.adapter");
                    let trainable = self.is_trainable(&format!("{prefix}.a"));
                    layer.record(tape, cur, &prefix, trainable)?
                }
                Layer::Relu => tape.relu(cur)?,
                Layer::MaxPool2 => tape.max_pool2(cur)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(cur)?,
                Layer::Flatten => tape.flatten(cur)?,
                Layer::Dense { name, weight, bias } => {
                    let wn = format!("{name}.weight");
                    let w = tape.leaf(&wn, weight.clone(), self.is_trainable(&wn))?;
                    let mut y = tape.linear(cur, w)?;
                    if let Some(b) = bias {
                        let bn = format!("{name}.bias");
                        let bv = tape.leaf(&bn, b.clone(), self.is_trainable(&bn))?;
                        y = tape.bias_add(y, bv)?;
                    }
                    y
                }
                Layer::DenseLora { name, layer } => {
                    let prefix = format!("{name}.lora");
                    let trainable = self.is_trainable(&format!("{prefix}.a"));
                    layer.record(tape, cur, &prefix, trainable)?
                }
            };
        }
        Ok(cur)
    }

    pub fn colora_layers(&self) -> impl Iterator<Item = (&str, &CoLoRALayer)> {
        self.layers.iter().filter_map(|l| match l {
            Layer::CoLoRA { name, layer } => Some((name.as_str(), layer)),
            _ => None,
        })
    }

    pub fn colora_layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut CoLoRALayer)> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::CoLoRA { name, layer } => Some((name.as_str(), layer)),
            _ => None,
        })
    }

    /// Merges every CoLoRA residual into its base, then re-initializes the
    /// factors with seeds derived from `(seed, epoch, layer name)`. Returns the
    /// names of the adapter parameters whose optimizer state is now stale.
    pub fn merge_and_reinit(&mut self, seed: u64, epoch: u64) -> Vec<String> {
        let mut reset = Vec::new();
        for (name, layer) in self.colora_layers_mut() {
            layer.merge();
            layer.reinit(init::derive_seed(seed, epoch, name));
            reset.push(format!("{name}.colora.kp"));
            reset.push(format!("{name}.colora.kd"));
            if layer.db().is_some() {
                reset.push(format!("{name}.colora.db"));
            }
        }
        reset
    }

    /// Replaces every CoLoRA layer by a plain convolution with the merged
    /// kernel. The result has the same parameter count as the original
    /// backbone.
    pub fn merged_copy(&self) -> Result<ModelGraph> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut frozen = BTreeSet::new();
        for l in &self.layers {
            match l {
                Layer::CoLoRA { name, layer } => {
                    let mut merged = layer.clone();
                    merged.merge();
                    layers.push(Layer::Conv {
                        name: name.clone(),
                        kernel: merged.base().clone(),
                        geom: merged.geometry(),
                    });
                }
                other => {
                    for (n, _, _) in other.params() {
                        if self.frozen.contains(&n) {
                            frozen.insert(n);
                        }
                    }
                    layers.push(other.clone());
                }
            }
        }
        ModelGraph::new(self.input, layers, self.head_start)?.with_frozen(frozen)
    }
}
