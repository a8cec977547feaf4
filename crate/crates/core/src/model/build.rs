use std::collections::BTreeSet;

use super::{ActShape, Layer, ModelGraph};
use crate::adapters::{CnnAdapterLayer, CoLoRALayer, Order};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{ConvKernel, Tensor};

/// Classifier head: `1×1` conv reduce + ReLU, global average pool, a hidden
/// dense layer + ReLU and the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub reduce: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl HeadSpec {
    pub fn new(reduce: usize, hidden: usize, classes: usize) -> Self {
        HeadSpec { reduce, hidden, classes }
    }
}

/// Which convolutions receive adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Targets {
    /// Every plain convolution before the head.
    All,
    Named(Vec<String>),
}

/// What happens to the rest of the model when adapters are injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InjectPolicy {
    /// Backbone frozen apart from adapter factors, head trainable.
    #[default]
    FreezeBackbone,
    /// Existing trainability is left alone; only the adapted bases freeze.
    KeepTrainable,
}

fn glorot_conv(h: usize, w: usize, c: usize, t: usize, rng: &mut impl rand::Rng) -> ConvKernel {
    let weights = init::glorot_uniform(&[h, w, c, t], h * w * c, h * w * t, rng);
    ConvKernel::new(weights, Some(Tensor::zeros(&[t]))).expect("valid kernel shape")
}

fn dense(name: &str, d: usize, k: usize, rng: &mut impl rand::Rng) -> Layer {
    Layer::Dense {
        name: name.to_string(),
        weight: init::glorot_uniform(&[k, d], d, k, rng),
        bias: Some(Tensor::zeros(&[k])),
    }
}

fn head_layers(channels: usize, spec: HeadSpec, rng: &mut impl rand::Rng) -> Vec<Layer> {
    vec![
        Layer::Conv {
            name: "head.reduce".into(),
            kernel: glorot_conv(1, 1, channels, spec.reduce, rng),
            geom: ConvGeometry::default(),
        },
        Layer::Relu,
        Layer::GlobalAvgPool,
        dense("head.hidden", spec.reduce, spec.hidden, rng),
        Layer::Relu,
        dense("head.out", spec.hidden, spec.classes, rng),
    ]
}

/// Small VGG-style network: per block two same-padded `3×3` convolutions with
/// ReLU, max-pooling between blocks, then the head.
pub fn build_tiny_vgg(input: [usize; 3], widths: &[usize], head: HeadSpec, seed: u64) -> Result<ModelGraph> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::invalid("block widths must be non-empty and positive"));
    }
    if head.reduce == 0 || head.hidden == 0 || head.classes == 0 {
        return Err(Error::invalid("head sizes must be positive"));
    }
    let mut rng = init::rng(seed);
    let mut layers = Vec::new();
    let mut c = input[2];
    for (b, &width) in widths.iter().enumerate() {
        if b > 0 {
            layers.push(Layer::MaxPool2);
        }
        for i in 1..=2 {
            layers.push(Layer::Conv {
                name: format!("block{}.conv{i}", b + 1),
                kernel: glorot_conv(3, 3, c, width, &mut rng),
                geom: ConvGeometry::default(),
            });
            layers.push(Layer::Relu);
            c = width;
        }
    }
    let head_start = layers.len();
    layers.extend(head_layers(c, head, &mut rng));
    ModelGraph::new(input, layers, head_start)
}

/// Swaps the head for a freshly initialized one; the backbone and its freeze
/// state are kept.
pub fn replace_head(g: &ModelGraph, head: HeadSpec, seed: u64) -> Result<ModelGraph> {
    let shapes = g.activation_shapes()?;
    let c = match shapes[g.head_start()] {
        ActShape::Spatial { c, .. } => c,
        ActShape::Flat(_) => return Err(Error::Graph("backbone output is not spatial".into())),
    };
    let mut rng = init::rng(seed);
    let mut layers = g.layers()[..g.head_start()].to_vec();
    layers.extend(head_layers(c, head, &mut rng));
    let backbone: BTreeSet<String> = g.backbone_param_names().into_iter().collect();
    let frozen = g.frozen().intersection(&backbone).cloned().collect();
    ModelGraph::new(g.input_shape(), layers, g.head_start())?.with_frozen(frozen)
}

fn resolve_targets(g: &ModelGraph, targets: &Targets) -> Result<Vec<usize>> {
    match targets {
        Targets::All => {
            let idx: Vec<usize> = g.layers()[..g.head_start()]
                .iter()
                .enumerate()
                .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                return Err(Error::Graph("no plain backbone convolutions to adapt".into()));
            }
            Ok(idx)
        }
        Targets::Named(names) => {
            let mut idx = Vec::new();
            for n in names {
                let i = g
                    .layer_index(n)
                    .ok_or_else(|| Error::Graph(format!("unknown target layer '{n}'")))?;
                match &g.layers()[i] {
                    Layer::Conv { .. } => {}
                    Layer::CoLoRA { .. } | Layer::CnnAdapter { .. } => {
                        return Err(Error::Graph(format!("layer '{n}' is already adapted")))
                    }
                    other => {
                        return Err(Error::Graph(format!(
                            "target '{n}' is a {} layer, not a convolution",
                            other.kind()
                        )))
                    }
                }
                if !idx.contains(&i) {
                    idx.push(i);
                }
            }
            Ok(idx)
        }
    }
}

fn inject(
    g: &ModelGraph,
    targets: &Targets,
    policy: InjectPolicy,
    mut wrap: impl FnMut(&str, ConvKernel, ConvGeometry) -> Result<Layer>,
) -> Result<ModelGraph> {
    let idx = resolve_targets(g, targets)?;
    let mut layers = g.layers().to_vec();
    let mut frozen = g.frozen().clone();
    for i in idx {
        let Layer::Conv { name, kernel, geom } = layers[i].clone() else {
            unreachable!("targets resolve to plain convolutions")
        };
        frozen.remove(&format!("{name}.weight"));
        frozen.remove(&format!("{name}.bias"));
        layers[i] = wrap(&name, kernel, geom)?;
    }
    let mut out = ModelGraph::new(g.input_shape(), layers, g.head_start())?.with_frozen(frozen)?;
    if policy == InjectPolicy::FreezeBackbone {
        out.freeze_backbone();
    }
    Ok(out)
}

/// Wraps the targeted convolutions in CoLoRA layers. Each layer's factors are
/// seeded from `(seed, layer name)`, so the outputs are unchanged until the
/// first update.
pub fn inject_colora(
    g: &ModelGraph,
    targets: &Targets,
    order: Order,
    policy: InjectPolicy,
    seed: u64,
) -> Result<ModelGraph> {
    inject(g, targets, policy, |name, kernel, geom| {
        Ok(Layer::CoLoRA {
            name: name.to_string(),
            layer: CoLoRALayer::new(kernel, order, geom, init::derive_seed(seed, 0, name)),
        })
    })
}

/// Wraps the targeted convolutions in CNN adapters (identity `A`, unit scale,
/// zero shift).
pub fn inject_cnn_adapters(g: &ModelGraph, targets: &Targets, policy: InjectPolicy) -> Result<ModelGraph> {
    inject(g, targets, policy, |name, kernel, geom| {
        Ok(Layer::CnnAdapter {
            name: name.to_string(),
            layer: CnnAdapterLayer::new(kernel, geom),
        })
    })
}
