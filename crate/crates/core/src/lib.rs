//! Parameter-efficient fine-tuning for convolutional networks.
//!
//! A frozen convolution `K0` is augmented with a trainable residual built from
//! a pointwise kernel and a depthwise kernel. The residual composes into a
//! dense kernel of `K0`'s shape, so it can be merged back after training
//! (or after every epoch) without changing inference cost.
//!
//! Module map:
//!
//! * [`tensor`], [`conv`], [`tape`], [`gradcheck`]: dense tensors,
//!   convolution primitives, reverse-mode gradients and a finite-difference
//!   oracle.
//! * [`adapters`]: CoLoRA layers, composition and merge, plus the CNN-adapter
//!   and dense-LoRA baselines.
//! * [`model`]: small CNN graphs, adapter injection, parameter accounting and
//!   binary checkpoints.
//! * [`trainer`]: Adam, the merge-and-reinit training schedule, multi-run
//!   aggregation and the transfer-learning comparison.
//! * [`data`]: `.cot1` archives, class balancing and entropy-based distillation.
//! * [`metrics`]: confusion matrices, class-wise statistics and ROC/AUC.

pub mod adapters;
pub mod data;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use adapters::{CnnAdapterLayer, CoLoRALayer, DenseLoraLayer, Order};
pub use conv::{ConvGeometry, Padding};
pub use error::{Error, Result};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{ConvKernel, DepthwiseKernel, PointwiseKernel, Tensor};
