use std::fmt::Write as _;

use super::{train, FreezePolicy, RunHistory, TrainConfig, Trainer};
use crate::adapters::Order;
use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::init;
use crate::metrics::{self, EvalReport};
use crate::model::{
    build_tiny_vgg, count_params, inject_cnn_adapters, inject_colora, replace_head, HeadSpec, InjectPolicy,
    ModelGraph, Targets,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    HeadOnly,
    FullFineTune,
    CnnAdapter,
    CoLoRA,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::HeadOnly, Arm::FullFineTune, Arm::CnnAdapter, Arm::CoLoRA];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::HeadOnly => "head_only",
            Arm::FullFineTune => "full_finetune",
            Arm::CnnAdapter => "cnn_adapter",
            Arm::CoLoRA => "colora",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub widths: Vec<usize>,
    /// Reduce and hidden widths of the head; the class count comes from data.
    pub head_reduce: usize,
    pub head_hidden: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub order: Order,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ArmReport {
    pub arm: Arm,
    pub trainable: usize,
    pub total: usize,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub macro_auc: f64,
    pub mean_epoch_seconds: f64,
    pub median_epoch_seconds: f64,
    pub history: RunHistory,
    pub eval: EvalReport,
}

impl ArmReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

#[derive(Clone, Debug)]
pub struct TransferReport {
    pub source_test_acc: f64,
    pub arms: Vec<ArmReport>,
}

impl TransferReport {
    pub fn arm(&self, arm: Arm) -> &ArmReport {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is run")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "arm,trainable,total,trainable_fraction,final_test_acc,best_test_acc,macro_auc,mean_epoch_seconds,median_epoch_seconds\n",
        );
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                a.arm.as_str(),
                a.trainable,
                a.total,
                a.trainable_fraction(),
                a.final_test_acc,
                a.best_test_acc,
                a.macro_auc,
                a.mean_epoch_seconds,
                a.median_epoch_seconds
            );
        }
        s
    }
}

/// Prepares the target-task graph of one arm from the pretrained network.
pub fn arm_graph(pretrained: &ModelGraph, arm: Arm, head: HeadSpec, order: Order, seed: u64) -> Result<ModelGraph> {
    let mut g = replace_head(pretrained, head, init::derive_seed(seed, 1, "head"))?;
    g.unfreeze_all();
    match arm {
        Arm::HeadOnly => {
            g.freeze_backbone();
            Ok(g)
        }
        Arm::FullFineTune => Ok(g),
        Arm::CnnAdapter => inject_cnn_adapters(&g, &Targets::All, InjectPolicy::FreezeBackbone),
        Arm::CoLoRA => inject_colora(
            &g,
            &Targets::All,
            order,
            InjectPolicy::FreezeBackbone,
            init::derive_seed(seed, 2, "colora"),
        ),
    }
}

/// Pretrains a TinyVGG on `source`, then adapts it to `target` four ways:
/// head only, full fine-tuning, CNN adapters and CoLoRA. Each arm starts from
/// the same pretrained backbone and a head drawn from the same seed. Arms
/// advance one epoch at a time in turn.
pub fn pretrain_transfer_protocol(
    source: &DatasetSplits,
    target: &DatasetSplits,
    cfg: &TransferConfig,
) -> Result<TransferReport> {
    if source.image_shape() != target.image_shape() {
        return Err(Error::invalid(format!(
            "source images {:?} differ from target images {:?}",
            source.image_shape(),
            target.image_shape()
        )));
    }
    let head = |k| HeadSpec::new(cfg.head_reduce, cfg.head_hidden, k);
    let g = build_tiny_vgg(source.image_shape(), &cfg.widths, head(source.num_classes), cfg.seed)?;
    let pre_cfg = TrainConfig { freeze: FreezePolicy::None, ..cfg.pretrain.clone() };
    let pre = train(g, source, &pre_cfg)?;
    let source_test_acc = pre.history.records().last().map_or(0.0, |r| r.test_acc);

    let ft_cfg = TrainConfig { freeze: FreezePolicy::AsIs, ..cfg.finetune.clone() };
    let mut runs = Vec::with_capacity(Arm::ALL.len());
    for arm in Arm::ALL {
        let g = arm_graph(&pre.model, arm, head(target.num_classes), cfg.order, cfg.seed)?;
        let counts = count_params(&g);
        runs.push((arm, counts, Trainer::new(g, target, &ft_cfg)?));
    }
    // Round-robin over arms so slow drifts in host load are shared.
    for _ in 0..ft_cfg.epochs {
        for (_, _, t) in runs.iter_mut() {
            t.run_epoch(target)?;
        }
    }

    let mut arms = Vec::with_capacity(runs.len());
    for (arm, counts, t) in runs {
        let out = t.finish();
        let probs = out.model.predict_proba(target.test.images())?;
        let eval = metrics::evaluate(&probs, target.test.labels())?;
        let h = &out.history;
        arms.push(ArmReport {
            arm,
            trainable: counts.trainable,
            total: counts.total,
            final_test_acc: h.records().last().map_or(0.0, |r| r.test_acc),
            best_test_acc: h.best_test().map_or(0.0, |r| r.test_acc),
            macro_auc: eval.macro_auc,
            mean_epoch_seconds: h.mean_epoch_seconds(),
            median_epoch_seconds: h.median_epoch_seconds(),
            history: out.history,
            eval,
        });
    }
    Ok(TransferReport { source_test_acc, arms })
}
