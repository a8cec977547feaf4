//! Adam, the epoch loop with periodic CoLoRA merges, run histories and the
//! multi-run and transfer protocols built on top.

mod adam;
mod history;
mod multirun;
mod transfer;

use std::time::Instant;

use rand::seq::SliceRandom;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use history::{EpochRecord, RunHistory};
pub use multirun::{aggregate, multirun, Aggregate, MultiRun, Stats};
pub use transfer::{arm_graph, pretrain_transfer_protocol, Arm, ArmReport, TransferConfig, TransferReport};

use crate::data::{DatasetSplits, Split};
use crate::error::{Error, Result};
use crate::init;
use crate::model::ModelGraph;
use crate::tape::{self, GradTape};

/// How the freeze mask is set when training starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FreezePolicy {
    /// Use the graph's mask unchanged.
    #[default]
    AsIs,
    /// Freeze the backbone except adapter factors; train the head.
    Backbone,
    /// Train everything except the bases of adapted layers.
    None,
}

impl FreezePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "as_is" => Ok(FreezePolicy::AsIs),
            "backbone" => Ok(FreezePolicy::Backbone),
            "none" => Ok(FreezePolicy::None),
            o => Err(Error::invalid(format!("freeze policy must be as_is, backbone or none, got '{o}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezePolicy::AsIs => "as_is",
            FreezePolicy::Backbone => "backbone",
            FreezePolicy::None => "none",
        }
    }

    pub fn apply(self, g: &mut ModelGraph) {
        match self {
            FreezePolicy::AsIs => {}
            FreezePolicy::Backbone => g.freeze_backbone(),
            FreezePolicy::None => g.unfreeze_all(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Merge every CoLoRA layer after each epoch divisible by this; 0 never.
    pub merge_interval: usize,
    pub seed: u64,
    pub runs: usize,
    pub freeze: FreezePolicy,
    /// Run the runs of a multirun on separate threads.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            merge_interval: 1,
            seed: 0,
            runs: 1,
            freeze: FreezePolicy::AsIs,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.merge_interval > self.epochs {
            return Err(Error::invalid(format!(
                "merge interval {} exceeds epochs {}",
                self.merge_interval, self.epochs
            )));
        }
        if self.runs == 0 {
            return Err(Error::invalid("runs must be at least 1"));
        }
        self.adam.validate()
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: RunHistory,
    pub model: ModelGraph,
    /// Snapshot taken at the best test epoch.
    pub best_test_model: ModelGraph,
}

/// Mean cross-entropy and accuracy of `g` on a split.
pub fn evaluate_split(g: &ModelGraph, split: &Split) -> Result<(f64, f64)> {
    let rows: Vec<usize> = (0..split.len()).collect();
    let (mut loss, mut correct) = (0f64, 0usize);
    for chunk in rows.chunks(256) {
        let (x, y) = split.batch(chunk)?;
        let logits = g.forward(&x)?;
        let k = logits.shape()[1];
        let probs = tape::softmax_rows(logits.data(), k);
        for (row, &label) in probs.chunks_exact(k).zip(&y) {
            loss -= (row[label] as f64).max(f64::MIN_POSITIVE).ln();
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            correct += (pred == label) as usize;
        }
    }
    let n = split.len() as f64;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss is {loss}")));
    }
    Ok((loss, correct as f64 / n))
}

fn check_compatible(g: &ModelGraph, data: &DatasetSplits) -> Result<()> {
    if g.num_classes() != data.num_classes {
        return Err(Error::invalid(format!(
            "model has {} outputs, dataset {} classes",
            g.num_classes(),
            data.num_classes
        )));
    }
    if g.input_shape() != data.image_shape() {
        return Err(Error::invalid(format!(
            "model input {:?} differs from images {:?}",
            g.input_shape(),
            data.image_shape()
        )));
    }
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Dataset("empty split".into()));
    }
    Ok(())
}

/// One gradient step on a mini-batch. Returns the batch loss.
pub fn train_step(g: &mut ModelGraph, opt: &mut Adam, split: &Split, rows: &[usize]) -> Result<f64> {
    let (x, y) = split.batch(rows)?;
    let mut tape = GradTape::new();
    let xv = tape.constant(x);
    let logits = g.forward_tape(&mut tape, xv)?;
    let loss = tape.softmax_cross_entropy(logits, &y)?;
    let value = tape.value(loss)?.item()? as f64;
    let grads = tape.backward(loss)?;
    opt.step(g, &grads)?;
    Ok(value)
}

/// Epoch-at-a-time training state. [`train`] drives one to completion;
/// protocols comparing several models can interleave their epochs so that
/// host load drifts affect every model alike.
pub struct Trainer {
    g: ModelGraph,
    cfg: TrainConfig,
    opt: Adam,
    rng: rand_chacha::ChaCha8Rng,
    order: Vec<usize>,
    history: RunHistory,
    best: Option<(f64, f64)>,
    best_test_model: ModelGraph,
}

impl Trainer {
    pub fn new(mut g: ModelGraph, data: &DatasetSplits, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&g, data)?;
        cfg.freeze.apply(&mut g);
        Ok(Trainer {
            best_test_model: g.clone(),
            g,
            cfg: cfg.clone(),
            opt: Adam::new(cfg.adam),
            rng: init::rng(init::derive_seed(cfg.seed, 0, "shuffle")),
            order: (0..data.train.len()).collect(),
            history: RunHistory::default(),
            best: None,
        })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.g
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.history.len() >= self.cfg.epochs
    }

    /// Runs the next epoch: shuffled updates, the scheduled merge, then
    /// evaluation of all splits. Seconds cover the updates and the merge.
    pub fn run_epoch(&mut self, data: &DatasetSplits) -> Result<&EpochRecord> {
        if self.is_done() {
            return Err(Error::invalid(format!("all {} epochs already ran", self.cfg.epochs)));
        }
        let epoch = self.history.len() + 1;
        let start = Instant::now();
        self.order.shuffle(&mut self.rng);
        for rows in self.order.chunks(self.cfg.batch_size) {
            train_step(&mut self.g, &mut self.opt, &data.train, rows).map_err(|e| annotate(e, epoch))?;
        }
        if self.cfg.merge_interval > 0 && epoch.is_multiple_of(self.cfg.merge_interval) {
            let stale = self.g.merge_and_reinit(self.cfg.seed, epoch as u64);
            self.opt.reset(&stale);
        }
        let seconds = start.elapsed().as_secs_f64();

        let (train_loss, train_acc) = evaluate_split(&self.g, &data.train)?;
        let (val_loss, val_acc) = evaluate_split(&self.g, &data.val)?;
        let (test_loss, test_acc) = evaluate_split(&self.g, &data.test)?;
        if self.best.is_none_or(|(acc, loss)| test_acc > acc || (test_acc == acc && test_loss < loss)) {
            self.best = Some((test_acc, test_loss));
            self.best_test_model = self.g.clone();
        }
        self.history.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            test_loss,
            test_acc,
            seconds,
        });
        Ok(&self.history.records()[epoch - 1])
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            history: self.history,
            model: self.g,
            best_test_model: self.best_test_model,
        }
    }
}

/// Trains `g` with shuffled mini-batches and Adam. When `merge_interval`
/// divides the epoch, every CoLoRA layer is merged and re-initialized and
/// the optimizer state of its factors reset. Splits are evaluated after the
/// merge. Epoch seconds cover the updates and the merge, not evaluation.
pub fn train(g: ModelGraph, data: &DatasetSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(g, data, cfg)?;
    while !t.is_done() {
        t.run_epoch(data)?;
    }
    Ok(t.finish())
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Order;
    use crate::data::synth;
    use crate::model::{build_tiny_vgg, inject_colora, HeadSpec, InjectPolicy, Targets};

    fn data() -> DatasetSplits {
        synth::blob_splits(12, 4, 4, 8, 3).unwrap()
    }

    fn colora_model() -> ModelGraph {
        let g = build_tiny_vgg([8, 8, 1], &[4], HeadSpec::new(4, 4, 2), 1).unwrap();
        inject_colora(&g, &Targets::All, Order::PwThenDw, InjectPolicy::FreezeBackbone, 2).unwrap()
    }

    fn cfg(epochs: usize, merge: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            merge_interval: merge,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_losses_constant() {
        let mut c = cfg(3, 1);
        c.adam.lr = 0.0;
        let h = train(colora_model(), &data(), &c).unwrap().history;
        let first = &h.records()[0];
        for r in h.records() {
            assert_eq!(r.train_loss, first.train_loss);
            assert_eq!(r.test_acc, first.test_acc);
        }
    }

    #[test]
    fn frozen_bases_only_change_through_merges() {
        let g = colora_model();
        let out = train(g.clone(), &data(), &cfg(2, 0)).unwrap();
        for (name, t) in g.params() {
            if !g.is_trainable(&name) {
                assert!(t.bit_eq(out.model.param(&name).unwrap()), "{name}");
            }
        }
        let merged = train(g.clone(), &data(), &cfg(2, 1)).unwrap();
        assert!(!g.param("block1.conv1.weight").unwrap().bit_eq(merged.model.param("block1.conv1.weight").unwrap()));
        assert!(merged.model.colora_layers().all(|(_, l)| l.merge_count() == 2 && l.residual_is_zero()));
    }

    #[test]
    fn single_epoch_merge_matches_manual_merge() {
        let g = colora_model();
        let d = data();
        let auto = train(g.clone(), &d, &cfg(1, 1)).unwrap().model;
        let mut manual = train(g, &d, &cfg(1, 0)).unwrap().model;
        let x = d.test.images();
        let before = manual.forward(x).unwrap();
        for (_, l) in manual.colora_layers_mut() {
            l.merge();
            l.reinit(99);
        }
        let a = auto.forward(x).unwrap();
        let b = manual.forward(x).unwrap();
        assert!(crate::tensor::relative_error(&a, &b).unwrap() < 1e-5);
        assert!(crate::tensor::relative_error(&before, &b).unwrap() < 1e-5);
    }

    #[test]
    fn rejects_mismatched_data() {
        let g = build_tiny_vgg([8, 8, 1], &[4], HeadSpec::new(4, 4, 3), 1).unwrap();
        assert!(train(g, &data(), &cfg(1, 0)).is_err());
        let mut bad = cfg(1, 2);
        assert!(bad.validate().is_err());
        bad.merge_interval = 0;
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(colora_model(), &data(), &cfg(2, 1)).unwrap();
        let b = train(colora_model(), &data(), &cfg(2, 1)).unwrap();
        assert_eq!(a.history.to_csv(false), b.history.to_csv(false));
        assert_eq!(a.model, b.model);
    }
}
