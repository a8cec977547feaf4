use std::path::Path;

use colora::data::synth::{self, StripeTask};
use colora::data::{save_dataset, DatasetSplits};
use colora::trainer::{pretrain_transfer_protocol, AdamConfig, FreezePolicy, TrainConfig, TransferConfig, TransferReport};
use colora::Order;

use crate::error::{CliError, CliResult};
use crate::manifest::{Inputs, OutputDir};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    /// Bright or dark Gaussian blob, two classes.
    Blobs,
    /// Four stripe orientations.
    StripesSource,
    /// Offset orientations at two frequencies, four classes.
    StripesTarget,
}

impl SynthTask {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "blobs" => Ok(SynthTask::Blobs),
            "stripes-source" => Ok(SynthTask::StripesSource),
            "stripes-target" => Ok(SynthTask::StripesTarget),
            o => Err(CliError::input(format!(
                "unknown task '{o}' (expected blobs, stripes-source or stripes-target)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SynthTask::Blobs => "blobs",
            SynthTask::StripesSource => "stripes-source",
            SynthTask::StripesTarget => "stripes-target",
        }
    }

    /// Per-class sample counts for each split.
    pub fn generate(self, counts: [usize; 3], size: usize, seed: u64) -> colora::Result<DatasetSplits> {
        let [tr, va, te] = counts;
        match self {
            SynthTask::Blobs => synth::blob_splits(tr, va, te, size, seed),
            SynthTask::StripesSource => StripeTask::source(size).splits(tr, va, te, seed),
            SynthTask::StripesTarget => StripeTask::shifted_target(size).splits(tr, va, te, seed),
        }
    }
}

/// Writes a seeded synthetic dataset in the archive layout.
pub fn cmd_synth(task: SynthTask, counts: [usize; 3], size: usize, seed: u64, out_dir: &Path) -> CliResult<DatasetSplits> {
    if size < 4 || counts.contains(&0) {
        return Err(CliError::input("size must be at least 4 and every split non-empty"));
    }
    let data = task.generate(counts, size, seed)?;
    let mut out = OutputDir::create(out_dir)?;
    save_dataset(out.root(), &data)?;
    for split in ["train", "val", "test"] {
        for suffix in ["images.cot1", "labels.cot1", "manifest.txt"] {
            out.record(&format!("{split}_{suffix}"))?;
        }
    }
    let args = format!(
        "task = {}\nsize = {size}\ncounts = {},{},{}\n",
        task.as_str(),
        counts[0],
        counts[1],
        counts[2]
    );
    out.finish("synth", seed, &Inputs::default(), &args)?;
    Ok(data)
}

/// Settings of the source-to-target comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferOptions {
    pub size: usize,
    /// Per-class train/val/test counts.
    pub source_counts: [usize; 3],
    pub target_counts: [usize; 3],
    pub widths: Vec<usize>,
    pub head: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub merge_interval: usize,
    pub order: Order,
    pub seed: u64,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            size: 16,
            source_counts: [150, 25, 50],
            target_counts: [60, 25, 100],
            widths: vec![16, 32],
            head: 16,
            pretrain_epochs: 8,
            finetune_epochs: 8,
            lr: 3e-3,
            batch_size: 16,
            merge_interval: 1,
            order: Order::PwThenDw,
            seed: 0,
        }
    }
}

impl TransferOptions {
    pub fn config(&self) -> TransferConfig {
        let tc = |epochs, merge_interval| TrainConfig {
            epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            merge_interval,
            seed: self.seed,
            runs: 1,
            freeze: FreezePolicy::AsIs,
            parallel: false,
        };
        TransferConfig {
            widths: self.widths.clone(),
            head_reduce: self.head,
            head_hidden: self.head,
            pretrain: tc(self.pretrain_epochs, 0),
            finetune: tc(self.finetune_epochs, self.merge_interval),
            order: self.order,
            seed: self.seed,
        }
    }

    /// Source stripes, and shifted target stripes from an offset seed.
    pub fn datasets(&self) -> colora::Result<(DatasetSplits, DatasetSplits)> {
        let src = SynthTask::StripesSource.generate(self.source_counts, self.size, self.seed)?;
        let tgt = SynthTask::StripesTarget.generate(self.target_counts, self.size, self.seed + 100)?;
        Ok((src, tgt))
    }

    fn snapshot(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "size = {}\nsource_counts = {}\ntarget_counts = {}\nwidths = {}\nhead = {}\npretrain_epochs = {}\n\
             finetune_epochs = {}\nlr = {}\nbatch_size = {}\nmerge_interval = {}\norder = {}\nseed = {}\n",
            self.size,
            list(&self.source_counts),
            list(&self.target_counts),
            list(&self.widths),
            self.head,
            self.pretrain_epochs,
            self.finetune_epochs,
            self.lr,
            self.batch_size,
            self.merge_interval,
            self.order,
            self.seed
        )
    }
}

/// Pretrains on the source stripes and adapts to the target four ways.
/// Wall times are part of the report, so unlike the other commands its
/// outputs differ between executions.
pub fn cmd_transfer(opts: &TransferOptions, out_dir: &Path) -> CliResult<TransferReport> {
    let (src, tgt) = opts.datasets()?;
    let report = pretrain_transfer_protocol(&src, &tgt, &opts.config())?;
    let mut out = OutputDir::create(out_dir)?;
    out.write("transfer.csv", report.to_csv())?;
    for a in &report.arms {
        out.write(&format!("{}/history.csv", a.arm.as_str()), a.history.to_csv(true))?;
        out.write(&format!("{}/classwise.csv", a.arm.as_str()), a.eval.classwise_csv())?;
    }
    out.write("source.txt", format!("source_test_acc = {}\n", report.source_test_acc))?;
    out.finish("transfer", opts.seed, &Inputs::default(), &opts.snapshot())?;
    Ok(report)
}
