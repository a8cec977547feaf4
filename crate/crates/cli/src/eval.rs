use std::path::{Path, PathBuf};

use colora::data::{balance_by_first_n, distill, load_dataset, save_split, Balance, DatasetSplits, DistillReport, Keep, Split};
use colora::metrics::{self, EvalReport, LinePlot, Series};
use colora::model::{count_params, load_checkpoint, ModelGraph, ParamReport};
use colora::Tensor;

use crate::config::{Config, Settings};
use crate::error::{require_dir, require_file, CliError, CliResult};
use crate::manifest::{Inputs, OutputDir};

fn load_pair(checkpoint: &Path, data_dir: &Path) -> CliResult<(ModelGraph, DatasetSplits, Inputs)> {
    require_file(checkpoint, "checkpoint")?;
    require_dir(data_dir, "dataset directory")?;
    let g = load_checkpoint(checkpoint)?;
    let data = load_dataset(data_dir, None)?;
    if g.num_classes() != data.num_classes {
        return Err(CliError::input(format!(
            "model has {} classes, dataset {}",
            g.num_classes(),
            data.num_classes
        )));
    }
    if g.input_shape() != data.image_shape() {
        return Err(CliError::input(format!(
            "model expects {:?} images, dataset has {:?}",
            g.input_shape(),
            data.image_shape()
        )));
    }
    let mut inputs = Inputs::default();
    inputs.file("checkpoint", checkpoint)?;
    inputs.dir("data", data_dir)?;
    Ok((g, data, inputs))
}

/// Softmax outputs for a whole split, batched.
pub fn predict_split(g: &ModelGraph, split: &Split) -> colora::Result<Tensor> {
    let rows: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::with_capacity(split.len() * g.num_classes());
    for chunk in rows.chunks(256) {
        let (x, _) = split.batch(chunk)?;
        out.extend_from_slice(g.predict_proba(&x)?.data());
    }
    Tensor::new(vec![split.len(), g.num_classes()], out)
}

fn fmt_args(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Class-wise metrics, confusion matrix and ROC curves of a checkpoint on
/// one split.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, split: &str, out_dir: &Path, plots: bool) -> CliResult<EvalReport> {
    let (g, data, inputs) = load_pair(checkpoint, data_dir)?;
    let s = data.split(split)?;
    let probs = predict_split(&g, s)?;
    let report = metrics::evaluate(&probs, s.labels())?;

    let mut out = OutputDir::create(out_dir)?;
    out.write("classwise.csv", report.classwise_csv())?;
    out.write("confusion.csv", report.confusion.to_csv())?;
    for (i, roc) in report.roc.iter().enumerate() {
        if let Some(r) = roc {
            out.write(&format!("roc/class{i}.csv"), r.to_csv())?;
        }
    }
    if plots {
        out.write("roc.svg", report.roc_plot().to_svg())?;
    }
    for w in &report.classwise.warnings {
        eprintln!("warning: {w}");
    }
    let args = fmt_args(&[
        ("checkpoint", checkpoint.display().to_string()),
        ("data", data_dir.display().to_string()),
        ("split", split.to_string()),
    ]);
    out.finish("eval", 0, &inputs, &args)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct DistillOptions {
    pub discard_top: usize,
    pub keep: Keep,
    /// Applied to the train split before scoring.
    pub balance: Option<Balance>,
    pub plots: bool,
}

fn entropy_plot(report: &DistillReport) -> LinePlot {
    let mut p = LinePlot::new("Predictive entropy by rank", "rank (descending entropy)", "entropy (nats)");
    for c in &report.per_class {
        let pts = c.sorted.iter().enumerate().map(|(i, (_, h))| (i as f64, *h)).collect();
        p.add(Series::new(format!("class {}", c.class), pts));
    }
    p
}

/// Scores the train split with a checkpoint and keeps, per class, the
/// samples ranked after the `discard_top` most uncertain ones. Validation
/// and test splits are copied unchanged.
pub fn cmd_distill(checkpoint: &Path, data_dir: &Path, opts: &DistillOptions, out_dir: &Path) -> CliResult<DistillReport> {
    let (g, data, inputs) = load_pair(checkpoint, data_dir)?;
    let k = data.num_classes;
    let train = match opts.balance {
        Some(b) => balance_by_first_n(&data.train, b, k)?,
        None => data.train.clone(),
    };
    let (kept, report) = distill(&train, &g, k, opts.discard_top, opts.keep)?;

    let mut out = OutputDir::create(out_dir)?;
    for (name, split) in [("train", &kept), ("val", &data.val), ("test", &data.test)] {
        save_split(out.root(), name, split)?;
        for suffix in ["images.cot1", "labels.cot1", "manifest.txt"] {
            out.record(&format!("{name}_{suffix}"))?;
        }
    }
    out.write("distill_report.csv", report.to_csv())?;
    if opts.plots {
        out.write("entropy.svg", entropy_plot(&report).to_svg())?;
    }
    let keep = match opts.keep {
        Keep::All => "all".to_string(),
        Keep::Count(n) => n.to_string(),
    };
    let balance = match opts.balance {
        None => "none".to_string(),
        Some(Balance::Min) => "min".to_string(),
        Some(Balance::PerClass(n)) => n.to_string(),
    };
    let args = fmt_args(&[
        ("checkpoint", checkpoint.display().to_string()),
        ("data", data_dir.display().to_string()),
        ("discard_top", opts.discard_top.to_string()),
        ("keep", keep),
        ("balance", balance),
    ]);
    out.finish("distill", 0, &inputs, &args)?;
    Ok(report)
}

pub enum ParamsSource<'a> {
    Config { path: Option<&'a Path>, overrides: &'a [String] },
    Checkpoint(&'a Path),
}

/// Per-layer parameter table of a configured model or a checkpoint. The
/// configured model gets its freeze policy applied; a checkpoint keeps its
/// stored mask.
pub fn cmd_params(source: ParamsSource<'_>, csv: Option<&Path>) -> CliResult<ParamReport> {
    let g = match source {
        ParamsSource::Checkpoint(p) => {
            require_file(p, "checkpoint")?;
            load_checkpoint(p)?
        }
        ParamsSource::Config { path, overrides } => {
            let s = Settings::from_config(&Config::resolve(path, overrides)?)?;
            let mut g = s.build_model(s.input, s.classes, s.train.seed)?;
            s.train.freeze.apply(&mut g);
            g
        }
    };
    let report = count_params(&g);
    if let Some(p) = csv {
        let p: PathBuf = p.to_path_buf();
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&p, report.to_csv()).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(report)
}
