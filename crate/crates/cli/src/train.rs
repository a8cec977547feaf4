use std::path::{Path, PathBuf};

use colora::data::{balance_by_first_n, load_dataset};
use colora::metrics::{LinePlot, Series};
use colora::model::{count_params, save_checkpoint};
use colora::trainer::{multirun, Aggregate};

use crate::config::{Config, Settings};
use crate::error::{require_dir, require_file, CliError, CliResult};
use crate::manifest::{Inputs, OutputDir};

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    /// Final test accuracy of each completed run.
    pub final_test_acc: Vec<f64>,
    pub trainable_fraction: f64,
    pub artifacts: Vec<String>,
}

fn curves(agg: &Aggregate) -> LinePlot {
    let mut p = LinePlot::new("Accuracy per epoch (median over runs)", "epoch", "accuracy");
    for split in ["train", "val", "test"] {
        let key = format!("{split}_acc");
        let pts = (0..agg.epochs.len())
            .filter_map(|e| agg.stats(e + 1, &key).map(|s| ((e + 1) as f64, s.median)))
            .collect();
        p.add(Series::new(split, pts));
    }
    p
}

/// Trains `runs` models as configured and writes per-run histories and
/// checkpoints, the aggregate curve, a parameter table and the manifest.
///
/// All inputs are checked before the output directory is touched, so a
/// missing dataset leaves nothing behind.
pub fn cmd_train(config: Option<&Path>, overrides: &[String]) -> CliResult<TrainSummary> {
    let cfg = Config::resolve(config, overrides)?;
    let s = Settings::from_config(&cfg)?;
    let data_dir = s.data_dir.clone().ok_or_else(|| CliError::input("data.dir is not set"))?;
    require_dir(&data_dir, "dataset directory")?;
    if let Some(p) = &s.init {
        require_file(p, "checkpoint")?;
    }
    let mut data = load_dataset(&data_dir, None)?;
    let k = data.num_classes;
    if let Some(b) = s.balance {
        data.train = balance_by_first_n(&data.train, b, k)?;
    }
    let shape = data.image_shape();
    let mut probe = s.build_model(shape, k, s.train.seed)?;
    s.train.freeze.apply(&mut probe);
    let params = count_params(&probe);

    let mut inputs = Inputs::default();
    inputs.dir("data", &data_dir)?;
    if let Some(p) = &s.init {
        inputs.file("init", p)?;
    }

    let mut out = OutputDir::create(&s.out_dir)?;
    out.write("params.csv", params.to_csv())?;
    let runs = multirun(&data, &s.train, |seed| s.build_model(shape, k, seed))?;
    let mut final_test_acc = Vec::new();
    let mut failure = None;
    for (r, outcome) in runs.outcomes.into_iter().enumerate() {
        let o = match outcome {
            Ok(o) => o,
            Err(e) => {
                eprintln!("run {r} failed: {e}");
                failure.get_or_insert(CliError::from(e));
                continue;
            }
        };
        out.write(&format!("run{r}/history.csv"), o.history.to_csv(false))?;
        out.write(&format!("run{r}/selection.csv"), o.history.selection_csv())?;
        if s.timing {
            out.write(&format!("run{r}/timing.csv"), o.history.timing_csv())?;
        }
        for (name, g) in [("final", &o.model), ("best_test", &o.best_test_model)] {
            let rel = format!("run{r}/{name}.ckpt");
            save_checkpoint(g, out.path(&rel)?)?;
            out.record(&rel)?;
        }
        final_test_acc.push(o.history.records().last().map_or(0.0, |e| e.test_acc));
    }
    if let Some(agg) = &runs.aggregate {
        out.write("aggregate.csv", agg.to_csv())?;
        if s.plots {
            out.write("curves.svg", curves(agg).to_svg())?;
        }
    }
    let artifacts = out.artifacts().map(String::from).collect();
    let out_dir = out.root().to_path_buf();
    out.finish("train", s.train.seed, &inputs, &cfg.snapshot())?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainSummary {
        out_dir,
        final_test_acc,
        trainable_fraction: params.trainable_fraction(),
        artifacts,
    })
}
