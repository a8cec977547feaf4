use std::fmt::Write as _;

use super::{train, EpochRecord, RunHistory, TrainConfig, TrainOutcome};
use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Order statistics of one metric at one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear interpolation between closest ranks.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Stats {
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

pub const METRICS: [&str; 6] = ["train_loss", "train_acc", "val_loss", "val_acc", "test_loss", "test_acc"];

fn metric(r: &EpochRecord, name: &str) -> f64 {
    match name {
        "train_loss" => r.train_loss,
        "train_acc" => r.train_acc,
        "val_loss" => r.val_loss,
        "val_acc" => r.val_acc,
        "test_loss" => r.test_loss,
        "test_acc" => r.test_acc,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Per-epoch statistics across runs, for each metric in [`METRICS`].
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    /// `epochs[e][m]` for epoch `e + 1` and metric `METRICS[m]`.
    pub epochs: Vec<Vec<Stats>>,
}

impl Aggregate {
    pub fn stats(&self, epoch: usize, name: &str) -> Option<Stats> {
        let m = METRICS.iter().position(|&n| n == name)?;
        self.epochs.get(epoch.checked_sub(1)?).map(|e| e[m])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,metric,median,q1,q3,min,max\n");
        for (e, row) in self.epochs.iter().enumerate() {
            for (name, st) in METRICS.iter().zip(row) {
                let _ = writeln!(
                    s,
                    "{},{name},{},{},{},{},{}",
                    e + 1,
                    st.median,
                    st.q1,
                    st.q3,
                    st.min,
                    st.max
                );
            }
        }
        s
    }
}

/// Aggregates histories of equal length.
pub fn aggregate(histories: &[&RunHistory]) -> Result<Aggregate> {
    let Some(first) = histories.first() else {
        return Err(Error::invalid("no completed runs to aggregate"));
    };
    if histories.iter().any(|h| h.len() != first.len()) {
        return Err(Error::invalid("histories differ in length"));
    }
    let epochs = (0..first.len())
        .map(|e| {
            METRICS
                .iter()
                .map(|m| {
                    let vals: Vec<f64> = histories.iter().map(|h| metric(&h.records()[e], m)).collect();
                    Stats::of(&vals).unwrap()
                })
                .collect()
        })
        .collect();
    Ok(Aggregate { runs: histories.len(), epochs })
}

pub struct MultiRun {
    /// One entry per run, failed runs included.
    pub outcomes: Vec<Result<TrainOutcome>>,
    /// Over the runs that completed; `None` if none did.
    pub aggregate: Option<Aggregate>,
}

impl MultiRun {
    pub fn completed(&self) -> impl Iterator<Item = (usize, &TrainOutcome)> {
        self.outcomes.iter().enumerate().filter_map(|(i, o)| o.as_ref().ok().map(|o| (i, o)))
    }
}

/// Runs `cfg.runs` trainings. Run `r` uses seed `cfg.seed + r`, both for the
/// graph built by `make_graph` and for training.
pub fn multirun<F>(data: &DatasetSplits, cfg: &TrainConfig, make_graph: F) -> Result<MultiRun>
where
    F: Fn(u64) -> Result<ModelGraph> + Sync,
{
    cfg.validate()?;
    let one = |r: usize| -> Result<TrainOutcome> {
        let seed = cfg.seed.wrapping_add(r as u64);
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        train(make_graph(seed)?, data, &run_cfg)
    };
    let outcomes: Vec<Result<TrainOutcome>> = if cfg.parallel && cfg.runs > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..cfg.runs).map(|r| s.spawn(move || one(r))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("training thread panicked"))))
                .collect()
        })
    } else {
        (0..cfg.runs).map(one).collect()
    };
    let done: Vec<&RunHistory> = outcomes.iter().filter_map(|o| o.as_ref().ok()).map(|o| &o.history).collect();
    let aggregate = if done.is_empty() { None } else { Some(aggregate(&done)?) };
    Ok(MultiRun { outcomes, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(vals: &[f64]) -> RunHistory {
        let mut h = RunHistory::default();
        for (i, &v) in vals.iter().enumerate() {
            h.push(EpochRecord {
                epoch: i + 1,
                train_loss: v,
                train_acc: v,
                val_loss: v,
                val_acc: v,
                test_loss: v,
                test_acc: v,
                seconds: 0.0,
            });
        }
        h
    }

    #[test]
    fn order_statistics() {
        let hs = [hist(&[1.0]), hist(&[3.0]), hist(&[2.0])];
        let agg = aggregate(&hs.iter().collect::<Vec<_>>()).unwrap();
        let s = agg.stats(1, "test_acc").unwrap();
        assert_eq!((s.median, s.min, s.max, s.q1, s.q3), (2.0, 1.0, 3.0, 1.5, 2.5));
    }

    #[test]
    fn single_run_and_identical_runs() {
        let h = hist(&[0.3, 0.6]);
        let agg = aggregate(&[&h]).unwrap();
        assert_eq!(agg.stats(2, "val_loss").unwrap().median, 0.6);
        let agg = aggregate(&[&h, &h, &h]).unwrap();
        for e in 1..=2 {
            let s = agg.stats(e, "train_acc").unwrap();
            assert_eq!(s.q3 - s.q1, 0.0);
        }
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[&h, &hist(&[1.0])]).is_err());
    }

    #[test]
    fn even_count_median_interpolates() {
        assert_eq!(Stats::of(&[4.0, 1.0, 3.0, 2.0]).unwrap().median, 2.5);
    }
}
