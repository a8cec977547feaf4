//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored, so a run manifest
//! (whose bookkeeping lines are comments) is itself a valid config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use colora::data::Balance;
use colora::model::{build_tiny_vgg, inject_colora, load_checkpoint, replace_head, HeadSpec, InjectPolicy, ModelGraph, Targets};
use colora::trainer::{AdamConfig, FreezePolicy, TrainConfig};
use colora::Order;

use crate::error::{CliError, CliResult};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.dir", "", "dataset directory with {train,val,test} archives"),
    ("data.balance", "none", "balance the train split: none, min or a per-class count"),
    ("arch.widths", "16,32", "channels of each TinyVGG block"),
    ("arch.head_reduce", "16", "1x1 reduction channels in the head"),
    ("arch.head_hidden", "16", "hidden units in the head"),
    ("arch.input", "28,28,1", "H,W,C used by `params` when no dataset is given"),
    ("arch.classes", "4", "class count used by `params` when no dataset is given"),
    ("colora.order", "pw_dw", "residual order: pw_dw or dw_pw"),
    ("colora.targets", "all", "none, all, or comma-separated conv layer names"),
    ("train.epochs", "20", "epochs per run"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.batch_size", "32", "mini-batch size"),
    ("train.freeze", "as_is", "freeze policy: as_is, backbone or none"),
    ("train.init", "", "checkpoint to continue from; empty trains from scratch"),
    ("merge.interval", "1", "merge CoLoRA layers every N epochs; 0 never"),
    ("runs", "1", "independent runs; run r uses seed + r"),
    ("seed", "0", "base seed"),
    ("parallel", "false", "train runs on separate threads"),
    ("out.dir", "runs/train", "output directory"),
    ("report.timing", "false", "write per-epoch wall times to timing.csv"),
    ("report.plots", "true", "write SVG curves next to the CSVs"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn split_pair(line: &str) -> CliResult<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("expected key=value, got '{line}'")))?;
    Ok((k.trim(), v.trim()))
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(line).map_err(|e| CliError::input(format!("line {}: {e}", i + 1)))?;
            if !seen.insert(k.to_string()) {
                return Err(CliError::input(format!("line {}: duplicate key '{k}'", i + 1)));
            }
            cfg.set(k, v).map_err(|e| CliError::input(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        crate::error::require_file(path, "config")?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Config::parse(&text)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for o in overrides {
            let (k, v) = split_pair(o)?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::input(format!("unknown key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self.get(key);
        v.parse().map_err(|_| CliError::input(format!("{key}: cannot parse '{v}'")))
    }

    fn list(&self, key: &str) -> CliResult<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::input(format!("{key}: bad entry '{s}'"))))
            .collect()
    }

    fn flag(&self, key: &str) -> CliResult<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(CliError::input(format!("{key}: expected true or false, got '{v}'"))),
        }
    }

    /// All keys in documentation order, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.get(k))).collect()
    }
}

/// Typed view of a [`Config`], validated as a whole.
#[derive(Clone, Debug)]
pub struct Settings {
    pub data_dir: Option<PathBuf>,
    pub balance: Option<Balance>,
    pub widths: Vec<usize>,
    pub head_reduce: usize,
    pub head_hidden: usize,
    pub input: [usize; 3],
    pub classes: usize,
    pub order: Order,
    /// `None` when no adapters are injected.
    pub targets: Option<Targets>,
    pub init: Option<PathBuf>,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub timing: bool,
    pub plots: bool,
}

impl Settings {
    pub fn from_config(cfg: &Config) -> CliResult<Self> {
        let path = |k: &str| (!cfg.get(k).is_empty()).then(|| PathBuf::from(cfg.get(k)));
        let balance = match cfg.get("data.balance") {
            "none" => None,
            s => Some(Balance::parse(s)?),
        };
        let input = cfg.list("arch.input")?;
        let input: [usize; 3] = input
            .try_into()
            .map_err(|_| CliError::input("arch.input needs three entries H,W,C"))?;
        let targets = match cfg.get("colora.targets") {
            "none" => None,
            "all" => Some(Targets::All),
            names => Some(Targets::Named(names.split(',').map(|s| s.trim().to_string()).collect())),
        };
        let train = TrainConfig {
            epochs: cfg.num("train.epochs")?,
            batch_size: cfg.num("train.batch_size")?,
            adam: AdamConfig {
                lr: cfg.num("train.lr")?,
                ..AdamConfig::default()
            },
            merge_interval: cfg.num("merge.interval")?,
            seed: cfg.num("seed")?,
            runs: cfg.num("runs")?,
            freeze: FreezePolicy::parse(cfg.get("train.freeze"))?,
            parallel: cfg.flag("parallel")?,
        };
        train.validate()?;
        let s = Settings {
            data_dir: path("data.dir"),
            balance,
            widths: cfg.list("arch.widths")?,
            head_reduce: cfg.num("arch.head_reduce")?,
            head_hidden: cfg.num("arch.head_hidden")?,
            input,
            classes: cfg.num("arch.classes")?,
            order: Order::parse(cfg.get("colora.order"))?,
            targets,
            init: path("train.init"),
            train,
            out_dir: path("out.dir").ok_or_else(|| CliError::input("out.dir is empty"))?,
            timing: cfg.flag("report.timing")?,
            plots: cfg.flag("report.plots")?,
        };
        if s.widths.is_empty() || s.widths.contains(&0) {
            return Err(CliError::input("arch.widths must list positive channel counts"));
        }
        Ok(s)
    }

    pub fn head(&self, classes: usize) -> HeadSpec {
        HeadSpec::new(self.head_reduce, self.head_hidden, classes)
    }

    /// The model of run seed `seed` for `classes` outputs on `input` images:
    /// the `train.init` checkpoint (with a fresh head if the class count
    /// differs) or a fresh TinyVGG, then CoLoRA on the configured targets.
    pub fn build_model(&self, input: [usize; 3], classes: usize, seed: u64) -> colora::Result<ModelGraph> {
        let base = match &self.init {
            Some(p) => {
                let g = load_checkpoint(p)?;
                if g.num_classes() == classes {
                    g
                } else {
                    replace_head(&g, self.head(classes), seed)?
                }
            }
            None => build_tiny_vgg(input, &self.widths, self.head(classes), seed)?,
        };
        let has_colora = base.colora_layers().next().is_some();
        match &self.targets {
            Some(t) if !has_colora => inject_colora(&base, t, self.order, InjectPolicy::FreezeBackbone, seed),
            _ => Ok(base),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_snapshot() {
        let cfg = Config::default();
        assert_eq!(Config::parse(&cfg.snapshot()).unwrap(), cfg);
        assert!(Settings::from_config(&cfg).is_ok());
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = Config::parse("# comment\ntrain.epochs = 3\n\nseed=9\n").unwrap();
        assert_eq!(cfg.get("train.epochs"), "3");
        let cfg = Config::resolve(None, &["train.lr=0.01".into()]).unwrap();
        assert_eq!(Settings::from_config(&cfg).unwrap().train.adam.lr, 0.01);
        assert!(Config::parse("nope = 1").is_err());
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        assert!(Config::parse("seed").is_err());
        let bad = Config::resolve(None, &["train.epochs=zero".into()]).unwrap();
        assert_eq!(Settings::from_config(&bad).unwrap_err().exit_code(), 2);
        let bad = Config::resolve(None, &["merge.interval=50".into()]).unwrap();
        assert!(Settings::from_config(&bad).is_err());
    }

    #[test]
    fn target_lists() {
        let cfg = Config::resolve(None, &["colora.targets=block1.conv1, block2.conv2".into()]).unwrap();
        let s = Settings::from_config(&cfg).unwrap();
        assert_eq!(s.targets, Some(Targets::Named(vec!["block1.conv1".into(), "block2.conv2".into()])));
        let cfg = Config::resolve(None, &["colora.targets=none".into()]).unwrap();
        assert_eq!(Settings::from_config(&cfg).unwrap().targets, None);
    }
}
