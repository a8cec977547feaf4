use std::fmt::Write as _;

use super::{Layer, ModelGraph};
use crate::adapters::Order;

/// Per-layer counts. `n_original` is the weight count of the layer's base
/// (`h·w·C·T` for convolutions, `k·d` for dense layers, biases excluded);
/// `n_adapter` and `n_colora` are the adapter-specific trainable counts.
/// `trainable` and `frozen` cover every tensor the layer owns, biases
/// included, under the graph's current freeze mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    pub name: String,
    pub kind: &'static str,
    pub n_original: usize,
    pub n_adapter: Option<usize>,
    pub n_colora: Option<usize>,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamRow {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }

    pub fn row(&self, name: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("layer,kind,n_original,n_adapter,n_colora,trainable,frozen\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name,
                r.kind,
                r.n_original,
                opt(r.n_adapter),
                opt(r.n_colora),
                r.trainable,
                r.frozen
            );
        }
        let _ = writeln!(s, "TOTAL,,,,,{},{}", self.trainable, self.frozen);
        s
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let mut s = format!(
            "{:<20} {:<10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "layer", "kind", "N_O", "N_A", "N_C", "trainable", "frozen"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:<10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                r.name,
                r.kind,
                r.n_original,
                opt(r.n_adapter),
                opt(r.n_colora),
                r.trainable,
                r.frozen
            );
        }
        let _ = writeln!(
            s,
            "total {} | trainable {} | frozen {} | trainable fraction {:.4}",
            self.total,
            self.trainable,
            self.frozen,
            self.trainable_fraction()
        );
        s
    }
}

/// Original count for an `h×w` convolution from `C` to `T` channels.
pub fn conv_original(h: usize, w: usize, c: usize, t: usize) -> usize {
    h * w * c * t
}

/// CoLoRA factor count (bias delta excluded).
pub fn colora_count(h: usize, w: usize, c: usize, t: usize, order: Order) -> usize {
    match order {
        Order::PwThenDw => h * w * t + c * t,
        Order::DwThenPw => h * w * c + c * t,
    }
}

/// CNN adapter count for an `A` of shape `C×T`.
pub fn adapter_count(c: usize, t: usize) -> usize {
    c * t + 2
}

pub fn count_params(g: &ModelGraph) -> ParamReport {
    let mut rows = Vec::new();
    for layer in g.layers() {
        let Some(name) = layer.name() else { continue };
        let (mut trainable, mut frozen) = (0, 0);
        for (pname, t, _) in layer.params() {
            if g.is_trainable(&pname) {
                trainable += t.len();
            } else {
                frozen += t.len();
            }
        }
        let (n_original, n_adapter, n_colora) = match layer {
            Layer::Conv { kernel, .. } => (kernel.weights().len(), None, None),
            Layer::CoLoRA { layer, .. } => {
                let b = layer.base();
                let n = colora_count(b.h(), b.w(), b.in_channels(), b.out_channels(), layer.order())
                    + layer.db().map_or(0, |d| d.len());
                (b.weights().len(), None, Some(n))
            }
            Layer::CnnAdapter { layer, .. } => {
                let a = layer.a();
                (
                    layer.base().weights().len(),
                    Some(adapter_count(a.in_channels(), a.out_channels())),
                    None,
                )
            }
            Layer::Dense { weight, .. } => (weight.len(), None, None),
            Layer::DenseLora { layer, .. } => (layer.w0().len(), None, None),
            _ => unreachable!("only named layers own parameters"),
        };
        rows.push(ParamRow {
            name: name.to_string(),
            kind: layer.kind(),
            n_original,
            n_adapter,
            n_colora,
            trainable,
            frozen,
        });
    }
    let trainable = rows.iter().map(|r| r.trainable).sum();
    let frozen = rows.iter().map(|r| r.frozen).sum();
    ParamReport {
        rows,
        total: trainable + frozen,
        trainable,
        frozen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_tiny_vgg, inject_colora, HeadSpec, InjectPolicy, Targets};

    #[test]
    fn table_values() {
        assert_eq!(conv_original(3, 3, 64, 128), 73_728);
        assert_eq!(colora_count(3, 3, 64, 128, Order::PwThenDw), 9_344);
        assert_eq!(adapter_count(64, 128), 8_194);
        assert_eq!(colora_count(3, 3, 64, 64, Order::PwThenDw), 4_672);
        assert_eq!(conv_original(3, 3, 64, 64), 36_864);
        assert_eq!(colora_count(1, 1, 5, 7, Order::PwThenDw), 7 + 35);
        assert_eq!(colora_count(3, 3, 4, 8, Order::DwThenPw), 36 + 32);
    }

    #[test]
    fn tiny_vgg_total_is_hand_computed() {
        let g = build_tiny_vgg([16, 16, 1], &[8, 16], HeadSpec::new(8, 8, 4), 0).unwrap();
        let convs = (9 * 8 + 8) + (9 * 8 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 16 + 16);
        let head = (16 * 8 + 8) + (8 * 8 + 8) + (8 * 4 + 4);
        let r = count_params(&g);
        assert_eq!(r.total, convs + head);
        assert_eq!(r.trainable, r.total);
        assert_eq!(r.trainable_fraction(), 1.0);
        assert_eq!(r.rows.iter().map(|r| r.total()).sum::<usize>(), r.total);
    }

    #[test]
    fn single_injection_adds_104_plus_bias_delta() {
        let g = build_tiny_vgg([8, 8, 4], &[8], HeadSpec::new(4, 4, 2), 0).unwrap();
        let before = count_params(&g).total;
        let t = Targets::Named(vec!["block1.conv1".into()]);
        let h = inject_colora(&g, &t, Order::PwThenDw, InjectPolicy::KeepTrainable, 0).unwrap();
        let r = count_params(&h);
        // The base conv carries a bias, so the residual gets a T-sized delta too.
        assert_eq!(r.total - before, 104 + 8);
        assert_eq!(r.row("block1.conv1").unwrap().n_colora, Some(112));
        assert_eq!(r.row("block1.conv1").unwrap().frozen, 9 * 4 * 8 + 8);
    }

    #[test]
    fn csv_has_totals() {
        let g = build_tiny_vgg([8, 8, 1], &[2], HeadSpec::new(2, 2, 2), 0).unwrap();
        let csv = count_params(&g).to_csv();
        assert!(csv.starts_with("layer,kind,"));
        assert!(csv.lines().last().unwrap().starts_with("TOTAL"));
    }
}
