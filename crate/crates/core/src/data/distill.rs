use std::fmt::Write as _;

use super::Split;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Row-wise `−Σ p ln p` with `0·ln 0 = 0`. Rows summing to 1 within `1e-5`
/// are renormalized first.
pub fn predictive_entropy(probs: &Tensor) -> Result<Vec<f64>> {
    let [_, k] = *probs.shape() else {
        return Err(Error::shape(format!("probabilities must be (N, K), got {:?}", probs.shape())));
    };
    probs
        .data()
        .chunks_exact(k)
        .enumerate()
        .map(|(i, row)| {
            if let Some(p) = row.iter().find(|&&p| p < 0.0) {
                return Err(Error::Dataset(format!("row {i} has negative probability {p}")));
            }
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Dataset(format!("row {i} sums to {sum}, not 1")));
            }
            Ok(row
                .iter()
                .map(|&p| p as f64 / sum)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Keep {
    Count(usize),
    /// Everything left after the discard.
    All,
}

impl Keep {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Keep::All),
            n => n
                .parse()
                .map(Keep::Count)
                .map_err(|_| Error::invalid(format!("keep must be 'all' or a count, got '{n}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistill {
    pub class: usize,
    /// `(id, entropy)` sorted by entropy descending, then id ascending.
    pub sorted: Vec<(String, f64)>,
    pub discarded: Vec<String>,
    pub retained: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub per_class: Vec<ClassDistill>,
}

impl DistillReport {
    pub fn retained_total(&self) -> usize {
        self.per_class.iter().map(|c| c.retained.len()).sum()
    }

    pub fn discarded_total(&self) -> usize {
        self.per_class.iter().map(|c| c.discarded.len()).sum()
    }

    /// One row per sample in sorted order with its fate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,rank,id,entropy,status\n");
        for c in &self.per_class {
            let (nd, nr) = (c.discarded.len(), c.retained.len());
            for (rank, (id, h)) in c.sorted.iter().enumerate() {
                let status = if rank < nd {
                    "discarded"
                } else if rank < nd + nr {
                    "retained"
                } else {
                    "unused"
                };
                let _ = writeln!(s, "{},{rank},{id},{h:.9},{status}", c.class);
            }
        }
        s
    }
}

/// Per class: sort by entropy descending (ties by id ascending), drop the
/// first `discard_top`, keep the next `keep`. The returned split preserves
/// the input order.
pub fn distill_by_entropy(
    split: &Split,
    entropy: &[f64],
    num_classes: usize,
    discard_top: usize,
    keep: Keep,
) -> Result<(Split, DistillReport)> {
    if entropy.len() != split.len() {
        return Err(Error::Dataset(format!(
            "{} entropies for {} samples",
            entropy.len(),
            split.len()
        )));
    }
    if let Some(i) = entropy.iter().position(|h| !h.is_finite()) {
        return Err(Error::NonFinite(format!("entropy of '{}' is not finite", split.ids()[i])));
    }
    let by_class = split.rows_by_class(num_classes);
    let shortfalls: Vec<String> = by_class
        .iter()
        .enumerate()
        .filter_map(|(c, rows)| {
            let need = discard_top + if let Keep::Count(n) = keep { n } else { 0 };
            (rows.len() < need).then(|| format!("class {c}: need {need}, have {}", rows.len()))
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(Error::Dataset(format!("insufficient samples ({})", shortfalls.join("; "))));
    }

    let mut selected = vec![false; split.len()];
    let mut per_class = Vec::with_capacity(num_classes);
    for (class, mut rows) in by_class.into_iter().enumerate() {
        rows.sort_by(|&a, &b| entropy[b].total_cmp(&entropy[a]).then_with(|| split.ids()[a].cmp(&split.ids()[b])));
        let n_keep = match keep {
            Keep::Count(n) => n,
            Keep::All => rows.len() - discard_top,
        };
        let retained_rows = &rows[discard_top..discard_top + n_keep];
        for &r in retained_rows {
            selected[r] = true;
        }
        let id = |r: &usize| split.ids()[*r].clone();
        per_class.push(ClassDistill {
            class,
            sorted: rows.iter().map(|&r| (split.ids()[r].clone(), entropy[r])).collect(),
            discarded: rows[..discard_top].iter().map(id).collect(),
            retained: retained_rows.iter().map(id).collect(),
        });
    }
    let keep_rows: Vec<usize> = (0..split.len()).filter(|&i| selected[i]).collect();
    Ok((split.subset(&keep_rows)?, DistillReport { per_class }))
}

/// Scores every sample with `model`'s softmax and distills by entropy.
pub fn distill(
    split: &Split,
    model: &ModelGraph,
    num_classes: usize,
    discard_top: usize,
    keep: Keep,
) -> Result<(Split, DistillReport)> {
    if model.num_classes() != num_classes {
        return Err(Error::Dataset(format!(
            "model has {} outputs, dataset {num_classes} classes",
            model.num_classes()
        )));
    }
    let mut entropy = Vec::with_capacity(split.len());
    let rows: Vec<usize> = (0..split.len()).collect();
    for chunk in rows.chunks(256) {
        let (x, _) = split.batch(chunk)?;
        entropy.extend(predictive_entropy(&model.predict_proba(&x)?)?);
    }
    distill_by_entropy(split, &entropy, num_classes, discard_top, keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let p = Tensor::new(vec![3, 4], vec![0., 1., 0., 0., 0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 0., 0.]).unwrap();
        let h = predictive_entropy(&p).unwrap();
        assert_eq!(h[0], 0.0);
        assert!((h[1] - 4f64.ln()).abs() < 1e-12);
        assert!((h[2] - 2f64.ln()).abs() < 1e-12);
        let neg = Tensor::new(vec![1, 2], vec![1.1, -0.1]).unwrap();
        assert!(predictive_entropy(&neg).is_err());
        let off = Tensor::new(vec![1, 2], vec![0.6, 0.6]).unwrap();
        assert!(predictive_entropy(&off).is_err());
    }

    fn five() -> Split {
        let images = Tensor::zeros(&[5, 1, 1, 1]);
        let ids = ["e", "d", "c", "b", "a"].iter().map(|s| s.to_string()).collect();
        Split::new(images, vec![0; 5], ids, 1).unwrap()
    }

    #[test]
    fn sort_and_slice() {
        let (out, rep) = distill_by_entropy(&five(), &[0.9, 0.8, 0.3, 0.2, 0.1], 1, 1, Keep::Count(2)).unwrap();
        assert_eq!(out.ids(), ["d", "c"]);
        assert_eq!(rep.per_class[0].discarded, ["e"]);
        assert_eq!(rep.retained_total(), 2);
        assert!(rep.to_csv().contains("0,3,b,0.200000000,unused"));
    }

    #[test]
    fn ties_break_by_id_and_identity_case() {
        let (out, _) = distill_by_entropy(&five(), &[0.5; 5], 1, 1, Keep::Count(2)).unwrap();
        assert_eq!(out.ids(), ["c", "b"]);
        let (all, rep) = distill_by_entropy(&five(), &[0.5; 5], 1, 0, Keep::All).unwrap();
        assert_eq!(all, five());
        assert_eq!(rep.discarded_total(), 0);
    }

    #[test]
    fn shortfall_lists_classes() {
        let err = distill_by_entropy(&five(), &[0.0; 5], 1, 2, Keep::Count(4)).unwrap_err();
        assert!(err.to_string().contains("class 0: need 6, have 5"));
    }
}
