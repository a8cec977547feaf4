//! Labelled image splits, archive I/O, class balancing and entropy-based
//! distillation.

mod archive;
mod distill;
pub mod synth;

use std::collections::BTreeSet;

pub use archive::{load_dataset, read_cot1, save_dataset, save_split, write_cot1, RawArray, COT1_MAGIC};
pub use distill::{distill, distill_by_entropy, predictive_entropy, ClassDistill, DistillReport, Keep};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One split: images `(N, H, W, C)` in `[0, 1]`, labels and unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    images: Tensor,
    labels: Vec<usize>,
    ids: Vec<String>,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>, ids: Vec<String>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dataset(format!("images must be (N, H, W, C), got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::Dataset(format!(
                "{n} images, {} labels, {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id '{id}'")));
            }
            if id.is_empty() || id.contains(['\n', '\r']) {
                return Err(Error::Dataset(format!("invalid sample id {id:?}")));
            }
        }
        Ok(Split { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `[H, W, C]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        let [h, w, c] = self.image_shape();
        h * w * c
    }

    /// Stacks the given rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(rows.len() * per);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Dataset(format!("row {r} out of range")));
            }
            data.extend_from_slice(&self.images.data()[r * per..(r + 1) * per]);
            labels.push(self.labels[r]);
        }
        let [h, w, c] = self.image_shape();
        Ok((Tensor::new(vec![rows.len(), h, w, c], data)?, labels))
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Split> {
        if indices.is_empty() {
            return Err(Error::Dataset("subset would be empty".into()));
        }
        let (images, labels) = self.batch(indices)?;
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        Ok(Split { images, labels, ids })
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices per class, in split order.
    pub fn rows_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            rows[l].push(i);
        }
        rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub num_classes: usize,
}

impl DatasetSplits {
    pub fn new(train: Split, val: Split, test: Split, num_classes: usize) -> Result<Self> {
        let shape = train.image_shape();
        for (name, s) in [("val", &val), ("test", &test)] {
            if s.image_shape() != shape {
                return Err(Error::Dataset(format!(
                    "{name} images are {:?}, train images {:?}",
                    s.image_shape(),
                    shape
                )));
            }
        }
        for s in [&train, &val, &test] {
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
            }
        }
        Ok(DatasetSplits { train, val, test, num_classes })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Balance {
    PerClass(usize),
    /// The smallest class count.
    Min,
}

impl Balance {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "min" => Ok(Balance::Min),
            n => n
                .parse()
                .map(Balance::PerClass)
                .map_err(|_| Error::invalid(format!("balance must be 'min' or a count, got '{n}'"))),
        }
    }
}

/// Keeps, per class, the first `n` samples by lexicographic id. The result
/// is ordered by id.
pub fn balance_by_first_n(split: &Split, n: Balance, num_classes: usize) -> Result<Split> {
    let counts = split.class_counts(num_classes);
    let n = match n {
        Balance::PerClass(n) => n,
        Balance::Min => counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0),
    };
    if n == 0 {
        return Err(Error::Dataset("balanced split would be empty".into()));
    }
    let short: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < n)
        .map(|(k, &c)| format!("class {k}: {c} < {n}"))
        .collect();
    if !short.is_empty() {
        return Err(Error::Dataset(format!("not enough samples to balance ({})", short.join(", "))));
    }
    let mut keep = Vec::with_capacity(n * num_classes);
    for mut rows in split.rows_by_class(num_classes) {
        rows.sort_by(|&a, &b| split.ids[a].cmp(&split.ids[b]));
        keep.extend_from_slice(&rows[..n]);
    }
    keep.sort_by(|&a, &b| split.ids[a].cmp(&split.ids[b]));
    split.subset(&keep)
}
