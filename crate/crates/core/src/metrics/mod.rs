//! Confusion-matrix statistics, one-vs-rest ROC curves and evaluation reports.

mod plot;

use std::fmt::Write as _;

pub use plot::{LinePlot, Series};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `counts[i][j]` = samples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Metric("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { k, counts: rows.concat() })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(|r| r.to_vec()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.k {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for i in 0..self.k {
            let _ = write!(s, "{i}");
            for j in 0..self.k {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Metric(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Metric(format!("label {} out of range for {k} classes", t.max(p))));
        }
        cm.counts[t * k + p] += 1;
    }
    Ok(cm)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let [_, k] = *scores.shape() else {
        return Err(Error::shape(format!("scores must be (N, K), got {:?}", scores.shape())));
    };
    Ok(scores
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Harmonic mean of precision and recall. Zero when both are zero, NaN when
/// either is undefined.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision.is_nan() || recall.is_nan() {
        f64::NAN
    } else if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Per-class statistics. Undefined values (zero denominators) are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub support: u64,
    pub recall: f64,
    pub precision: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classwise {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
    /// One entry per undefined per-class value left out of a macro average.
    pub warnings: Vec<String>,
}

/// Mean over the finite values; NaN if none.
fn macro_mean(values: impl Iterator<Item = f64>, field: &str, warnings: &mut Vec<String>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, v) in values.enumerate() {
        if v.is_nan() {
            warnings.push(format!("class {i}: {field} undefined, excluded from macro average"));
        } else {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn classwise(cm: &ConfusionMatrix) -> Classwise {
    let total = cm.total();
    let per_class: Vec<ClassMetrics> = (0..cm.k)
        .map(|i| {
            let tp = cm.get(i, i);
            let support = cm.row_sum(i);
            let predicted = cm.col_sum(i);
            let negatives = total - support;
            let fp = predicted - tp;
            let recall = ratio(tp, support);
            let precision = ratio(tp, predicted);
            ClassMetrics {
                support,
                recall,
                precision,
                specificity: ratio(negatives - fp, negatives),
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    let mut warnings = Vec::new();
    let macro_recall = macro_mean(per_class.iter().map(|m| m.recall), "recall", &mut warnings);
    let macro_precision = macro_mean(per_class.iter().map(|m| m.precision), "precision", &mut warnings);
    let macro_specificity = macro_mean(per_class.iter().map(|m| m.specificity), "specificity", &mut warnings);
    let macro_f1 = macro_mean(per_class.iter().map(|m| m.f1), "f1", &mut warnings);
    Classwise {
        accuracy: ratio(cm.trace(), total),
        per_class,
        macro_recall,
        macro_precision,
        macro_specificity,
        macro_f1,
        warnings,
    }
}

/// ROC points from a descending threshold sweep, with the area.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(s, "{f},{t}");
        }
        s
    }
}

/// ROC of a binary problem. Each distinct score is one threshold, so tied
/// positives and negatives produce a single diagonal segment. The area is
/// accumulated in integer units and divided once, which makes it equal to
/// the Mann-Whitney statistic with half credit for ties.
pub fn roc_binary(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Metric(format!(
            "AUC undefined: {p} positives and {n} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = twice_area as f64 / (2 * p as u128 * n as u128) as f64;
    Ok(RocCurve { points, auc })
}

/// One-vs-rest ROC for `class` from `(N, K)` scores.
pub fn roc_auc_ovr(scores: &Tensor, truth: &[usize], class: usize) -> Result<RocCurve> {
    let [n, k] = *scores.shape() else {
        return Err(Error::shape(format!("scores must be (N, K), got {:?}", scores.shape())));
    };
    if truth.len() != n {
        return Err(Error::Metric(format!("{n} score rows but {} labels", truth.len())));
    }
    if class >= k {
        return Err(Error::Metric(format!("class {class} out of range for {k} columns")));
    }
    let col: Vec<f64> = (0..n).map(|r| scores.data()[r * k + class] as f64).collect();
    let pos: Vec<bool> = truth.iter().map(|&t| t == class).collect();
    roc_binary(&col, &pos)
}

/// Everything reported for one evaluated split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub classwise: Classwise,
    /// `None` for classes without both positives and negatives.
    pub roc: Vec<Option<RocCurve>>,
    /// Unweighted mean over classes with a defined AUC.
    pub macro_auc: f64,
}

/// Builds a report from class probabilities and true labels. Predictions are
/// the row argmax.
pub fn evaluate(probs: &Tensor, truth: &[usize]) -> Result<EvalReport> {
    let pred = argmax_rows(probs)?;
    let k = probs.shape()[1];
    let cm = confusion(truth, &pred, k)?;
    let mut cw = classwise(&cm);
    let roc: Vec<Option<RocCurve>> = (0..k)
        .map(|c| match roc_auc_ovr(probs, truth, c) {
            Ok(r) => Ok(Some(r)),
            Err(Error::Metric(m)) if m.starts_with("AUC undefined") => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let aucs = roc.iter().map(|r| r.as_ref().map_or(f64::NAN, |r| r.auc));
    let macro_auc = macro_mean(aucs, "auc", &mut cw.warnings);
    Ok(EvalReport {
        confusion: cm,
        classwise: cw,
        roc,
        macro_auc,
    })
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.classwise.accuracy
    }

    /// Per-class rows, then a macro row and an accuracy row.
    pub fn classwise_csv(&self) -> String {
        let mut s = String::from("class,support,recall,precision,specificity,f1,auc\n");
        for (i, m) in self.classwise.per_class.iter().enumerate() {
            let auc = self.roc[i].as_ref().map_or(f64::NAN, |r| r.auc);
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{}",
                m.support,
                fmt_metric(m.recall),
                fmt_metric(m.precision),
                fmt_metric(m.specificity),
                fmt_metric(m.f1),
                fmt_metric(auc)
            );
        }
        let c = &self.classwise;
        let _ = writeln!(
            s,
            "macro,{},{},{},{},{},{}",
            self.confusion.total(),
            fmt_metric(c.macro_recall),
            fmt_metric(c.macro_precision),
            fmt_metric(c.macro_specificity),
            fmt_metric(c.macro_f1),
            fmt_metric(self.macro_auc)
        );
        let _ = writeln!(s, "accuracy,{},{},,,,", self.confusion.total(), fmt_metric(c.accuracy));
        s
    }

    pub fn roc_plot(&self) -> LinePlot {
        let mut plot = LinePlot::new("One-vs-rest ROC", "false positive rate", "true positive rate");
        for (i, r) in self.roc.iter().enumerate() {
            if let Some(r) = r {
                plot.add(Series::new(format!("class {i} (AUC {:.3})", r.auc), r.points.clone()));
            }
        }
        plot
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_confusion() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 2]]);
        let c = classwise(&cm);
        assert_eq!(c.per_class[0].recall, 0.5);
        assert_eq!(c.per_class[1].recall, 1.0);
        assert_eq!(c.per_class[0].precision, 1.0);
        assert!((c.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.accuracy, 0.75);
        // Specificity of class 0 is the recall of class 1 in the binary case.
        assert_eq!(c.per_class[0].specificity, 1.0);
        assert_eq!(c.per_class[1].specificity, 0.5);
    }

    #[test]
    fn empty_and_perfect() {
        assert_eq!(confusion(&[], &[], 3).unwrap().total(), 0);
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        let c = classwise(&cm);
        assert_eq!(c.accuracy, 1.0);
        for m in &c.per_class {
            assert_eq!((m.recall, m.precision, m.specificity, m.f1), (1.0, 1.0, 1.0, 1.0));
        }
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
    }

    #[test]
    fn zero_support_is_flagged() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        let c = classwise(&cm);
        assert!(c.per_class[2].recall.is_nan());
        assert!(c.warnings.iter().any(|w| w.starts_with("class 2: recall")));
        assert!((c.macro_recall - 0.75).abs() < 1e-15);
    }

    #[test]
    fn f1_matches_reported_row() {
        assert_eq!(format!("{:.3}", f1_score(0.927, 0.972)), "0.949");
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn auc_examples() {
        let r = roc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(roc_binary(&[0.3; 6], &[true, false, true, false, false, true]).unwrap().auc, 0.5);
        assert_eq!(roc_binary(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap().auc, 1.0);
        assert!(roc_binary(&[0.9, 0.8], &[true, true]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let s = Tensor::new(vec![2, 3], vec![0.2, 0.4, 0.4, 0.5, 0.1, 0.4]).unwrap();
        assert_eq!(argmax_rows(&s).unwrap(), vec![1, 0]);
    }

    #[test]
    fn evaluate_skips_degenerate_auc() {
        let probs = Tensor::new(vec![3, 3], vec![0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.6, 0.3, 0.1]).unwrap();
        let r = evaluate(&probs, &[0, 1, 0]).unwrap();
        assert!(r.roc[2].is_none());
        assert_eq!(r.macro_auc, 1.0);
        assert!(r.classwise_csv().contains("\nmacro,3,"));
    }
}
