//! Accuracy under optimal label matching, the k-means baseline and the
//! feature/bias analyses.

mod hungarian;
mod kmeans;

pub use hungarian::{hungarian, Assignment};
pub use kmeans::{kmeans, KMeans, KMEANS_MAX_ITER, KMEANS_TOL};

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub acc_all: f64,
    pub acc_seen: f64,
    pub acc_novel: f64,
    pub predicted_seen_ratio: f64,
    pub num_seen_samples: usize,
    pub num_novel_samples: usize,
    /// `mapping[p]` is the true class matched to predicted label `p` under
    /// the all-sample assignment.
    pub mapping: Vec<Option<usize>>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22}{:>10.4}", "acc_all", self.acc_all)?;
        writeln!(f, "{:<22}{:>10.4}", "acc_seen", self.acc_seen)?;
        writeln!(f, "{:<22}{:>10.4}", "acc_novel", self.acc_novel)?;
        writeln!(
            f,
            "{:<22}{:>10.4}",
            "predicted_seen_ratio", self.predicted_seen_ratio
        )?;
        writeln!(f, "{:<22}{:>10}", "seen_samples", self.num_seen_samples)?;
        write!(f, "{:<22}{:>10}", "novel_samples", self.num_novel_samples)
    }
}

/// `counts[p * k + t]`: samples predicted `p` with truth `t`.
pub fn contingency(pred: &[usize], truth: &[usize], k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        c[p * k + t] += 1.0;
    }
    c
}

/// Fraction of samples correct under the best one-to-one relabeling of
/// predictions, and the relabeling itself.
pub fn matched_accuracy(
    pred: &[usize],
    truth: &[usize],
    k: usize,
) -> Result<(f64, Vec<Option<usize>>)> {
    if pred.is_empty() {
        return Ok((0.0, vec![None; k]));
    }
    let a = hungarian(&contingency(pred, truth, k), k, k)?;
    Ok((a.score / pred.len() as f64, a.row_to_col))
}

fn check_labels(pred: &[usize], truth: &[usize], k: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Protocol(format!(
            "{} predictions for {} samples",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&y| y >= k) {
        return Err(Error::Protocol(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Seen accuracy by direct comparison, novel and overall accuracy under
/// optimal matching over unlabeled predictions. An empty subset scores 0.
pub fn gcd_accuracy(pred: &[usize], truth: &[usize], seen: &[bool]) -> Result<EvalReport> {
    let k = seen.len();
    check_labels(pred, truth, k)?;
    let (mut seen_ok, mut n_seen) = (0, 0);
    let (mut novel_pred, mut novel_truth) = (Vec::new(), Vec::new());
    for (&p, &t) in pred.iter().zip(truth) {
        if seen[t] {
            n_seen += 1;
            seen_ok += usize::from(p == t);
        } else {
            novel_pred.push(p);
            novel_truth.push(t);
        }
    }
    let (acc_novel, _) = matched_accuracy(&novel_pred, &novel_truth, k)?;
    let (acc_all, mapping) = matched_accuracy(pred, truth, k)?;
    Ok(EvalReport {
        acc_all,
        acc_seen: ratio(seen_ok, n_seen),
        acc_novel,
        predicted_seen_ratio: ratio(pred.iter().filter(|&&p| seen[p]).count(), pred.len()),
        num_seen_samples: n_seen,
        num_novel_samples: novel_pred.len(),
        mapping,
    })
}

/// Protocol for label-free clusterings such as k-means: one assignment over
/// all samples, with the seen and novel accuracies read off that mapping.
/// Cluster ids carry no class meaning, so the predicted seen ratio is taken
/// after mapping.
pub fn cluster_accuracy(pred: &[usize], truth: &[usize], seen: &[bool]) -> Result<EvalReport> {
    let k = seen.len();
    check_labels(pred, truth, k)?;
    let (acc_all, mapping) = matched_accuracy(pred, truth, k)?;
    let mapped: Vec<Option<usize>> = pred.iter().map(|&p| mapping[p]).collect();
    let (mut seen_ok, mut n_seen, mut novel_ok, mut n_novel, mut pred_seen) = (0, 0, 0, 0, 0);
    for (m, &t) in mapped.iter().zip(truth) {
        let hit = *m == Some(t);
        if seen[t] {
            n_seen += 1;
            seen_ok += usize::from(hit);
        } else {
            n_novel += 1;
            novel_ok += usize::from(hit);
        }
        pred_seen += usize::from(m.is_some_and(|c| seen[c]));
    }
    Ok(EvalReport {
        acc_all,
        acc_seen: ratio(seen_ok, n_seen),
        acc_novel: ratio(novel_ok, n_novel),
        predicted_seen_ratio: ratio(pred_seen, pred.len()),
        num_seen_samples: n_seen,
        num_novel_samples: n_novel,
        mapping,
    })
}

/// Mean cosine similarity between matching rows.
pub fn feature_similarity(before: &Tensor, after: &Tensor) -> Result<f64> {
    if before.shape() != after.shape() || before.rows() == 0 {
        return Err(Error::dim(
            "feature_similarity",
            before.shape(),
            after.shape(),
        ));
    }
    let n = before.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (before.row(i), after.row(i));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na <= 1e-12 || nb <= 1e-12 {
            return Err(Error::Degenerate(format!("zero feature at row {i}")));
        }
        total += dot / (na * nb);
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub predicted_seen_ratio: f64,
    /// Class ids, seen classes first, each group ascending.
    pub class_order: Vec<usize>,
    /// Fraction of predictions per class, in `class_order`.
    pub mass: Vec<f64>,
}

impl BiasReport {
    pub fn to_csv(&self, seen: &[bool]) -> String {
        let mut s = String::from("rank,class,seen,mass\n");
        for (r, (&c, &m)) in self.class_order.iter().zip(&self.mass).enumerate() {
            s.push_str(&format!("{r},{c},{},{m}\n", u8::from(seen[c])));
        }
        s
    }
}

/// How argmax predictions distribute over classes, seen classes first.
pub fn bias_report(pred: &[usize], seen: &[bool]) -> Result<BiasReport> {
    let k = seen.len();
    if let Some(bad) = pred.iter().find(|&&p| p >= k) {
        return Err(Error::Protocol(format!("label {bad} outside [0, {k})")));
    }
    let mut counts = vec![0usize; k];
    for &p in pred {
        counts[p] += 1;
    }
    let class_order: Vec<usize> = (0..k)
        .filter(|&c| seen[c])
        .chain((0..k).filter(|&c| !seen[c]))
        .collect();
    let n = pred.len();
    Ok(BiasReport {
        predicted_seen_ratio: ratio(pred.iter().filter(|&&p| seen[p]).count(), n),
        mass: class_order.iter().map(|&c| ratio(counts[c], n)).collect(),
        class_order,
    })
}

#[cfg(test)]
mod tests;
