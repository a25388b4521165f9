//! Retrieval ranking metrics.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Rank (1-based) of the ground-truth gallery item for every query row.
/// Items scoring strictly higher rank above it, and so do equal-scoring
/// items at a lower gallery index.
pub fn ranks<T: Scalar>(scores: &Tensor<T>, ground_truth: &[usize]) -> Result<Vec<usize>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != ground_truth.len() {
        return Err(Error::shape(
            "retrieval_metrics",
            format!("[{}, Ng] scores", ground_truth.len()),
            format!("{s:?}"),
        ));
    }
    let ng = s[1];
    ground_truth
        .iter()
        .enumerate()
        .map(|(q, &gt)| {
            if gt >= ng {
                return Err(Error::invalid(format!("query {q}: ground truth {gt} outside gallery of {ng}")));
            }
            let row = scores.row(q);
            let target = row[gt];
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < gt))
                .count();
            Ok(1 + above)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    /// `(K, percentage of queries with rank <= K)`
    pub recall: Vec<(usize, f64)>,
    /// Median rank; the mean of the two middle ranks for an even count.
    pub median_rank: f64,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|&(_, r)| r)
    }
}

pub fn median(values: &mut [usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    })
}

/// Recall@K for each `k` and median rank over `[Nq, Ng]` similarity scores.
pub fn retrieval_metrics<T: Scalar>(scores: &Tensor<T>, ground_truth: &[usize], ks: &[usize]) -> Result<RetrievalMetrics> {
    if ground_truth.is_empty() {
        return Err(Error::invalid("retrieval metrics need at least one query"));
    }
    let ng = scores.shape().get(1).copied().unwrap_or(0);
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > ng) {
        return Err(Error::invalid(format!("R@{k} undefined for a gallery of {ng}")));
    }
    let mut r = ranks(scores, ground_truth)?;
    let nq = r.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, 100.0 * r.iter().filter(|&&x| x <= k).count() as f64 / nq))
        .collect();
    let median_rank = median(&mut r).expect("non-empty");
    Ok(RetrievalMetrics { recall, median_rank })
}
