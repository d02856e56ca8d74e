//! Retrieval Recall@K and noise-filter quality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, Matrix};

fn unit_rows(m: &Matrix, what: &str) -> Result<Vec<Vec<f64>>> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let n = l2_norm(row);
            if n == 0.0 {
                Err(Error::Degenerate(format!("{what} row {r} has zero norm")))
            } else {
                Ok(row.iter().map(|v| v / n).collect())
            }
        })
        .collect()
}

/// Zero-based rank of gallery item `i` for query `i` by cosine similarity;
/// ties go to the lower gallery index.
pub fn true_ranks(queries: &Matrix, gallery: &Matrix) -> Result<Vec<usize>> {
    if queries.shape() != gallery.shape() {
        return Err(Error::shape(
            "recall_at_k",
            format!(
                "queries {:?} vs gallery {:?}",
                queries.shape(),
                gallery.shape()
            ),
        ));
    }
    let q = unit_rows(queries, "query")?;
    let g = unit_rows(gallery, "gallery")?;
    Ok(q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let own = dot(qi, &g[i]);
            g.iter()
                .enumerate()
                .filter(|&(j, gj)| {
                    let s = dot(qi, gj);
                    s > own || (s == own && j < i)
                })
                .count()
        })
        .collect())
}

/// Fraction of queries whose index-aligned gallery item ranks in the top `k`.
pub fn recall_at_k(queries: &Matrix, gallery: &Matrix, k: usize) -> Result<f64> {
    let n = queries.rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} outside 1..={n}")));
    }
    let ranks = true_ranks(queries, gallery)?;
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
}

/// Recall at 1, 10 and 50; `k` is clamped to the gallery size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r10: f64,
    pub r50: f64,
}

impl Recalls {
    pub fn compute(queries: &Matrix, gallery: &Matrix) -> Result<Self> {
        let n = queries.rows();
        if n == 0 {
            return Err(Error::Config("empty evaluation split".into()));
        }
        let ranks = true_ranks(queries, gallery)?;
        let at = |k: usize| ranks.iter().filter(|&&r| r < k.min(n)).count() as f64 / n as f64;
        Ok(Self {
            r1: at(1),
            r10: at(10),
            r50: at(50),
        })
    }

    pub fn average(&self) -> f64 {
        (self.r1 + self.r10 + self.r50) / 3.0
    }
}

/// Noise-detection quality; the positive class is "noisy" and a label of 0
/// predicts noisy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when nothing was predicted noisy (precision reported as 0).
    pub precision_defined: bool,
    /// False when no sample is truly noisy (recall reported as 0).
    pub recall_defined: bool,
}

/// `None` when ground truth is unavailable.
pub fn evaluate_filter(labels: &[bool], noisy: Option<&[bool]>) -> Result<Option<FilterQuality>> {
    let Some(noisy) = noisy else {
        return Ok(None);
    };
    if labels.len() != noisy.len() {
        return Err(Error::shape(
            "evaluate_filter",
            format!("{} labels vs {} truth flags", labels.len(), noisy.len()),
        ));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&label, &is_noisy) in labels.iter().zip(noisy) {
        match (!label, is_noisy) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fneg > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if recall_defined {
        tp as f64 / (tp + fneg) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Some(FilterQuality {
        precision,
        recall,
        f1,
        precision_defined,
        recall_defined,
    }))
}
