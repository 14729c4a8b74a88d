use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// How the precision/recall curve is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApVariant {
    /// Mean of the precision at the rank of every positive.
    #[default]
    #[serde(rename = "all")]
    AllPoints,
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[serde(rename = "11pt")]
    ElevenPoint,
}

impl FromStr for ApVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all-points" => Ok(ApVariant::AllPoints),
            "11pt" | "eleven-point" => Ok(ApVariant::ElevenPoint),
            other => Err(Error::Config(format!("unknown AP variant '{other}' (expected all or 11pt)"))),
        }
    }
}

impl fmt::Display for ApVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApVariant::AllPoints => "all",
            ApVariant::ElevenPoint => "11pt",
        })
    }
}

/// Indices sorted by descending score; equal scores keep their input order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Average precision of `scores` against binary `positives`.
///
/// Returns `Ok(None)` when there is no positive, since AP is undefined then.
pub fn average_precision(scores: &[f64], positives: &[bool], variant: ApVariant) -> Result<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: positives.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let order = rank_order(scores);
    let mut tp = 0usize;
    // (recall, precision) at the rank of every positive
    let mut hits = Vec::with_capacity(n_pos);
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
            hits.push((tp as f64 / n_pos as f64, tp as f64 / (rank + 1) as f64));
        }
    }
    let ap = match variant {
        ApVariant::AllPoints => hits.iter().map(|h| h.1).sum::<f64>() / n_pos as f64,
        ApVariant::ElevenPoint => {
            // precision only peaks at positives, so the interpolated maximum
            // over recall >= t is attained at one of them
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    hits.iter()
                        .filter(|h| h.0 >= t - 1e-12)
                        .map(|h| h.1)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Ok(Some(ap))
}

/// `counts[true][predicted]` for single-label data, predicting the
/// highest-scoring category (lowest index on ties).
pub fn confusion_matrix(scores: &Matrix, labels: &[Vec<usize>]) -> Result<Vec<Vec<u64>>> {
    if scores.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.rows(),
            got: labels.len(),
        });
    }
    let c = scores.cols();
    let mut counts = vec![vec![0u64; c]; c];
    for (row, l) in scores.iter_rows().zip(labels) {
        let [truth] = l.as_slice() else {
            return Err(Error::Validation(format!(
                "confusion matrix needs exactly one label per instance, got {}",
                l.len()
            )));
        };
        if *truth >= c {
            return Err(Error::Validation(format!("label {truth} out of range for {c} categories")));
        }
        let mut best = 0;
        for (j, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = j;
            }
        }
        counts[*truth][best] += 1;
    }
    Ok(counts)
}

/// Late fusion: elementwise sum of score matrices of equal shape.
pub fn fuse_scores(sets: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = sets.first() else {
        return Err(Error::Config("nothing to fuse".into()));
    };
    let mut out = (*first).clone();
    for m in &sets[1..] {
        if m.rows() != out.rows() || m.cols() != out.cols() {
            return Err(Error::DimensionMismatch {
                expected: out.rows() * out.cols(),
                got: m.rows() * m.cols(),
            });
        }
        for i in 0..out.rows() {
            for (a, b) in out.row_mut(i).iter_mut().zip(m.row(i)) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// Expected mAP of uniformly random scores, estimated over `trials` draws.
pub fn chance_map(
    labels: &[Vec<usize>],
    num_categories: usize,
    variant: ApVariant,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let positives: Vec<Vec<bool>> = (0..num_categories)
        .map(|c| labels.iter().map(|l| l.contains(&c)).collect())
        .filter(|p: &Vec<bool>| p.iter().any(|&b| b))
        .collect();
    if positives.is_empty() || trials == 0 {
        return Err(Error::Validation("chance mAP needs a positive instance and at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        for p in &positives {
            let scores: Vec<f64> = (0..p.len()).map(|_| rng.random()).collect();
            total += average_precision(&scores, p, variant)?.unwrap_or(0.0);
        }
    }
    Ok(total / (trials * positives.len()) as f64)
}
