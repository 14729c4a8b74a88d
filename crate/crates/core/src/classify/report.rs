use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, confusion_matrix, rank_order, ApVariant};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub instance_id: String,
    pub score: f64,
    pub positive: bool,
}

/// Test-set evaluation of one score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub ap_variant: ApVariant,
    pub categories: Vec<String>,
    /// `None` for categories without a positive test instance.
    pub ap: Vec<Option<f64>>,
    /// Mean over the categories whose AP is defined.
    pub map: f64,
    pub confusion: Option<Vec<Vec<u64>>>,
    #[serde(skip)]
    pub rankings: Vec<Vec<RankedEntry>>,
}

/// Computes per-category AP, mAP and, when every instance has exactly one
/// label, the confusion matrix.
pub fn evaluate(
    name: &str,
    categories: &[String],
    instance_ids: &[String],
    scores: &Matrix,
    labels: &[Vec<usize>],
    variant: ApVariant,
) -> Result<EvalReport> {
    if scores.cols() != categories.len() {
        return Err(Error::DimensionMismatch {
            expected: categories.len(),
            got: scores.cols(),
        });
    }
    if scores.rows() != labels.len() || scores.rows() != instance_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.rows(),
            got: labels.len().min(instance_ids.len()),
        });
    }
    let mut ap = Vec::with_capacity(categories.len());
    let mut rankings = Vec::with_capacity(categories.len());
    for c in 0..categories.len() {
        let column: Vec<f64> = scores.iter_rows().map(|r| r[c]).collect();
        let positives: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
        ap.push(average_precision(&column, &positives, variant)?);
        rankings.push(
            rank_order(&column)
                .into_iter()
                .map(|i| RankedEntry {
                    instance_id: instance_ids[i].clone(),
                    score: column[i],
                    positive: positives[i],
                })
                .collect(),
        );
    }
    let defined: Vec<f64> = ap.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Validation("no category has a positive test instance".into()));
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    let confusion = if labels.iter().all(|l| l.len() == 1) {
        Some(confusion_matrix(scores, labels)?)
    } else {
        None
    };
    Ok(EvalReport {
        name: name.to_string(),
        ap_variant: variant,
        categories: categories.to_vec(),
        ap,
        map,
        confusion,
        rankings,
    })
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Ranked lists as CSV with columns `category,rank,instance_id,score,positive`.
    pub fn rankings_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "rank", "instance_id", "score", "positive"])
            .expect("in-memory write");
        for (cat, list) in self.categories.iter().zip(&self.rankings) {
            for (rank, e) in list.iter().enumerate() {
                w.write_record([
                    cat.as_str(),
                    &(rank + 1).to_string(),
                    &e.instance_id,
                    &e.score.to_string(),
                    if e.positive { "1" } else { "0" },
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn save_rankings_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.rankings_csv()).map_err(|e| Error::io(path, e))
    }
}
