use std::time::Instant;

use crate::classify::evaluate;
use crate::dataset::{DatasetManifest, LabelAudit, Split};
use crate::descriptors::DescriptorSource;
use crate::error::{Error, Result, StageContext};
use crate::scale_coding::{quantile_thresholds, Pooling, RepresentationMode};

use super::config::Experiment;
use super::run::{
    encode_instances, fit_vocabulary, pooling_for, score_representations, test_ids, train_representations,
};

/// One point of a sweep. `seconds` is wall-clock time for the point and is
/// kept out of the mAP table so that table stays reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub map: f64,
    pub seconds: f64,
}

/// Absolute scale coding with `T` partitions for each `T` in `counts`,
/// thresholds placed at grid quantiles. The vocabulary is fitted once.
pub fn sweep_partitions(
    manifest: &DatasetManifest,
    source: &dyn DescriptorSource,
    exp: &Experiment,
    counts: &[usize],
) -> Result<Vec<SweepRow>> {
    exp.validate()?;
    let grid = exp.grid.grid()?;
    let thresholds: Vec<Vec<f64>> = counts
        .iter()
        .map(|&t| quantile_thresholds(&grid, t))
        .collect::<Result<_>>()?;
    let vocab = fit_vocabulary(manifest, source, exp)?;
    let audit = LabelAudit::new();
    let mut encoded = Vec::with_capacity(counts.len());
    for th in &thresholds {
        let start = Instant::now();
        let pooling = Pooling::Absolute { thresholds: th.clone() };
        let train = encode_instances(&manifest.train, source, &grid, &vocab.model, exp, &pooling)?;
        let test = encode_instances(&manifest.test, source, &grid, &vocab.model, exp, &pooling)?;
        encoded.push((train, test, start.elapsed().as_secs_f64()));
    }
    let train_labels = audit.labels(manifest, Split::Train, "train");
    let mut models = Vec::with_capacity(encoded.len());
    for (train, _, _) in &encoded {
        let start = Instant::now();
        models.push((train_representations(train, &train_labels, manifest.num_categories(), exp)?, start.elapsed()));
    }
    let test_labels = audit.labels(manifest, Split::Test, "eval");
    let ids = test_ids(manifest);
    let mut rows = Vec::with_capacity(counts.len());
    for ((&t, (_, test, enc_secs)), (model, train_time)) in counts.iter().zip(encoded).zip(models) {
        let scores = score_representations(&model, &test)?;
        let report = evaluate("absolute", &manifest.categories, &ids, &scores, &test_labels, exp.ap_variant)
            .stage("eval")?;
        rows.push(SweepRow {
            value: t,
            map: report.map,
            seconds: enc_secs + train_time.as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Refits the vocabulary with each `K` and runs `mode` end to end.
pub fn sweep_components(
    manifest: &DatasetManifest,
    source: &dyn DescriptorSource,
    exp: &Experiment,
    mode: RepresentationMode,
    ks: &[usize],
) -> Result<Vec<SweepRow>> {
    exp.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("component counts must be positive".into()));
    }
    let grid = exp.grid.grid()?;
    let pooling = pooling_for(mode, &exp.thresholds, manifest.mean_box)?;
    let audit = LabelAudit::new();
    let mut fitted = Vec::with_capacity(ks.len());
    for &k in ks {
        let start = Instant::now();
        let exp_k = Experiment { k, ..exp.clone() };
        let vocab = fit_vocabulary(manifest, source, &exp_k)?;
        let train = encode_instances(&manifest.train, source, &grid, &vocab.model, &exp_k, &pooling)?;
        let test = encode_instances(&manifest.test, source, &grid, &vocab.model, &exp_k, &pooling)?;
        fitted.push((k, train, test, start.elapsed()));
    }
    let train_labels = audit.labels(manifest, Split::Train, "train");
    let mut models = Vec::with_capacity(fitted.len());
    for (_, train, _, _) in &fitted {
        let start = Instant::now();
        models.push((train_representations(train, &train_labels, manifest.num_categories(), exp)?, start.elapsed()));
    }
    let test_labels = audit.labels(manifest, Split::Test, "eval");
    let ids = test_ids(manifest);
    let mut rows = Vec::with_capacity(ks.len());
    for ((k, _, test, prep), (model, train_time)) in fitted.into_iter().zip(models) {
        let scores = score_representations(&model, &test)?;
        let report =
            evaluate(mode.name(), &manifest.categories, &ids, &scores, &test_labels, exp.ap_variant).stage("eval")?;
        rows.push(SweepRow {
            value: k,
            map: report.map,
            seconds: (prep + train_time).as_secs_f64(),
        });
    }
    Ok(rows)
}

/// `<key>,mAP` table.
pub fn sweep_table_csv(key: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{key},mAP\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.value, r.map));
    }
    out
}

/// `<key>,seconds` table.
pub fn timing_table_csv(key: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{key},seconds\n");
    for r in rows {
        out.push_str(&format!("{},{:.3}\n", r.value, r.seconds));
    }
    out
}
