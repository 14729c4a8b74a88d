//! File-backed pipeline stages.
//!
//! Artifact layout:
//!
//! ```text
//! <model_dir>/gmm.json
//! <model_dir>/svm.<mode>.json
//! <output_dir>/representations/<instance_id>.<mode>.scrp
//! <output_dir>/<name>.report.json      per-category AP, mAP, confusion
//! <output_dir>/<name>.rankings.csv     ranked test instances per category
//! <output_dir>/<name>.scores.csv       raw test scores, input to fusion
//! <output_dir>/summary.csv             name,mAP for every report and chance
//! <output_dir>/label-access.log        which stage read which split
//! <output_dir>/sweep-partitions.csv    T,mAP
//! <output_dir>/sweep-k.csv             K,mAP
//! ```
//!
//! Sweep timings go to `*.timing.csv` next to the tables.

use std::fs;
use std::path::{Path, PathBuf};

use crate::classify::{evaluate, fuse_scores, EvalReport, LinearModel};
use crate::dataset::{load_manifest, DatasetManifest, LabelAudit, Split};
use crate::descriptors::DescriptorDir;
use crate::error::{Error, Result, StageContext};
use crate::matrix::Matrix;
use crate::scale_coding::{load_representation, serialize_representation, EncodedRepresentation, RepresentationMode};
use crate::vocabulary::{GmmFit, GmmModel};

use super::config::PipelineConfig;
use super::run::{
    encode_instances, fit_vocabulary, pooling_for, run, score_representations, test_ids, train_representations,
    RunOutput,
};
use super::sweep::{sweep_components, sweep_partitions, sweep_table_csv, timing_table_csv, SweepRow};

/// Where each artifact lives.
#[derive(Debug, Clone)]
pub struct Layout {
    model_dir: PathBuf,
    output_dir: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Layout {
            model_dir: cfg.paths.model_dir.clone(),
            output_dir: cfg.paths.output_dir.clone(),
        }
    }

    pub fn gmm(&self) -> PathBuf {
        self.model_dir.join("gmm.json")
    }

    pub fn svm(&self, mode: RepresentationMode) -> PathBuf {
        self.model_dir.join(format!("svm.{mode}.json"))
    }

    pub fn representations(&self) -> PathBuf {
        self.output_dir.join("representations")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.output_dir.join(format!("{name}.report.json"))
    }

    pub fn rankings(&self, name: &str) -> PathBuf {
        self.output_dir.join(format!("{name}.rankings.csv"))
    }

    pub fn scores(&self, name: &str) -> PathBuf {
        self.output_dir.join(format!("{name}.scores.csv"))
    }

    pub fn summary(&self) -> PathBuf {
        self.output_dir.join("summary.csv")
    }

    pub fn label_log(&self) -> PathBuf {
        self.output_dir.join("label-access.log")
    }

    pub fn sweep(&self, name: &str) -> PathBuf {
        self.output_dir.join(format!("{name}.csv"))
    }

    pub fn sweep_timing(&self, name: &str) -> PathBuf {
        self.output_dir.join(format!("{name}.timing.csv"))
    }

    fn ensure_dirs(&self) -> Result<()> {
        for dir in [&self.model_dir, &self.output_dir] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_inputs(cfg: &PipelineConfig) -> Result<(DatasetManifest, DescriptorDir)> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.paths.manifest).stage("load")?;
    Ok((manifest, DescriptorDir::new(&cfg.paths.descriptors)))
}

/// `instance_id,<category>...` with one row per test instance.
pub fn scores_csv(ids: &[String], categories: &[String], scores: &Matrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once("instance_id").chain(categories.iter().map(String::as_str)).collect();
    w.write_record(&header).expect("in-memory write");
    for (id, row) in ids.iter().zip(scores.iter_rows()) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(f64::to_string));
        w.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Parses a table written by [`scores_csv`] into instance ids and scores.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let mut fields = record.iter();
        ids.push(fields.next().unwrap_or_default().to_string());
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let matrix = Matrix::from_rows(&rows).map_err(|e| parse_err(e.to_string()))?;
    Ok((ids, matrix))
}

fn write_report(layout: &Layout, report: &EvalReport, ids: &[String], scores: &Matrix) -> Result<()> {
    report.save_json(layout.report(&report.name))?;
    report.save_rankings_csv(layout.rankings(&report.name))?;
    write(&layout.scores(&report.name), scores_csv(ids, &report.categories, scores))
}

/// Samples descriptors, fits the vocabulary and writes `gmm.json`.
pub fn fit_gmm(cfg: &PipelineConfig) -> Result<GmmFit> {
    let (manifest, source) = load_inputs(cfg)?;
    let fit = fit_vocabulary(&manifest, &source, &cfg.experiment)?;
    let layout = Layout::new(cfg);
    layout.ensure_dirs()?;
    fit.model.save(layout.gmm())?;
    Ok(fit)
}

/// Encodes train and test instances with the saved vocabulary. Returns the
/// number of representations written.
pub fn encode(cfg: &PipelineConfig, mode: RepresentationMode) -> Result<usize> {
    let (manifest, source) = load_inputs(cfg)?;
    let layout = Layout::new(cfg);
    let exp = &cfg.experiment;
    let model = GmmModel::load(layout.gmm()).stage("encode")?;
    let pooling = pooling_for(mode, &exp.thresholds, manifest.mean_box)?;
    let grid = exp.grid.grid()?;
    let dir = layout.representations();
    let mut written = 0;
    for split in [Split::Train, Split::Test] {
        let reps = encode_instances(manifest.split(split), &source, &grid, &model, exp, &pooling)?;
        for rep in &reps {
            serialize_representation(rep, &dir)?;
        }
        written += reps.len();
    }
    Ok(written)
}

fn load_split(cfg: &PipelineConfig, manifest: &DatasetManifest, split: Split, mode: RepresentationMode) -> Result<Vec<EncodedRepresentation>> {
    let dir = match (mode, &cfg.paths.external_dir) {
        (RepresentationMode::External, Some(dir)) => dir.clone(),
        (RepresentationMode::External, None) => {
            return Err(Error::Config("mode fc-external needs paths.external_dir".into()))
        }
        _ => Layout::new(cfg).representations(),
    };
    manifest
        .split(split)
        .iter()
        .map(|inst| load_representation(&dir, &inst.instance_id, mode))
        .collect()
}

/// Trains one-vs-rest SVMs on the stored train representations.
pub fn train(cfg: &PipelineConfig, mode: RepresentationMode) -> Result<LinearModel> {
    let (manifest, _) = load_inputs(cfg)?;
    let reps = load_split(cfg, &manifest, Split::Train, mode).stage("train")?;
    let audit = LabelAudit::new();
    let labels = audit.labels(&manifest, Split::Train, "train");
    let model = train_representations(&reps, &labels, manifest.num_categories(), &cfg.experiment)?;
    let layout = Layout::new(cfg);
    layout.ensure_dirs()?;
    model.save(layout.svm(mode))?;
    Ok(model)
}

/// Scores the stored test representations and writes the report, ranked
/// lists and raw scores.
pub fn eval(cfg: &PipelineConfig, mode: RepresentationMode) -> Result<EvalReport> {
    let (manifest, _) = load_inputs(cfg)?;
    let layout = Layout::new(cfg);
    let model = LinearModel::load(layout.svm(mode)).stage("eval")?;
    let reps = load_split(cfg, &manifest, Split::Test, mode).stage("eval")?;
    let scores = score_representations(&model, &reps)?;
    let audit = LabelAudit::new();
    let labels = audit.labels(&manifest, Split::Test, "eval");
    let ids = test_ids(&manifest);
    let report = evaluate(mode.name(), &manifest.categories, &ids, &scores, &labels, cfg.experiment.ap_variant)
        .stage("eval")?;
    layout.ensure_dirs()?;
    write_report(&layout, &report, &ids, &scores)?;
    Ok(report)
}

/// Sums the saved score tables of `names` and evaluates the result as
/// `fused`.
pub fn fuse(cfg: &PipelineConfig, names: &[String]) -> Result<EvalReport> {
    let (manifest, _) = load_inputs(cfg)?;
    let layout = Layout::new(cfg);
    let ids = test_ids(&manifest);
    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let path = layout.scores(name);
        let (got, scores) = read_scores_csv(&path).stage("fuse")?;
        if got != ids {
            return Err(Error::Validation(format!(
                "{} does not list the manifest's test instances in order",
                path.display()
            ))
            .in_stage("fuse"));
        }
        tables.push(scores);
    }
    let refs: Vec<&Matrix> = tables.iter().collect();
    let scores = fuse_scores(&refs).stage("fuse")?;
    let audit = LabelAudit::new();
    let labels = audit.labels(&manifest, Split::Test, "eval");
    let report =
        evaluate("fused", &manifest.categories, &ids, &scores, &labels, cfg.experiment.ap_variant).stage("fuse")?;
    write_report(&layout, &report, &ids, &scores)?;
    Ok(report)
}

/// Runs every stage and writes every artifact.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    let (manifest, source) = load_inputs(cfg)?;
    let out = run(&manifest, &source, &cfg.experiment, cfg.paths.external_dir.as_deref())?;
    let layout = Layout::new(cfg);
    layout.ensure_dirs()?;
    if let Some(vocab) = &out.vocabulary {
        vocab.model.save(layout.gmm())?;
    }
    let ids = test_ids(&manifest);
    let mut summary = String::from("name,mAP\n");
    for m in &out.modes {
        m.model.save(layout.svm(m.mode))?;
        if m.mode != RepresentationMode::External {
            for rep in m.train.iter().chain(&m.test) {
                serialize_representation(rep, layout.representations())?;
            }
        }
        write_report(&layout, &m.report, &ids, &m.scores)?;
        summary.push_str(&format!("{},{}\n", m.report.name, m.report.map));
    }
    if let Some(fused) = &out.fused {
        let sets: Vec<&Matrix> = out.modes.iter().map(|m| &m.scores).collect();
        write_report(&layout, fused, &ids, &fuse_scores(&sets)?)?;
        summary.push_str(&format!("fused,{}\n", fused.map));
    }
    summary.push_str(&format!("chance,{}\n", out.chance_map));
    write(&layout.summary(), summary)?;
    let log: String = out
        .label_accesses
        .iter()
        .map(|a| format!("{} {:?}\n", a.stage, a.split).to_lowercase())
        .collect();
    write(&layout.label_log(), log)?;
    Ok(out)
}

fn write_sweep(layout: &Layout, name: &str, key: &str, rows: &[SweepRow]) -> Result<()> {
    layout.ensure_dirs()?;
    write(&layout.sweep(name), sweep_table_csv(key, rows))?;
    write(&layout.sweep_timing(name), timing_table_csv(key, rows))
}

/// Writes `sweep-partitions.csv` (`T,mAP`).
pub fn sweep_partitions_cmd(cfg: &PipelineConfig, counts: &[usize]) -> Result<Vec<SweepRow>> {
    let (manifest, source) = load_inputs(cfg)?;
    let rows = sweep_partitions(&manifest, &source, &cfg.experiment, counts)?;
    write_sweep(&Layout::new(cfg), "sweep-partitions", "T", &rows)?;
    Ok(rows)
}

/// Writes `sweep-k.csv` (`K,mAP`).
pub fn sweep_components_cmd(cfg: &PipelineConfig, mode: RepresentationMode, ks: &[usize]) -> Result<Vec<SweepRow>> {
    let (manifest, source) = load_inputs(cfg)?;
    let rows = sweep_components(&manifest, &source, &cfg.experiment, mode, ks)?;
    write_sweep(&Layout::new(cfg), "sweep-k", "K", &rows)?;
    Ok(rows)
}
