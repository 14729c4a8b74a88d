use std::path::Path;

use crate::classify::{chance_map, evaluate, fuse_scores, score_all, train_ovr, EvalReport, LinearModel, SvmConfig};
use crate::dataset::{DatasetManifest, Instance, LabelAccess, LabelAudit, MeanBox, Split};
use crate::descriptors::{DescriptorSource, ScaleGrid};
use crate::encoding::{BowCoder, Coder, FisherCoder, FisherOptions, Normalization};
use crate::error::{Error, Result, StageContext};
use crate::matrix::Matrix;
use crate::scale_coding::{encode_batch, load_representation, EncodedRepresentation, Pooling, RepresentationMode};
use crate::vocabulary::{fit_gmm_traced, sample_training_descriptors, GmmConfig, GmmFit, GmmModel};

use super::config::{CoderKind, Experiment};

const CHANCE_TRIALS: usize = 200;

/// Samples train descriptors and fits the GMM vocabulary.
pub fn fit_vocabulary(manifest: &DatasetManifest, source: &dyn DescriptorSource, exp: &Experiment) -> Result<GmmFit> {
    let samples = sample_training_descriptors(manifest, source, exp.samples_per_image, exp.seed, exp.parallelism)
        .stage("sample")?;
    let cfg = GmmConfig {
        max_iter: exp.gmm_max_iter,
        seed: exp.seed,
        parallelism: exp.parallelism,
        ..GmmConfig::default()
    };
    fit_gmm_traced(&samples, exp.k, &cfg).stage("fit-gmm")
}

pub fn pooling_for(mode: RepresentationMode, thresholds: &[f64], mean_box: MeanBox) -> Result<Pooling> {
    match mode {
        RepresentationMode::Invariant => Ok(Pooling::Invariant),
        RepresentationMode::Absolute => Ok(Pooling::Absolute {
            thresholds: thresholds.to_vec(),
        }),
        RepresentationMode::Relative => Ok(Pooling::Relative {
            thresholds: thresholds.to_vec(),
            mean_box,
        }),
        RepresentationMode::External => Err(Error::Config(
            "fc-external representations are precomputed, not encoded".into(),
        )),
    }
}

/// Codes and pools every instance. All coders use improved normalization.
pub fn encode_instances(
    instances: &[Instance],
    source: &dyn DescriptorSource,
    grid: &ScaleGrid,
    model: &GmmModel,
    exp: &Experiment,
    pooling: &Pooling,
) -> Result<Vec<EncodedRepresentation>> {
    let fisher;
    let bow;
    let coder: &dyn Coder = match exp.coder {
        CoderKind::Fisher => {
            fisher = FisherCoder::new(model, FisherOptions::default());
            &fisher
        }
        CoderKind::Bow => {
            bow = BowCoder::from_gmm(model);
            &bow
        }
    };
    encode_batch(instances, source, grid, coder, Normalization::Improved, pooling, exp.parallelism).stage("encode")
}

/// Reads `<dir>/<instance_id>.fc-external.scrp` for every instance.
pub fn load_external(instances: &[Instance], dir: &Path) -> Result<Vec<EncodedRepresentation>> {
    instances
        .iter()
        .map(|inst| load_representation(dir, &inst.instance_id, RepresentationMode::External))
        .collect::<Result<_>>()
        .stage("encode")
}

/// Stacks representation vectors as rows.
pub fn feature_matrix(reps: &[EncodedRepresentation]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = reps.iter().map(|r| r.vector.as_slice()).collect();
    Matrix::from_rows(&rows)
}

fn svm_config(exp: &Experiment) -> SvmConfig {
    SvmConfig {
        c: exp.c,
        tol: exp.svm_tol,
        seed: exp.seed,
        parallelism: exp.parallelism,
        ..SvmConfig::default()
    }
}

pub fn train_representations(
    reps: &[EncodedRepresentation],
    labels: &[Vec<usize>],
    num_categories: usize,
    exp: &Experiment,
) -> Result<LinearModel> {
    let features = feature_matrix(reps).stage("train")?;
    train_ovr(&features, labels, num_categories, &svm_config(exp)).stage("train")
}

pub fn score_representations(model: &LinearModel, reps: &[EncodedRepresentation]) -> Result<Matrix> {
    let features = feature_matrix(reps).stage("eval")?;
    score_all(model, &features).stage("eval")
}

pub struct ModeResult {
    pub mode: RepresentationMode,
    pub train: Vec<EncodedRepresentation>,
    pub test: Vec<EncodedRepresentation>,
    pub model: LinearModel,
    /// Test scores, `test instances × categories`.
    pub scores: Matrix,
    pub report: EvalReport,
}

pub struct RunOutput {
    /// Absent when every mode is `fc-external`.
    pub vocabulary: Option<GmmFit>,
    pub modes: Vec<ModeResult>,
    pub fused: Option<EvalReport>,
    /// mAP of random scores on the same test labels.
    pub chance_map: f64,
    pub label_accesses: Vec<LabelAccess>,
}

impl RunOutput {
    pub fn mode(&self, mode: RepresentationMode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Every report, per mode first and the fused one last.
    pub fn reports(&self) -> impl Iterator<Item = &EvalReport> {
        self.modes.iter().map(|m| &m.report).chain(&self.fused)
    }
}

pub(crate) fn test_ids(manifest: &DatasetManifest) -> Vec<String> {
    manifest.test.iter().map(|i| i.instance_id.clone()).collect()
}

/// Vocabulary, encoding of every mode, training, evaluation and optional
/// fusion.
pub fn run(
    manifest: &DatasetManifest,
    source: &dyn DescriptorSource,
    exp: &Experiment,
    external_dir: Option<&Path>,
) -> Result<RunOutput> {
    exp.validate()?;
    let grid = exp.grid.grid()?;
    let audit = LabelAudit::new();
    let vocabulary = if exp.modes.iter().any(|&m| m != RepresentationMode::External) {
        Some(fit_vocabulary(manifest, source, exp)?)
    } else {
        None
    };

    let mut encoded = Vec::with_capacity(exp.modes.len());
    for &mode in &exp.modes {
        let pair = match (mode, &vocabulary) {
            (RepresentationMode::External, _) => {
                let dir = external_dir
                    .ok_or_else(|| Error::Config("mode fc-external needs an external representation directory".into()))?;
                (load_external(&manifest.train, dir)?, load_external(&manifest.test, dir)?)
            }
            (_, Some(vocab)) => {
                let pooling = pooling_for(mode, &exp.thresholds, manifest.mean_box)?;
                (
                    encode_instances(&manifest.train, source, &grid, &vocab.model, exp, &pooling)?,
                    encode_instances(&manifest.test, source, &grid, &vocab.model, exp, &pooling)?,
                )
            }
            (_, None) => unreachable!("vocabulary is fitted whenever a pooled mode is requested"),
        };
        encoded.push((mode, pair));
    }

    let train_labels = audit.labels(manifest, Split::Train, "train");
    let mut models = Vec::with_capacity(encoded.len());
    for (_, (train, _)) in &encoded {
        models.push(train_representations(train, &train_labels, manifest.num_categories(), exp)?);
    }

    let test_labels = audit.labels(manifest, Split::Test, "eval");
    let ids = test_ids(manifest);
    let mut modes = Vec::with_capacity(encoded.len());
    for ((mode, (train, test)), model) in encoded.into_iter().zip(models) {
        let scores = score_representations(&model, &test)?;
        let report =
            evaluate(mode.name(), &manifest.categories, &ids, &scores, &test_labels, exp.ap_variant).stage("eval")?;
        modes.push(ModeResult {
            mode,
            train,
            test,
            model,
            scores,
            report,
        });
    }

    let fused = if exp.fuse && modes.len() > 1 {
        let sets: Vec<&Matrix> = modes.iter().map(|m| &m.scores).collect();
        let scores = fuse_scores(&sets).stage("fuse")?;
        Some(evaluate("fused", &manifest.categories, &ids, &scores, &test_labels, exp.ap_variant).stage("fuse")?)
    } else {
        None
    };
    let chance = chance_map(
        &test_labels,
        manifest.num_categories(),
        exp.ap_variant,
        CHANCE_TRIALS,
        exp.seed,
    )
    .stage("eval")?;

    Ok(RunOutput {
        vocabulary,
        modes,
        fused,
        chance_map: chance,
        label_accesses: audit.accesses(),
    })
}
