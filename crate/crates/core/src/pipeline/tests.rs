use std::fs;
use std::path::Path;

use super::commands::{self, Layout};
use super::*;
use crate::dataset::Split;
use crate::descriptors::synth::{synth_dataset, ScaleSignal, SynthConfig, SynthDataset};
use crate::scale_coding::{serialize_representation, EncodedRepresentation, RepresentationMode};

fn small(signal: ScaleSignal) -> SynthDataset {
    synth_dataset(&SynthConfig::new(3, 24, 5, signal)).unwrap()
}

fn small_experiment() -> Experiment {
    Experiment {
        k: 3,
        samples_per_image: 40,
        ..Experiment::default()
    }
}

fn on_disk(data: &SynthDataset, root: &Path) -> PipelineConfig {
    data.write(root.join("manifest.json"), root.join("descriptors")).unwrap();
    PipelineConfig {
        paths: Paths {
            manifest: root.join("manifest.json"),
            descriptors: root.join("descriptors"),
            model_dir: root.join("models"),
            output_dir: root.join("out"),
            external_dir: None,
        },
        experiment: small_experiment(),
    }
}

#[test]
fn synthetic_run_produces_reports_for_every_mode() {
    let data = small(ScaleSignal::Absolute);
    let out = run(&data.manifest, &data.store(), &small_experiment(), None).unwrap();
    assert_eq!(out.modes.len(), 3);
    assert!(out.fused.is_some());
    for r in out.reports() {
        assert!((0.0..=1.0).contains(&r.map), "{}: {}", r.name, r.map);
        let conf = r.confusion.as_ref().unwrap();
        assert_eq!(conf.iter().flatten().sum::<u64>(), data.manifest.test.len() as u64);
    }
    assert!(out.chance_map > 0.0 && out.chance_map < 1.0);
    let abs = out.mode(RepresentationMode::Absolute).unwrap().report.map;
    let inv = out.mode(RepresentationMode::Invariant).unwrap().report.map;
    assert!(abs > inv, "absolute {abs} vs invariant {inv}");
}

#[test]
fn test_labels_are_read_only_by_evaluation() {
    let data = small(ScaleSignal::Absolute);
    let out = run(&data.manifest, &data.store(), &small_experiment(), None).unwrap();
    let log: Vec<_> = out.label_accesses.iter().map(|a| (a.split, a.stage)).collect();
    assert_eq!(log, vec![(Split::Train, "train"), (Split::Test, "eval")]);
}

#[test]
fn single_partition_sweep_equals_invariant() {
    let data = small(ScaleSignal::Absolute);
    let exp = Experiment {
        modes: vec![RepresentationMode::Invariant],
        ..small_experiment()
    };
    let out = run(&data.manifest, &data.store(), &exp, None).unwrap();
    let rows = sweep_partitions(&data.manifest, &data.store(), &exp, &[1, 3, 21]).unwrap();
    assert_eq!(rows[0].value, 1);
    assert_eq!(rows[0].map, out.modes[0].report.map);
    assert!(sweep_partitions(&data.manifest, &data.store(), &exp, &[22]).is_err());
    assert!(sweep_partitions(&data.manifest, &data.store(), &exp, &[0]).is_err());
}

#[test]
fn component_sweep_runs_from_one_component() {
    let data = small(ScaleSignal::Relative);
    let rows = sweep_components(&data.manifest, &data.store(), &small_experiment(), RepresentationMode::Relative, &[1, 2]).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1, 2]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.map)));
    let again = sweep_components(&data.manifest, &data.store(), &small_experiment(), RepresentationMode::Relative, &[2]).unwrap();
    assert_eq!(again[0].map, rows[1].map);
    assert_eq!(sweep_table_csv("K", &rows).lines().next(), Some("K,mAP"));
}

#[test]
fn pipeline_writes_identical_bytes_twice() {
    let data = small(ScaleSignal::Absolute);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = on_disk(&data, a.path());
    let cfg_b = on_disk(&data, b.path());
    commands::run_pipeline(&cfg_a).unwrap();
    commands::run_pipeline(&cfg_b).unwrap();
    let names = ["invariant", "absolute", "relative", "fused"];
    for n in names {
        for path in [Layout::new(&cfg_a).report(n), Layout::new(&cfg_a).rankings(n), Layout::new(&cfg_a).scores(n)] {
            let other = b.path().join(path.strip_prefix(a.path()).unwrap());
            assert_eq!(fs::read(&path).unwrap(), fs::read(other).unwrap(), "{}", path.display());
        }
    }
    let summary = fs::read_to_string(Layout::new(&cfg_a).summary()).unwrap();
    assert_eq!(summary.lines().count(), 6);
    let log = fs::read_to_string(Layout::new(&cfg_a).label_log()).unwrap();
    assert_eq!(log, "train train\neval test\n");
}

#[test]
fn separate_stages_match_the_full_run() {
    let data = small(ScaleSignal::Relative);
    let dir = tempfile::tempdir().unwrap();
    let cfg = on_disk(&data, dir.path());
    let full = commands::run_pipeline(&cfg).unwrap();
    let fit = commands::fit_gmm(&cfg).unwrap();
    assert_eq!(&fit.model, &full.vocabulary.as_ref().unwrap().model);
    let mut names = Vec::new();
    for m in &full.modes {
        let written = commands::encode(&cfg, m.mode).unwrap();
        assert_eq!(written, data.manifest.train.len() + data.manifest.test.len());
        commands::train(&cfg, m.mode).unwrap();
        let report = commands::eval(&cfg, m.mode).unwrap();
        assert_eq!(report, m.report);
        names.push(m.mode.name().to_string());
    }
    let fused = commands::fuse(&cfg, &names).unwrap();
    assert_eq!(&fused, full.fused.as_ref().unwrap());
}

#[test]
fn external_representations_are_consumed() {
    let data = small(ScaleSignal::Absolute);
    let dir = tempfile::tempdir().unwrap();
    // a feature that carries the label, so the external mode is easy
    for inst in data.manifest.train.iter().chain(&data.manifest.test) {
        let mut v = vec![0.1; 4];
        v[inst.labels[0]] = 1.0;
        let rep = EncodedRepresentation::new(inst.instance_id.clone(), RepresentationMode::External, 1, 4, v).unwrap();
        serialize_representation(&rep, dir.path()).unwrap();
    }
    let exp = Experiment {
        modes: vec![RepresentationMode::External],
        ..small_experiment()
    };
    let out = run(&data.manifest, &data.store(), &exp, Some(dir.path())).unwrap();
    assert!(out.vocabulary.is_none());
    assert_eq!(out.modes[0].report.map, 1.0);
    assert!(run(&data.manifest, &data.store(), &exp, None).is_err());
}

#[test]
fn missing_descriptors_report_the_stage() {
    let data = small(ScaleSignal::Absolute);
    let dir = tempfile::tempdir().unwrap();
    let cfg = on_disk(&data, dir.path());
    fs::remove_file(dir.path().join("descriptors").join(format!("{}.scdf", data.manifest.train[0].instance_id))).unwrap();
    let err = commands::run_pipeline(&cfg).err().unwrap();
    assert!(err.to_string().contains("sample"), "{err}");
}

#[test]
fn bow_coder_runs() {
    let data = small(ScaleSignal::Absolute);
    let exp = Experiment {
        coder: CoderKind::Bow,
        modes: vec![RepresentationMode::Absolute],
        ..small_experiment()
    };
    let out = run(&data.manifest, &data.store(), &exp, None).unwrap();
    assert_eq!(out.modes[0].test[0].vector.len(), 3 * 3);
}
