use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scalecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalecode"))
        .args(args)
        .env_remove("SCALECODE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scalecode(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(root: &Path) {
    ok(&["synth", "--out", root.to_str().unwrap(), "--classes", "3", "--per-class", "24", "--seed", "3"]);
}

fn paths(root: &Path) -> Vec<String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    vec![
        "--manifest".into(),
        p("manifest.json"),
        "--descriptors".into(),
        p("descriptors"),
        "--model-dir".into(),
        p("models"),
        "--output-dir".into(),
        p("out"),
        "--k".into(),
        "3".into(),
        "--samples-per-image".into(),
        "40".into(),
    ]
}

fn with<'a>(head: &[&'a str], tail: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(tail.iter().map(String::as_str)).collect()
}

#[test]
fn run_writes_reports_for_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let p = paths(dir.path());
    let stdout = ok(&with(&["run"], &p));
    for name in ["invariant", "absolute", "relative", "fused", "chance"] {
        assert!(stdout.contains(name), "{stdout}");
    }
    let out = dir.path().join("out");
    for file in ["absolute.report.json", "absolute.rankings.csv", "fused.scores.csv", "summary.csv", "label-access.log"] {
        assert!(out.join(file).exists(), "{file}");
    }
    assert!(dir.path().join("models/gmm.json").exists());
    let report = fs::read_to_string(out.join("relative.report.json")).unwrap();
    assert!(report.contains("\"map\""));
}

#[test]
fn separate_stages_reproduce_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let p = paths(dir.path());
    ok(&with(&["run", "--mode", "invariant,absolute"], &p));
    let out = dir.path().join("out");
    let before = fs::read(out.join("absolute.report.json")).unwrap();
    let fused_before = fs::read(out.join("fused.report.json")).unwrap();
    ok(&with(&["fit-gmm"], &p));
    for mode in ["invariant", "absolute"] {
        ok(&with(&["encode", "--mode", mode], &p));
        ok(&with(&["train", "--mode", mode], &p));
        ok(&with(&["eval", "--mode", mode], &p));
    }
    ok(&with(&["fuse", "--inputs", "invariant,absolute"], &p));
    assert_eq!(fs::read(out.join("absolute.report.json")).unwrap(), before);
    assert_eq!(fs::read(out.join("fused.report.json")).unwrap(), fused_before);
}

#[test]
fn sweeps_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let p = paths(dir.path());
    ok(&with(&["sweep-partitions", "--counts", "1,3,21"], &p));
    let table = fs::read_to_string(dir.path().join("out/sweep-partitions.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "T,mAP");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));
    ok(&with(&["sweep-k", "--ks", "1,2"], &p));
    let table = fs::read_to_string(dir.path().join("out/sweep-k.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("K,mAP"));
    assert!(dir.path().join("out/sweep-k.timing.csv").exists());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = dir.path().join("experiment.toml");
    fs::write(
        &config,
        "[paths]\nmanifest = \"manifest.json\"\ndescriptors = \"descriptors\"\nmodel_dir = \"m\"\noutput_dir = \"o\"\n\n[experiment]\nk = 2\nsamples_per_image = 30\nmodes = [\"absolute\"]\nap_variant = \"11pt\"\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    ok(&["run", "--config", cfg, "--k", "3", "--thresholds", "1.4"]);
    let model = fs::read_to_string(dir.path().join("m/gmm.json")).unwrap();
    assert!(model.contains("\"K\": 3"), "flag should win over file");
    let report = fs::read_to_string(dir.path().join("o/absolute.report.json")).unwrap();
    assert!(report.contains("\"ap_variant\": \"11pt\""));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut p = paths(dir.path());
    p.truncate(8);

    let config_err = scalecode(&with(&["run", "--thresholds", "1.8,1.1"], &p));
    assert_eq!(config_err.status.code(), Some(2));
    let zero_k = scalecode(&with(&["fit-gmm", "--k", "0"], &p));
    assert_eq!(zero_k.status.code(), Some(2));
    let missing = scalecode(&["fit-gmm", "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(missing.status.code(), Some(3));
    let too_many = scalecode(&with(&["fit-gmm", "--k", "5000", "--samples-per-image", "1"], &p));
    assert_eq!(too_many.status.code(), Some(4), "{}", String::from_utf8_lossy(&too_many.stderr));
    let usage = scalecode(&["encode"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn toy_extraction_feeds_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let root = dir.path();
    let toy = root.join("toy");
    ok(&[
        "extract-toy",
        "--manifest",
        root.join("manifest.json").to_str().unwrap(),
        "--out",
        toy.to_str().unwrap(),
        "--grid",
        "0.5,0.25,3",
        "--stride",
        "16",
    ]);
    assert_eq!(fs::read_dir(&toy).unwrap().count(), 72);
    let mut p = paths(root);
    p[3] = toy.to_string_lossy().into_owned();
    let stdout = ok(&with(&["run", "--grid", "0.5,0.25,3", "--thresholds", "0.6", "--sequential"], &p));
    assert!(stdout.contains("absolute"));
}
