use std::path::Path;
use std::process::{Command, Output};

use qup_core::pipeline::evaluate::GenerationInfo;
use qup_core::pipeline::upsample::is_generated;
use qup_core::volume::DwiSet;

fn qup(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qup")).arg("--quiet").args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qup(dir, args);
    assert!(out.status.success(), "qup {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// The single error line: `error: kind=<kind> message="<text>"`.
fn error_line(out: &Output) -> (String, String) {
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let rest = lines[0].strip_prefix("error: kind=").unwrap();
    let (kind, message) = rest.split_once(" message=").unwrap();
    (kind.to_string(), serde_json::from_str(message).unwrap())
}

fn small_study(dir: &Path) {
    ok(dir, &["phantom", "--out", "ph", "--shape", "8x8x2", "--subjects", "3", "--directions", "15", "--seed", "1"]);
    ok(dir, &["dataset", "build", "--dwi", "ph", "--k-low", "9", "--refs", "3", "--out", "m.json"]);
}

#[test]
fn failures_print_one_parseable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (kind, message) = error_line(&qup(d, &["phantom", "--out", "x", "--shape", "4x4"]));
    assert_eq!(kind, "usage");
    assert!(message.contains("XxYxZ"), "{message}");

    small_study(d);
    let (kind, message) = error_line(&qup(d, &["train", "--method", "qgan", "--manifest", "m.json", "--out", "ck"]));
    assert_eq!(kind, "unknown_method");
    assert!(message.contains("known: cgan, diffusion, interp"), "{message}");

    let (kind, _) = error_line(&qup(d, &["dataset", "build", "--dwi", "ph", "--k-low", "2", "--refs", "3", "--out", "bad.json"]));
    assert_eq!(kind, "validation");

    let (kind, _) = error_line(&qup(d, &["train", "--manifest", "m.json", "--out", "ck"]));
    assert_eq!(kind, "config");

    let (kind, _) = error_line(&qup(d, &["evaluate", "--pred", "missing", "--truth", "ph", "--report", "r.json"]));
    assert_eq!(kind, "io");
}

#[test]
fn methods_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let listed = ok(tmp.path(), &["methods"]);
    let names: Vec<&str> = listed.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["cgan", "diffusion", "interp"]);
}

#[test]
fn interp_completion_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_study(d);
    ok(d, &["dataset", "export-low", "--manifest", "m.json", "--split", "test", "--out", "low"]);
    let low = DwiSet::read(&d.join("low/subject_02")).unwrap();
    assert_eq!(low.len(), 1 + 9);
    assert!(d.join("low/subject_02/targets.bvals").is_file());

    ok(d, &[
        "generate", "--method", "interp", "--low", "low/subject_02", "--targets", "low/subject_02/targets.bvecs",
        "--target-bvals", "low/subject_02/targets.bvals", "--out", "pred/subject_02",
    ]);
    let pred = DwiSet::read(&d.join("pred/subject_02")).unwrap();
    assert_eq!(pred.len(), 16);
    assert_eq!(pred.volumes.iter().filter(|v| is_generated(v)).count(), 6);
    let info = GenerationInfo::read(&d.join("pred/subject_02")).unwrap().unwrap();
    assert_eq!((info.method.as_str(), info.references, info.generated, info.passed_through), ("interp", 3, 6, 0));
    assert!(d.join("pred/subject_02/resolved.json").is_file());

    let table = ok(d, &["evaluate", "--pred", "pred", "--truth", "ph", "--report", "out/report.json", "--fa-png", "png"]);
    assert!(table.lines().nth(1).unwrap().starts_with("interp"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["references"], 3);
    assert_eq!(report["fa_error_per_subject"].as_array().unwrap().len(), 1);
    assert!(d.join("png/subject_02_pred_fa.png").is_file());
}

#[test]
fn acquired_targets_pass_through() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["phantom", "--out", "one", "--shape", "8x8x1", "--directions", "12", "--snr", "0"]);
    ok(d, &["generate", "--method", "interp", "--low", "one", "--targets", "one/bvecs", "--target-bvals", "one/bvals", "--out", "same"]);
    let (a, b) = (DwiSet::read(&d.join("one")).unwrap(), DwiSet::read(&d.join("same")).unwrap());
    assert_eq!(a, b);
    assert_eq!(GenerationInfo::read(&d.join("same")).unwrap().unwrap().passed_through, 13);
}

#[test]
fn checkpoint_and_method_must_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_study(d);
    std::fs::write(d.join("c.json"), r#"{"method": "diffusion", "steps": 1, "batch_size": 1, "preset": "toy"}"#).unwrap();
    let printed = ok(d, &["train", "--manifest", "m.json", "--config", "c.json", "--out", "ck"]);
    assert!(printed.trim().ends_with("checkpoint.json"));
    ok(d, &["dataset", "export-low", "--manifest", "m.json", "--subject", "subject_00", "--out", "low"]);
    let base = ["generate", "--checkpoint", "ck/checkpoint.json", "--low", "low", "--targets", "low/targets.bvecs", "--out", "g"];
    let (kind, _) = error_line(&qup(d, &[&base[..], &["--method", "cgan"]].concat()));
    assert_eq!(kind, "config");
    let (kind, _) = error_line(&qup(d, &[&base[..], &["--refs", "4"]].concat()));
    assert_eq!(kind, "config");
}
