use std::path::Path;
use std::process::{Command, Output};

use proxnf::format;
use proxnf::study::{simulate, AcquisitionSpec, PhantomSpec};
use serde_json::Value;

fn proxnf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxnf")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Value {
    let out = proxnf(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let first = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(first.lines().next().unwrap()).unwrap()
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap()
}

fn small_phantom(dir: &Path) {
    ok(&["phantom", "--side", "24", "--frames", "8", "--out", "truth.stk", "--roi", "roi.json"], dir);
}

#[test]
fn evaluate_on_identical_stacks() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let echo = ok(
        &[
            "evaluate", "--estimate", "truth.stk", "--truth", "truth.stk", "--roi", "roi.json", "--out", "m.json",
            "--frames-csv", "f.csv",
        ],
        dir.path(),
    );
    assert_eq!(echo["command"], "evaluate");
    let m: Value = format::read_json(&dir.path().join("m.json")).unwrap();
    assert_eq!(m["rrmse"], 0.0);
    assert_eq!(m["ssim"], 1.0);
    assert_eq!(m["roi_rrmse"], 0.0);
    assert_eq!(m["lac_rrmse"], 0.0);
    let csv = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn files_match_in_memory_pipeline_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    let echo = ok(&["simulate", "--stack", "truth.stk", "--seed", "5", "--out", "data.msr"], dir.path());
    assert_eq!(echo["seed"], 5);

    let mut spec = PhantomSpec::desk();
    spec.grid.side = 24;
    spec.grid.frames = 8;
    let (truth, roi) = spec.generate().unwrap();
    let from_file = format::read_stack(&dir.path().join("truth.stk")).unwrap();
    assert_eq!(from_file, truth);
    let roi_file: format::RoiFile = format::read_json(&dir.path().join("roi.json")).unwrap();
    assert_eq!(roi_file.mask(truth.grid()).unwrap(), roi);

    let acq: AcquisitionSpec = serde_json::from_value(echo["config"].clone()).unwrap();
    let (meas, acquisition, _) = simulate(&truth, &acq).unwrap();
    let (read_meas, read_acq) = format::read_measurements(&dir.path().join("data.msr")).unwrap();
    assert_eq!(read_meas, meas);
    assert_eq!(read_acq, acquisition);
}

#[test]
fn reconstructions_write_documented_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_phantom(dir.path());
    ok(&["simulate", "--stack", "truth.stk", "--out", "data.msr"], dir.path());

    // the desk batch exceeds 8 frames; the resolved config is echoed anyway
    let out = proxnf(&["reconstruct-proxnf", "--measurements", "data.msr", "--out-dir", "unused"], dir.path());
    assert!(error_of(&out)["message"].as_str().unwrap().contains("batch"));
    let echo: Value = serde_json::from_slice(&out.stdout).unwrap();
    let mut cfg = echo["config"].clone();
    cfg["prox"]["max_iterations"] = 3.into();
    cfg["prox"]["batch"] = 2.into();
    cfg["prox"]["prox"]["adam"]["steps"] = 5.into();
    std::fs::write(dir.path().join("prox.json"), cfg.to_string()).unwrap();
    ok(
        &[
            "reconstruct-proxnf", "--measurements", "data.msr", "--config", "prox.json", "--truth", "truth.stk", "--roi",
            "roi.json", "--out-dir", "px",
        ],
        dir.path(),
    );
    let px = dir.path().join("px");
    let trace = std::fs::read_to_string(px.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    assert!(!trace.contains("elapsed"));
    assert_eq!(std::fs::read_to_string(px.join("timing.csv")).unwrap().lines().count(), 4);
    let (field, _) = format::read_checkpoint(&px.join("field.ckp")).unwrap();
    assert_eq!(field.render().unwrap(), format::read_stack(&px.join("stack.stk")).unwrap());
    let m: Value = format::read_json(&px.join("metrics.json")).unwrap();
    assert!(m["metrics"]["rrmse"].as_f64().unwrap() > 0.0);

    std::fs::write(dir.path().join("nn.json"), r#"{"fista":{"nuclear_weight":0.0,"max_iterations":5,"tolerance":1e-6,"restart":true,"divergence_factor":10.0,"sigma":null},"nuclear_fraction":0.01}"#).unwrap();
    ok(&["reconstruct-nn", "--measurements", "data.msr", "--config", "nn.json", "--out-dir", "nn"], dir.path());
    let m: Value = format::read_json(&dir.path().join("nn/metrics.json")).unwrap();
    assert!(m["metrics"].is_null());
    assert!(m["solver"]["nuclear_weight"].as_f64().unwrap() > 0.0);
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = proxnf(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"], "usage");

    small_phantom(dir.path());
    ok(&["simulate", "--stack", "truth.stk", "--out", "data.msr"], dir.path());
    let out = proxnf(
        &[
            "evaluate", "--estimate", "data.msr", "--truth", "truth.stk", "--roi", "roi.json", "--out", "m.json",
            "--frames-csv", "f.csv",
        ],
        dir.path(),
    );
    let err = error_of(&out);
    assert_eq!(err["error"], "bad_magic");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("offset") && msg.contains("msr1"), "{msg}");

    let out = proxnf(&["embed", "--stack", "missing.stk", "--out", "a", "--metrics", "b"], dir.path());
    assert!(error_of(&out)["message"].as_str().unwrap().contains("missing.stk"));
}
