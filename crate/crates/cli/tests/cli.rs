use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "generator.image_size=32",
    "generator.train=16",
    "generator.val=8",
    "generator.test=8",
    "generator.radius_min=3",
    "generator.radius_max=5",
    "classifier.epochs=2",
    "classifier.batch_size=8",
    "saliency.epochs=2",
    "saliency.batch_size=8",
    "tau_steps=11",
];

fn masd(stage: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_masd"));
    cmd.args(stage).arg("--out").arg(out);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap()
}

fn events(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stderr).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn usage_errors_exit_2_with_json() {
    let out = Command::new(env!("CARGO_BIN_EXE_masd")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
    assert!(out.stdout.is_empty());
}

#[test]
fn help_exits_0() {
    let out = Command::new(env!("CARGO_BIN_EXE_masd")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn bad_override_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = masd(&["gen-data", "--set", "dice_min=0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("dice_min"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = masd(&["gen-data", "--config", "/nonexistent/cfg.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("/nonexistent/cfg.json"));
}

#[test]
fn evaluate_before_infer_names_infer() {
    let dir = tempfile::tempdir().unwrap();
    assert!(masd(&["gen-data"], dir.path()).status.success());
    let out = masd(&["evaluate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"], "prerequisite");
    assert_eq!(e["stage"], "infer");
}

#[test]
fn end_to_end_run_leaves_curves_and_skips_reruns() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-data", "train-classifier", "train-saliency", "infer", "evaluate"] {
        let out = masd(&[stage], dir.path());
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty());
    }
    for scenario in ["all", "c_plus"] {
        for f in ["froc.csv", "froc.svg"] {
            assert!(dir.path().join("eval").join(scenario).join(f).is_file());
        }
    }
    let again = masd(&["gen-data"], dir.path());
    assert!(again.status.success());
    assert!(events(&again).iter().any(|e| e["event"] == "skipped"));

    let quiet = masd(&["infer", "--quiet"], dir.path());
    assert!(quiet.status.success());
    assert!(quiet.stderr.is_empty());
}

#[test]
fn lambdas_take_exactly_four_valid_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = masd(&["gen-data", "--lambdas", "0.1,2,0.3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = masd(&["gen-data", "--lambdas", "0.1,-2,0.3,2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("weights"));
    let out = masd(&["gen-data", "--lambdas", "0.1,3,1,2.5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
