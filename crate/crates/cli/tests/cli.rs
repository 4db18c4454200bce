use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mfqp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfqp")).args(args).output().expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn no_staging_left(dir: &Path) -> bool {
    fs::read_dir(dir).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().contains("staging"))
}

const COUNTEREXAMPLE: &str = "
[model]
model = mm1
lambda_f = 1
lambda_b = 2

[experiment]
experiment = counterexample
K_list = 20, 60
horizons = 1
";

#[test]
fn version_subcommand() {
    let out = mfqp(&["version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("mfqp "));
}

#[test]
fn validate_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write_cfg(dir.path(), "ok.cfg", COUNTEREXAMPLE);
    let out = mfqp(&["validate", s(&ok)]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["problems"].as_array().unwrap().len(), 0);

    let zero = write_cfg(
        dir.path(),
        "zero.cfg",
        "[model]\nmodel = mm1\nlambda_f = 1\nlambda_b = 2\n[experiment]\nexperiment = rate_curve\nN_list = 0, 10\nsamples_per_N = 10\nseed = 1\n",
    );
    let out = mfqp(&["validate", s(&zero)]);
    assert_eq!(out.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["problems"].as_array().unwrap().iter().any(|p| p["location"] == "experiment.N_list"));

    let interacting = write_cfg(
        dir.path(),
        "int.cfg",
        &COUNTEREXAMPLE.replace("model = mm1\nlambda_f = 1\nlambda_b = 2", "model = interacting_wlan\nkappa = 0.5"),
    );
    let report: Value = serde_json::from_slice(&mfqp(&["validate", s(&interacting)]).stdout).unwrap();
    assert!(report["problems"].as_array().unwrap().iter().any(|p| p["location"] == "model.model"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = mfqp(&["validate", s(&path)]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&out.stdout));
        seen += 1;
    }
    assert_eq!(seen, 6);
}

#[test]
fn counterexample_run_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", COUNTEREXAMPLE);
    let out_dir = dir.path().join("out");
    let out = mfqp(&["run", s(&cfg), "--output", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("counterexample.csv")).unwrap();
    assert!(csv.starts_with("K,entropy,theta_moment,horizon,test_function,n,lower_bound\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "counterexample");
    assert_eq!(manifest["config_text"], COUNTEREXAMPLE);
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(manifest["version"].is_string());
    assert!(no_staging_left(dir.path()));

    // The directory now exists, so a second run into it is refused.
    let again = mfqp(&["run", s(&cfg), "--output", s(&out_dir)]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn malformed_config_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "[model]\nmodel = mm1\nthis is not a pair\n");
    let out_dir = dir.path().join("out");
    let out = mfqp(&["run", s(&cfg), "--output", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["reason"], "invalid_config");
    assert!(!out_dir.exists());
    assert!(no_staging_left(dir.path()));
}

#[test]
fn numeric_failure_exits_three_and_cleans_up() {
    let dir = tempfile::tempdir().unwrap();
    // Two states cannot hold an interacting system for long.
    let cfg = write_cfg(
        dir.path(),
        "t.cfg",
        "[model]\nmodel = interacting_wlan\nkappa = 0.5\nz_max = 2\n[experiment]\nexperiment = tightness_audit\nN = 50\nhorizon = 200\nburn_in = 10\nseed = 1\n",
    );
    let out_dir = dir.path().join("out");
    let out = mfqp(&["run", s(&cfg), "--output", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["reason"], "truncation_overflow");
    assert!(!out_dir.exists());
    assert!(no_staging_left(dir.path()));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "r.cfg",
        "[model]\nmodel = mm1\nlambda_f = 1\nlambda_b = 2\nz_max = 20\n[experiment]\nexperiment = rate_curve\nN_list = 10, 20\nsamples_per_N = 30000\nseed = 3\nradius = 0.4\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(mfqp(&["run", s(&cfg), "--output", s(&a), "--threads", "1"]).status.success());
    assert!(mfqp(&["run", s(&cfg), "--output", s(&b), "--threads", "4"]).status.success());
    let ca = fs::read(a.join("rate_curve.csv")).unwrap();
    assert_eq!(ca, fs::read(b.join("rate_curve.csv")).unwrap());
    let text = String::from_utf8(ca).unwrap();
    assert!(text.starts_with("N,event,p_hat,ci_low,ci_high,rate,seed,algorithm\n"));
    assert!(text.lines().nth(1).unwrap().ends_with(",3,ChaCha8"));
}

#[test]
fn remaining_experiments_run() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("mve", "model = interacting_wlan\nkappa = 0.5\nz_max = 20", "experiment = mve_audit\nhorizon = 30\nn_samples = 3\nseed = 2", "b2_audit.csv"),
        (
            "qp",
            "model = wlan_decay\nlambda_f = 1\nlambda_b = 1\nz_max = 15",
            "experiment = quasipotential_bounds\nn_targets = 2\nseed = 4",
            "bounds.csv",
        ),
        ("dual", "model = mm1\nlambda_f = 1\nlambda_b = 2\nz_max = 6", "experiment = duality_check\nn_trajectories = 2\nseed = 5", "duality.csv"),
        (
            "tight",
            "model = interacting_wlan\nkappa = 0.5\nz_max = 40",
            "experiment = tightness_audit\nN = 10\nhorizon = 300\nseed = 6",
            "tightness.csv",
        ),
    ];
    for (name, model, exp, file) in cases {
        let cfg = write_cfg(dir.path(), &format!("{name}.cfg"), &format!("[model]\n{model}\n[experiment]\n{exp}\n"));
        let out_dir = dir.path().join(name);
        let out = mfqp(&["run", s(&cfg), "--output", s(&out_dir)]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join(file).exists(), "{name}");
        assert!(out_dir.join("manifest.json").exists(), "{name}");
    }
    let bounds = fs::read_to_string(dir.path().join("qp/bounds.csv")).unwrap();
    assert!(bounds.contains("upper bound (unverified gap)"));
    assert!(dir.path().join("qp/target_000.json").exists());
    let dual: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("dual/manifest.json")).unwrap()).unwrap();
    assert_eq!(dual["summary"]["within_tolerance"], true);
}
