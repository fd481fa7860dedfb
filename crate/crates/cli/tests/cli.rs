use std::path::Path;
use std::process::{Command, Output};

fn spikegrad(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikegrad"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--synthetic", "patterns", "--synthetic-train", "96", "--synthetic-test", "32",
    "--synthetic-classes", "4", "--arch", "scaling-3", "--timesteps", "3", "--batch-size", "16",
];

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--gamma", "2", "--out-dir", "run"]);
    args.extend_from_slice(extra);
    spikegrad(&args, dir)
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = spikegrad(&["eval", "--checkpoint", "nope.ckpt", "--synthetic", "patterns"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inverted_bracket_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["tune-gamma"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--gamma-lo", "10", "--gamma-hi", "5"]);
    assert_eq!(spikegrad(&args, dir.path()).status.code(), Some(2));
}

#[test]
fn calibration_needs_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &["--no-batchnorm", "--calib-samples", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_epochs_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), &["--epochs", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "metrics.csv", "model.ckpt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn timestep_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), &["--epochs", "1"]).status.success());
    let o = spikegrad(
        &[
            "eval", "--checkpoint", "run/model.ckpt", "--synthetic", "patterns", "--synthetic-train", "96",
            "--synthetic-test", "32", "--synthetic-classes", "4", "--sweep-timesteps", "5:40:5",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "timesteps,accuracy");
    assert_eq!(lines.len(), 9);
    assert!(lines[8].starts_with("40,"));
}

#[test]
fn single_spiking_layer_has_nothing_to_tune() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"{"name":"single","input_shape":[64],"layers":[
        {"kind":"dense","inputs":64,"outputs":16},
        {"kind":"spiking","neuron":{"threshold":1.0,"reset":"soft","beta":1.0,"gamma":1.0}},
        {"kind":"dense","inputs":16,"outputs":4},
        {"kind":"output_accumulator"}]}"#;
    std::fs::write(dir.path().join("single.json"), spec).unwrap();
    let o = spikegrad(
        &[
            "tune-gamma", "--arch", "single.json", "--synthetic", "clusters", "--synthetic-train", "64",
            "--synthetic-classes", "4", "--timesteps", "3", "--batch-size", "16", "--out-dir", "tune",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("nothing to balance"));
}

#[test]
fn diag_grad_writes_a_profile_per_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let o = spikegrad(
        &[
            "diag-grad", "--arch", "deep16", "--synthetic", "clusters", "--synthetic-train", "64",
            "--timesteps", "3", "--batch-size", "16", "--profile-batches", "2", "--gamma", "0,1,10",
            "--out-dir", "diag",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csvs = std::fs::read_dir(dir.path().join("diag")).unwrap().count();
    assert_eq!(csvs, 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));
}
