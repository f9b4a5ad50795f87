use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driftwt"))
}

#[test]
fn selftest_exits_cleanly() {
    let out = bin().arg("selftest").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
}

#[test]
fn unknown_estimator_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "name = \"x\"\n\n[train]\nestimator = \"kmmm\"\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.estimator") && err.contains("line 4"), "{err}");

    let out = bin().args(["train", "--estimator", "kmmm"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--estimator"));
}

#[test]
fn train_and_profile_write_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.toml");
    std::fs::write(
        &cfg,
        r#"
seeds = [1]
[dataset]
kind = "ring"
classes = 3
dim = 2
radius = 2.0
std = 0.7
n_train = 300
n_val = 30
n_test = 90
[train]
epochs = 3
batch_size = 60
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let status = bin().args(["train", "--transform", "hidden", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap().status;
    assert!(status.success());
    let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert!(agg.lines().nth(1).unwrap().starts_with("adiw_kmm_hidden,1,1,"), "{agg}");
    assert!(out.join("trial_seed1.json").is_file());

    let prof = dir.path().join("prof");
    let o = bin().args(["profile", "--baseline", "diw", "--config"]).arg(&cfg).arg("--out").arg(&prof).output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("# wall-clock time only"));
    assert!(text.contains("Estimate weights"));
    assert!(prof.join("profile.json").is_file());
}

#[test]
fn missing_dataset_is_reported() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}
