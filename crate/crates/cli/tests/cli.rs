use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn trackbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trackbench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn design_lqi_writes_gains_and_margins() {
    let dir = tempfile::tempdir().unwrap();
    let out = trackbench(&["design-lqi", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gains = read_json(&dir.path().join("lqi_gains.json"));
    let k = gains["k_lqr"].as_array().unwrap();
    assert!((k[0].as_f64().unwrap() - 5.242609833003517).abs() < 1e-6);
    assert!((gains["k_i"].as_f64().unwrap() + 10f64.sqrt()).abs() < 1e-6);
    assert!(gains["care_residual"].as_f64().unwrap() < 1e-9);
    let margins = read_json(&dir.path().join("lqi_margins.json"));
    assert!(margins["sampled"]["gm_db"].is_number());
    assert_eq!(margins["continuous"]["gm_db"], "inf");
}

#[test]
fn evaluate_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = trackbench(&[
            "evaluate",
            "--controller",
            "lqi",
            "--seed",
            "7",
            "--out",
            path(d.path()),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 8, "{names:?}");
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?} differs");
    }
    let report = read_json(&a.path().join("report_lqi_perturbed.json"));
    assert_eq!(report["scenario"], "perturbed");
    assert!(report["criteria"]["C6_ISE"].as_f64().unwrap() > 0.0);
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[hyperparams]\ncritic_lr = \"fast\"\n");
    let out = trackbench(&["design-lqi", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("hyperparams.critic_lr"), "{err}");
}

#[test]
fn unstabilizable_design_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    // A plant zero at the origin cancels the integrator, so the augmented pair is not stabilizable.
    let cfg = write_config(
        dir.path(),
        "[plant]\nnumerator = [1.0, 0.0]\ndenominator = [1.0, 3.0, 2.0]\n",
    );
    let out = trackbench(&["design-lqi", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_needs_two_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = trackbench(&["evaluate", "--controller", "lqi", "--out", path(dir.path())]);
    assert!(out.status.success());
    let nominal = dir.path().join("report_lqi_nominal.json");
    let perturbed = dir.path().join("report_lqi_perturbed.json");

    let out = trackbench(&["compare", "--out", path(dir.path()), path(&nominal)]);
    assert_eq!(out.status.code(), Some(2));

    let out = trackbench(&["compare", "--out", path(dir.path()), path(&nominal), path(&perturbed)]);
    assert_eq!(out.status.code(), Some(4), "mixed scenarios must be rejected");

    let out = trackbench(&["compare", "--out", path(dir.path()), path(&nominal), path(&nominal)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("comparison.txt")).unwrap();
    assert!(table.contains("C11_GM_dB"), "{table}");
    assert!(dir.path().join("comparison.json").exists());
}

#[test]
fn zero_episodes_writes_an_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = trackbench(&[
        "train",
        "--variant",
        "ddpg1",
        "--episodes",
        "0",
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ddpg1.ckpt").exists());
    let curve = std::fs::read_to_string(dir.path().join("ddpg1_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1);
    let out = trackbench(&[
        "evaluate",
        "--controller",
        path(&dir.path().join("ddpg1.ckpt")),
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("report_ddpg1_nominal.json"));
    assert!(report["metadata"]["k_ddpg"].is_array());
    assert!(report["metadata"]["definiteness"].is_object());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = write_config(whole.path(), "[hyperparams]\nbatch_size = 32\nmax_steps = 40\n");
    let cfg = path(&cfg);

    let out = trackbench(&[
        "train",
        "--config",
        cfg,
        "--variant",
        "ddpg1",
        "--episodes",
        "4",
        "--out",
        path(whole.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = trackbench(&[
        "train",
        "--config",
        cfg,
        "--variant",
        "ddpg1",
        "--episodes",
        "2",
        "--out",
        path(split.path()),
    ]);
    assert!(out.status.success());
    let ckpt = split.path().join("ddpg1.ckpt");
    let out = trackbench(&[
        "train",
        "--config",
        cfg,
        "--variant",
        "ddpg1",
        "--episodes",
        "4",
        "--resume",
        path(&ckpt),
        "--out",
        path(split.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    for name in ["ddpg1.ckpt", "ddpg1_curve.csv"] {
        assert_eq!(
            std::fs::read(whole.path().join(name)).unwrap(),
            std::fs::read(split.path().join(name)).unwrap(),
            "{name} differs"
        );
    }

    let out = trackbench(&[
        "train",
        "--variant",
        "ddpg1",
        "--episodes",
        "4",
        "--resume",
        path(&ckpt),
        "--out",
        path(split.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "a checkpoint from another configuration must be refused"
    );
}
