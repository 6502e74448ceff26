use std::process::Command;

use dmu::harness::{read_report, run_pipeline, EvalReport, PipelineConfig};

fn tiny(epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        n_train: 300,
        n_eval: 100,
        ..PipelineConfig::default()
    };
    cfg.base.epochs = 3 * epochs;
    cfg.stage.epochs = epochs;
    cfg.stage.batch_size = 64;
    cfg.base.batch_size = 64;
    cfg.router.epochs = epochs;
    cfg.router.batch_size = 64;
    cfg
}

fn check_report(r: &EvalReport) {
    for (_, ret) in r.retrievals() {
        for rec in [ret.i2t, ret.t2i] {
            assert!(rec.is_monotone() && rec.in_unit_interval(), "{rec:?}");
        }
    }
    assert_eq!(r.num_experts, 4);
    assert_eq!(r.specialization.probe.len(), 4);
    assert!(r.specialization.probe.iter().all(|p| p.len() == 3));
    assert_eq!(r.stage_probes.len(), 4);
    for (a, b) in r.specialization.probe[0].iter().zip(&r.stage_probes[0]) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn short_run_writes_artifacts_and_consistent_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(1);
    cfg.output_dir = Some(dir.path().to_path_buf());
    let report = run_pipeline(&cfg).unwrap();
    check_report(&report);
    for f in [
        "train.csv",
        "eval.csv",
        "base.json",
        "base.bin",
        "stage_0.snapshot.json",
        "stage_3.snapshot.bin",
        "assignments.csv",
        "dmu_moe.json",
        "upcycled_moe.bin",
        "routing_dmu.csv",
        "routing_upcycled.csv",
        "report.json",
        "report.txt",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = read_report(&dir.path().join("report.json")).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json(), std::fs::read_to_string(dir.path().join("report.json")).unwrap());
    assert!(report.upcycled_divergence < 1e-5);
}

#[test]
fn zero_epoch_run_has_base_equal_to_expert_zero() {
    let r = run_pipeline(&tiny(0)).unwrap();
    check_report(&r);
    assert_eq!(r.base, r.specialization.recall[0]);
    assert!(r.losses.base.is_empty() && r.losses.router_dmu.is_empty());
}

fn dmu_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmu"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmu_cmd()
        .args(["gen-data", "--seed", "3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["kind"].is_string());
    }

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[moe]\ntop_k = 9\n").unwrap();
    let status = dmu_cmd().arg("--config").arg(&bad).arg("pipeline").status().unwrap();
    assert_eq!(status.code(), Some(2));

    let hot = dir.path().join("hot.toml");
    std::fs::write(&hot, "n_train = 200\nn_eval = 60\n[base]\nepochs = 3\nlr = 1e300\n").unwrap();
    let status = dmu_cmd()
        .arg("--config")
        .arg(&hot)
        .arg("--out")
        .arg(dir.path())
        .arg("train-base")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}
