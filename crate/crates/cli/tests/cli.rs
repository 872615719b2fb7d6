use std::path::Path;
use std::process::Command;

use ltadapt::trainer::{Ablation, MetricsRow};
use ltadapt_cli::config::ExperimentConfig;
use ltadapt_cli::runner::{self, AblationRow, SeedMetricsRow, StudyConfig, SweepRow};
use serde_json::json;

fn small(out: &Path, seeds: &str, epochs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.apply(&[
        ("n1".into(), json!(80)),
        ("beta".into(), json!(10.0)),
        ("task.test_per_class".into(), json!(20)),
        ("train.group_thresholds".into(), json!([40, 15])),
        ("foundation.per_class".into(), json!(40)),
        ("foundation.epochs".into(), json!(2)),
        ("epochs".into(), json!(epochs)),
        ("batch-size".into(), json!(32)),
        ("seed".into(), json!(seeds)),
        ("out".into(), json!(out.to_string_lossy())),
    ])
    .unwrap();
    c.validate().unwrap();
    c
}

#[test]
fn single_seed_run_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "0", 3);
    let rec = runner::run(&cfg).unwrap();
    let rows: Vec<SeedMetricsRow> = runner::read_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], json!(cfg.hash()));
    assert_eq!(summary["config"]["train"]["loss"]["mu"], json!(0.5));
    assert!(summary["per_seed"][0]["param_counts"]["adapters"].as_u64().unwrap() > 0);
    assert_eq!(rec.per_seed[0].metrics.acc_all, rows[2].acc_all);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = small(a.path(), "1", 2);
    let mut cb = small(b.path(), "1", 2);
    let shared = tempfile::tempdir().unwrap();
    ca.cache_dir = Some(shared.path().into());
    cb.cache_dir = Some(shared.path().into());
    runner::run(&ca).unwrap();
    runner::run(&cb).unwrap();
    for f in ["metrics.csv", "summary.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        if f == "summary.json" {
            let strip = |b: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(b).unwrap();
                v["config"]["out"] = json!(null);
                v
            };
            assert_eq!(strip(&x), strip(&y));
        } else {
            assert_eq!(x, y, "{f}");
        }
    }
}

#[test]
fn aggregate_median_is_middle_seed() {
    let dir = tempfile::tempdir().unwrap();
    let rec = runner::run(&small(dir.path(), "0,1,2,3,4", 1)).unwrap();
    let mut acc: Vec<f64> = rec.per_seed.iter().map(|s| s.metrics.acc_all).collect();
    acc.sort_by(f64::total_cmp);
    let agg = rec.aggregate.acc_all.unwrap();
    assert_eq!(rec.aggregate.completed, 5);
    assert_eq!(agg.median, acc[2]);
    assert_eq!((agg.min, agg.max), (acc[0], acc[4]));
    let rows: Vec<SeedMetricsRow> = runner::read_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 5);
}

#[test]
fn ablation_ladder_layout_and_baseline_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "0,1", 2);
    let ladder = runner::run_ablation(&cfg).unwrap();
    assert_eq!(ladder.len(), 5);
    let rows: Vec<AblationRow> = runner::read_csv(&dir.path().join("ablation.csv")).unwrap();
    assert_eq!(rows.len(), 5 * 2 * 2);
    for (i, a) in Ablation::ladder().iter().enumerate() {
        assert!(rows.iter().filter(|r| r.row == i + 1).all(|r| (r.sg, r.init, r.cf, r.fit) == (a.sg, a.init, a.cf, a.fit)));
    }

    let base_dir = tempfile::tempdir().unwrap();
    let mut base = small(base_dir.path(), "0,1", 2);
    base.apply(&[("ablate".into(), json!("sg,init,cf,fit"))]).unwrap();
    let dedicated = runner::run(&base).unwrap();
    assert_eq!(dedicated.per_seed, ladder[0].1.per_seed);
    let metrics: Vec<SeedMetricsRow> = runner::read_csv(&base_dir.path().join("metrics.csv")).unwrap();
    let row1: Vec<&AblationRow> = rows.iter().filter(|r| r.row == 1).collect();
    for (m, r) in metrics.iter().zip(&row1) {
        assert_eq!((m.seed, m.epoch, m.acc_all, m.acc_tail, m.loss), (r.seed, r.epoch, r.acc_all, r.acc_tail, r.loss));
    }
}

#[test]
fn metrics_rows_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let rec = runner::run(&small(dir.path(), "2", 2)).unwrap();
    let rows: Vec<SeedMetricsRow> = runner::read_csv(&dir.path().join("metrics.csv")).unwrap();
    let back: Vec<MetricsRow> = rows.iter().map(SeedMetricsRow::metrics_row).collect();
    assert_eq!(back, rec.per_seed[0].history);
}

#[test]
fn foundation_cache_is_reused_and_repaired() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "0", 1);
    let first = runner::foundation(&cfg).unwrap();
    let key_dir = cfg.cache_dir().join(runner::foundation_key(&cfg));
    assert!(key_dir.join("encoder.bin").exists());
    assert_eq!(runner::foundation(&cfg).unwrap(), first);
    std::fs::write(key_dir.join("encoder.bin"), b"garbage").unwrap();
    assert_eq!(runner::foundation(&cfg).unwrap(), first);

    let mut other = cfg.clone();
    other.task.beta = 5.0;
    assert_eq!(runner::foundation_key(&other), runner::foundation_key(&cfg));
    other.task.world_seed = 6;
    assert_ne!(runner::foundation_key(&other), runner::foundation_key(&cfg));
}

#[test]
fn sweep_writes_one_row_per_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "0,1", 1);
    let out = runner::run_sweep(&cfg, "gamma", &[0.0, 0.1]).unwrap();
    assert_eq!(out.len(), 2);
    let rows: Vec<SweepRow> = runner::read_csv(&dir.path().join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.param == "gamma"));
    assert!(runner::run_sweep(&cfg, "classes", &[4.0]).is_err());
    assert!(runner::run_sweep(&cfg, "no.such.key", &[1.0]).is_err());
}

#[test]
fn study_and_attention_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let r = runner::run_study(&StudyConfig::default(), dir.path()).unwrap();
    assert_eq!(r.ratios.len(), 10);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("study.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["counts"][0], json!(500));

    let cfg = small(dir.path(), "0", 1);
    let entries = runner::run_attention(&cfg, 2).unwrap();
    assert_eq!(entries.len(), 3 * 2);
    assert!(dir.path().join("attention").join("index.json").exists());
    let att = ltadapt::analysis::read_attention(&dir.path().join("attention"), &entries[0]).unwrap();
    assert_eq!(att.shape()[..2], [2, 2]);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ltadapt"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().args(["run", "--epochs", "x"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["run", "--ablate", "sg,nope"]).output().unwrap().status.code(), Some(1));
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train.bogus": 1}"#).unwrap();
    let o = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.bogus"));

    std::fs::write(
        &cfg,
        r#"{"n1": 60, "beta": 10, "task.test_per_class": 5, "foundation.per_class": 20, "foundation.epochs": 1,
            "train.group_thresholds": [30, 10], "epochs": 4}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = bin().args(["run", "--epochs", "1", "--out"]).arg(&out).arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<SeedMetricsRow> = runner::read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
}

#[test]
fn error_classes_map_to_exit_codes() {
    use ltadapt::Error;
    assert_eq!(ltadapt_cli::exit_code(&Error::Config("x".into())), 1);
    assert_eq!(ltadapt_cli::exit_code(&Error::TrainingAborted("x".into())), 2);
}
