//! Experiment execution and artifact writing.

use std::fs;
use std::path::Path;

use ltadapt::analysis::{attention_maps, export_attention, marginal_ratio_study, GaussianClassModel, RatioStudyResult};
use ltadapt::data::{build_foundation, generate, longtail_counts, FoundationBundle, LongTailSpec};
use ltadapt::encoder::{AdapterMode, Adapters};
use ltadapt::sg_adapter::build_guidance;
use ltadapt::snapshot::{load_bundle, save_bundle};
use ltadapt::trainer::{train, Ablation, Metrics, MetricsRow, ParamCounts, TrainOutcome};
use ltadapt::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub metrics: Metrics,
    pub param_counts: ParamCounts,
    #[serde(skip)]
    pub history: Vec<MetricsRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    /// Median of an even count is the mean of the two middle values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self { median, min: v[0], max: v[n - 1] })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub completed: usize,
    pub acc_all: Option<Stat>,
    pub acc_head: Option<Stat>,
    pub acc_med: Option<Stat>,
    pub acc_tail: Option<Stat>,
}

impl Aggregate {
    pub fn of(records: &[SeedRecord]) -> Self {
        let pick = |f: fn(&Metrics) -> Option<f64>| Stat::of(&records.iter().filter_map(|r| f(&r.metrics)).collect::<Vec<_>>());
        Self {
            completed: records.len(),
            acc_all: pick(|m| Some(m.acc_all)),
            acc_head: pick(|m| m.acc_head),
            acc_med: pick(|m| m.acc_med),
            acc_tail: pick(|m| m.acc_tail),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub per_seed: Vec<SeedRecord>,
    pub aggregate: Aggregate,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    foundation_key: String,
    foundation_pretrain_accuracy: f64,
    per_seed: &'a [SeedRecord],
    aggregate: &'a Aggregate,
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetricsRow {
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub acc_all: f64,
    pub acc_head: Option<f64>,
    pub acc_med: Option<f64>,
    pub acc_tail: Option<f64>,
    pub loss: f64,
}

impl SeedMetricsRow {
    pub fn new(seed: u64, r: &MetricsRow) -> Self {
        Self {
            seed,
            epoch: r.epoch,
            split: r.split.clone(),
            acc_all: r.acc_all,
            acc_head: r.acc_head,
            acc_med: r.acc_med,
            acc_tail: r.acc_tail,
            loss: r.loss,
        }
    }

    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow {
            epoch: self.epoch,
            split: self.split.clone(),
            acc_all: self.acc_all,
            acc_head: self.acc_head,
            acc_med: self.acc_med,
            acc_tail: self.acc_tail,
            loss: self.loss,
        }
    }
}

/// One line of `ablation.csv`: ladder row (1-based), its flags, then the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub sg: bool,
    pub init: bool,
    pub cf: bool,
    pub fit: bool,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub acc_all: f64,
    pub acc_head: Option<f64>,
    pub acc_med: Option<f64>,
    pub acc_tail: Option<f64>,
    pub loss: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn foundation_key(cfg: &ExperimentConfig) -> String {
    cfg.foundation.hash_with(cfg.task.world_seed, cfg.task.classes)
}

/// Loads the bundle from the content-addressed cache, building and storing it on a miss.
pub fn foundation(cfg: &ExperimentConfig) -> Result<FoundationBundle> {
    let dir = cfg.cache_dir().join(foundation_key(cfg));
    if dir.join("bundle.json").exists() {
        if let Ok(b) = load_bundle(&dir) {
            return Ok(b);
        }
    }
    let bundle = build_foundation(cfg.task.world_seed, cfg.task.classes, &cfg.foundation)?;
    save_bundle(&dir, &bundle)?;
    Ok(bundle)
}

pub fn run_seed(cfg: &ExperimentConfig, bundle: &FoundationBundle, seed: u64) -> Result<TrainOutcome> {
    let (train_set, test_set) = generate(&cfg.task_spec(seed))?;
    train(&cfg.train_config(seed), bundle, &train_set, &test_set).map_err(|e| match e {
        Error::TrainingAborted(m) => Error::TrainingAborted(format!("seed {seed}: {m}")),
        Error::NonFinite(m) => Error::TrainingAborted(format!("seed {seed}: {m}")),
        other => other,
    })
}

/// Trains every seed against a shared bundle without writing anything.
pub fn run_with_bundle(cfg: &ExperimentConfig, bundle: &FoundationBundle) -> Result<RunRecord> {
    cfg.validate()?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let o = run_seed(cfg, bundle, seed)?;
        per_seed.push(SeedRecord { seed, metrics: o.metrics, param_counts: o.param_counts, history: o.history });
    }
    let aggregate = Aggregate::of(&per_seed);
    Ok(RunRecord { config_hash: cfg.hash(), per_seed, aggregate })
}

/// Single configuration over all seeds; writes `metrics.csv` and `summary.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let bundle = foundation(cfg)?;
    let record = run_with_bundle(cfg, &bundle)?;
    let rows: Vec<SeedMetricsRow> =
        record.per_seed.iter().flat_map(|s| s.history.iter().map(|r| SeedMetricsRow::new(s.seed, r))).collect();
    write_csv(&cfg.out.join("metrics.csv"), &rows)?;
    write_json(
        &cfg.out.join("summary.json"),
        &Summary {
            config_hash: &record.config_hash,
            config: cfg,
            foundation_key: foundation_key(cfg),
            foundation_pretrain_accuracy: bundle.pretrain_accuracy,
            per_seed: &record.per_seed,
            aggregate: &record.aggregate,
        },
    )?;
    Ok(record)
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    row: usize,
    ablation: Ablation,
    config_hash: &'a str,
    aggregate: &'a Aggregate,
}

/// The five-row cumulative ladder over all seeds; writes `ablation.csv` and `ablation.json`.
pub fn run_ablation(base: &ExperimentConfig) -> Result<Vec<(Ablation, RunRecord)>> {
    base.validate()?;
    fs::create_dir_all(&base.out)?;
    let bundle = foundation(base)?;
    let mut out = Vec::new();
    for ablation in Ablation::ladder() {
        let mut cfg = base.clone();
        cfg.train.ablation = ablation;
        out.push((ablation, run_with_bundle(&cfg, &bundle)?));
    }
    let mut rows = Vec::new();
    for (i, (a, rec)) in out.iter().enumerate() {
        for s in &rec.per_seed {
            for r in &s.history {
                rows.push(AblationRow {
                    row: i + 1,
                    sg: a.sg,
                    init: a.init,
                    cf: a.cf,
                    fit: a.fit,
                    seed: s.seed,
                    epoch: r.epoch,
                    split: r.split.clone(),
                    acc_all: r.acc_all,
                    acc_head: r.acc_head,
                    acc_med: r.acc_med,
                    acc_tail: r.acc_tail,
                    loss: r.loss,
                });
            }
        }
    }
    write_csv(&base.out.join("ablation.csv"), &rows)?;
    let summary: Vec<_> = out
        .iter()
        .enumerate()
        .map(|(i, (a, r))| AblationSummary { row: i + 1, ablation: *a, config_hash: &r.config_hash, aggregate: &r.aggregate })
        .collect();
    write_json(&base.out.join("ablation.json"), &summary)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub acc_all: f64,
    pub acc_head: Option<f64>,
    pub acc_med: Option<f64>,
    pub acc_tail: Option<f64>,
}

/// Varies one numeric key over `values`; writes `sweep.csv` with final metrics per seed.
pub fn run_sweep(base: &ExperimentConfig, param: &str, values: &[f64]) -> Result<Vec<(f64, RunRecord)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            c.apply(&[(param.to_string(), serde_json::json!(v))])?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&base.out)?;
    let bundle = foundation(base)?;
    let mut out = Vec::new();
    let mut rows = Vec::new();
    for (c, &v) in configs.iter().zip(values) {
        if foundation_key(c) != foundation_key(base) {
            return Err(Error::Config(format!("sweeping `{param}` would change the foundation")));
        }
        let rec = run_with_bundle(c, &bundle)?;
        for s in &rec.per_seed {
            let m = &s.metrics;
            rows.push(SweepRow {
                param: param.to_string(),
                value: v,
                seed: s.seed,
                acc_all: m.acc_all,
                acc_head: m.acc_head,
                acc_med: m.acc_med,
                acc_tail: m.acc_tail,
            });
        }
        out.push((v, rec));
    }
    write_csv(&base.out.join("sweep.csv"), &rows)?;
    Ok(out)
}

/// Gaussian class model for the marginal-ratio study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub classes: usize,
    pub n1: u64,
    pub beta: f64,
    pub dim: usize,
    pub spread: f64,
    pub sigma: f64,
    pub model_seed: u64,
    pub test_per_class: usize,
    pub seed: u64,
    pub gamma_grid: Vec<f64>,
    pub mu_grid: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            n1: 500,
            beta: 100.0,
            dim: 2,
            spread: 3.0,
            sigma: 1.0,
            model_seed: 4,
            test_per_class: 300,
            seed: 5,
            gamma_grid: (0..=20).map(|i| i as f64 * 0.01).collect(),
            mu_grid: (1..=20).map(|i| i as f64 * 0.1).collect(),
        }
    }
}

#[derive(Serialize)]
struct StudyOutput<'a> {
    config: &'a StudyConfig,
    result: &'a RatioStudyResult,
}

pub fn run_study(cfg: &StudyConfig, out: &Path) -> Result<RatioStudyResult> {
    let counts = longtail_counts(&LongTailSpec { classes: cfg.classes, n1: cfg.n1, beta: cfg.beta, seed: 0 })?;
    let model = GaussianClassModel::isotropic(cfg.classes, cfg.dim, cfg.spread, cfg.sigma, cfg.model_seed);
    let result = marginal_ratio_study(&model, &counts, &cfg.gamma_grid, &cfg.mu_grid, cfg.test_per_class, cfg.seed)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("study.json"), &StudyOutput { config: cfg, result: &result })?;
    Ok(result)
}

/// Trains the baseline and full rows on the first seed and exports raw attention
/// for the first `samples` test images, alongside the frozen encoder's.
pub fn run_attention(cfg: &ExperimentConfig, samples: usize) -> Result<Vec<ltadapt::analysis::AttentionEntry>> {
    cfg.validate()?;
    let bundle = foundation(cfg)?;
    let seed = cfg.seeds[0];
    let (train_set, test_set) = generate(&cfg.task_spec(seed))?;
    let idx: Vec<usize> = (0..samples.min(test_set.len())).collect();
    let (x, _) = test_set.batch(&idx);

    let plain = bundle.config.with_mode(AdapterMode::Plain);
    let frozen = attention_maps(&plain, &bundle.weights, &Adapters::none(plain.blocks), None, &x)?;
    let mut models: Vec<(&str, Vec<Tensor>)> = vec![("frozen", frozen)];
    for (name, ablation) in [("baseline", Ablation::NONE), ("full", Ablation::ALL)] {
        let tc = ltadapt::trainer::TrainConfig { ablation, ..cfg.train_config(seed) };
        let o = train(&tc, &bundle, &train_set, &test_set)?;
        let enc = tc.encoder_config(&bundle.config);
        let guidance = if enc.mode == AdapterMode::Sage { Some(build_guidance(&o.psi.w)?) } else { None };
        models.push((name, attention_maps(&enc, &bundle.weights, &o.psi.adapters, guidance.as_ref(), &x)?));
    }
    let refs: Vec<(&str, &[Tensor])> = models.iter().map(|(n, m)| (*n, m.as_slice())).collect();
    export_attention(&cfg.out.join("attention"), &refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_median_min_max() {
        let s = Stat::of(&[0.3, 0.1, 0.5, 0.2, 0.4]).unwrap();
        assert_eq!((s.median, s.min, s.max), (0.3, 0.1, 0.5));
        assert_eq!(Stat::of(&[1.0, 4.0]).unwrap().median, 2.5);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn aggregate_skips_missing_groups() {
        let rec = |acc_all, acc_tail| SeedRecord {
            seed: 0,
            metrics: Metrics { acc_all, acc_head: None, acc_med: None, acc_tail, loss_trace: vec![] },
            param_counts: ParamCounts { adapters: 0, classifier: 0, fit: 0, frozen_encoder: 0 },
            history: vec![],
        };
        let a = Aggregate::of(&[rec(0.5, Some(0.2)), rec(0.7, None)]);
        assert_eq!(a.completed, 2);
        assert_eq!(a.acc_all.unwrap().median, 0.6);
        assert_eq!(a.acc_tail.unwrap().median, 0.2);
        assert!(a.acc_head.is_none());
    }
}
