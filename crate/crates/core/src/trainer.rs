//! Fine-tuning loop: SGD with momentum over adapters, classifier rows and the
//! FIT scalars, with a per-iteration cosine schedule, plus grouped evaluation.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{argmax_rows, plain_features, split_groups, Dataset, FoundationBundle, Group, DEFAULT_GROUP_THRESHOLDS};
use crate::encoder::{encode_backward, encode_traced, AdapterMode, Adapters, EncoderConfig};
use crate::heads::{
    cosine_logits, cosine_logits_backward, fit_logits, init_classifier_from_text, ClassifierWeights, FitState,
    DEFAULT_LOGIT_SCALE,
};
use crate::loss::{class_log_offsets, composite_with_offsets, la_loss_grad, ClassFrequencies, CompositeTerms, LossConfig};
use crate::params::{zeros_like, ParamSet};
use crate::sg_adapter::{build_guidance, guidance_backward};
use crate::{Error, Result, Tensor};

/// `0.5 · lr0 · (1 + cos(π · step / total))`
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Heavy-ball SGD: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new<P: ParamSet>(params: &P, momentum: f64) -> Self {
        Self { momentum, velocity: vec![0.0; params.num_params()] }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.to_flat();
        assert_eq!(g.len(), self.velocity.len(), "gradient layout differs from optimizer state");
        let (m, v) = (self.momentum, &mut self.velocity);
        let mut at = 0;
        params.visit_mut(&mut |_, a| {
            for p in a.iter_mut() {
                v[at] = m * v[at] + g[at];
                *p -= lr * v[at];
                at += 1;
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub sg: bool,
    pub init: bool,
    pub cf: bool,
    pub fit: bool,
}

impl Ablation {
    pub const ALL: Self = Self { sg: true, init: true, cf: true, fit: true };
    pub const NONE: Self = Self { sg: false, init: false, cf: false, fit: false };

    /// The five cumulative rows: none, +SG, +SG+Init, +SG+Init+CF, all four.
    pub fn ladder() -> [Self; 5] {
        [
            Self::NONE,
            Self { sg: true, ..Self::NONE },
            Self { sg: true, init: true, ..Self::NONE },
            Self { sg: true, init: true, cf: true, fit: false },
            Self::ALL,
        ]
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub loss: LossConfig,
    pub alpha: f64,
    pub bottleneck: usize,
    pub logit_scale: f64,
    pub group_thresholds: (u64, u64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            ablation: Ablation::ALL,
            loss: LossConfig::default(),
            alpha: 0.1,
            bottleneck: 4,
            logit_scale: DEFAULT_LOGIT_SCALE,
            group_thresholds: DEFAULT_GROUP_THRESHOLDS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be > 0".into()));
        }
        self.loss.validate()
    }

    /// Loss weights actually used: FIT off zeroes every auxiliary term.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        if !self.ablation.fit {
            l.lambda1 = 0.0;
            l.lambda2 = 0.0;
            l.lambda3 = 0.0;
        }
        l
    }

    pub fn encoder_config(&self, foundation: &EncoderConfig) -> EncoderConfig {
        let mode = if self.ablation.sg { AdapterMode::Sage } else { AdapterMode::AdaptFormer };
        EncoderConfig { bottleneck: self.bottleneck, mode, ..*foundation }
    }
}

/// Everything updated by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable {
    pub adapters: Adapters,
    pub w: Tensor,
    pub fit: FitState,
}

impl ParamSet for Trainable {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.adapters.visit(f);
        f("classifier.w", &self.w.data);
        self.fit.visit(&mut |n, a| f(&format!("fit.{n}"), a));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.adapters.visit_mut(f);
        f("classifier.w", &mut self.w.data);
        self.fit.visit_mut(&mut |n, a| f(&format!("fit.{n}"), a));
    }
}

/// Frozen context of the fine-tuning objective.
#[derive(Clone, Debug)]
pub struct Pipeline<'a> {
    pub cfg: EncoderConfig,
    pub bundle: &'a FoundationBundle,
    pub w_zs: Tensor,
    pub offsets: Vec<f64>,
    pub loss: LossConfig,
    pub fit: bool,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub terms: CompositeTerms,
    pub grads: Trainable,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &TrainConfig, bundle: &'a FoundationBundle, freq: &ClassFrequencies, w_zs: Tensor) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.encoder_config(&bundle.config);
        enc.validate()?;
        Ok(Self {
            cfg: enc,
            bundle,
            w_zs,
            offsets: class_log_offsets(freq, cfg.ablation.cf.then_some(&cfg.loss)),
            loss: cfg.effective_loss(),
            fit: cfg.ablation.fit,
            scale: cfg.logit_scale,
        })
    }

    /// The logits the model predicts with: `ẑ` with FIT, `z` otherwise.
    pub fn predict_logits(&self, psi: &Trainable, x: &Tensor, f_zs: &Tensor) -> Result<Tensor> {
        let guidance = self.guidance(psi)?;
        let f = encode_traced(&self.cfg, &self.bundle.weights, &psi.adapters, x, guidance.as_ref())?.features;
        let z = cosine_logits(&f, &psi.w, self.scale)?;
        if !self.fit {
            return Ok(z);
        }
        let z_v = cosine_logits(f_zs, &psi.w, self.scale)?;
        let z_t = cosine_logits(&f, &self.w_zs, self.scale)?;
        fit_logits(&z, &z_v, &z_t, &psi.fit)
    }

    fn guidance(&self, psi: &Trainable) -> Result<Option<crate::sg_adapter::Guidance>> {
        Ok(if self.cfg.mode == AdapterMode::Sage { Some(build_guidance(&psi.w)?) } else { None })
    }

    /// Objective value and the gradient with respect to every trainable array.
    pub fn loss_and_grads(&self, psi: &Trainable, x: &Tensor, f_zs: &Tensor, y: &[usize]) -> Result<StepOutput> {
        let guidance = self.guidance(psi)?;
        let trace = encode_traced(&self.cfg, &self.bundle.weights, &psi.adapters, x, guidance.as_ref())?;
        let f = &trace.features;
        let z = cosine_logits(f, &psi.w, self.scale)?;
        let mut grads = zeros_like(psi);

        let (loss, terms, d_f) = if self.fit {
            let z_v = cosine_logits(f_zs, &psi.w, self.scale)?;
            let z_t = cosine_logits(f, &self.w_zs, self.scale)?;
            let z_hat = fit_logits(&z, &z_v, &z_t, &psi.fit)?;
            let (loss, terms, g) = composite_with_offsets([&z, &z_v, &z_t, &z_hat], y, &self.offsets, &self.loss)?;
            grads.fit.s1 = g.z_hat.dot(&z_v);
            grads.fit.s2 = g.z_hat.dot(&z_t);
            let mut dz = g.z;
            dz.add_assign(&g.z_hat);
            let mut dz_v = g.z_v;
            dz_v.axpy(psi.fit.s1, &g.z_hat);
            let mut dz_t = g.z_t;
            dz_t.axpy(psi.fit.s2, &g.z_hat);
            let (mut d_f, dw) = cosine_logits_backward(f, &psi.w, &dz, self.scale)?;
            grads.w.add_assign(&dw);
            let (_, dw_v) = cosine_logits_backward(f_zs, &psi.w, &dz_v, self.scale)?;
            grads.w.add_assign(&dw_v);
            let (d_f_t, _) = cosine_logits_backward(f, &self.w_zs, &dz_t, self.scale)?;
            d_f.add_assign(&d_f_t);
            (loss, terms, d_f)
        } else {
            let (loss, terms, g) = composite_with_offsets([&z, &z, &z, &z], y, &self.offsets, &self.loss)?;
            let (d_f, dw) = cosine_logits_backward(f, &psi.w, &g.z, self.scale)?;
            grads.w.add_assign(&dw);
            (loss, terms, d_f)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("non-finite loss {loss}")));
        }
        let d_w_bar =
            encode_backward(&self.cfg, &trace, &d_f, &self.bundle.weights, &psi.adapters, &mut grads.adapters, None)?;
        if self.cfg.mode == AdapterMode::Sage {
            guidance_backward(&d_w_bar, &mut grads.w);
        }
        Ok(StepOutput { loss, terms, grads })
    }
}

/// Top-1 accuracy overall and per group; a group with no test samples is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_all: f64,
    pub acc_head: Option<f64>,
    pub acc_med: Option<f64>,
    pub acc_tail: Option<f64>,
    /// Mean training loss per completed epoch.
    pub loss_trace: Vec<f64>,
}

pub fn grouped_accuracy(pred: &[usize], labels: &[usize], groups: &[Group]) -> Result<Metrics> {
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for (&p, &l) in pred.iter().zip(labels) {
        let g = *groups.get(l).ok_or_else(|| Error::Domain(format!("label {l} has no group")))? as usize;
        tot[g] += 1;
        hit[g] += (p == l) as usize;
    }
    let acc = |g: usize| (tot[g] > 0).then(|| hit[g] as f64 / tot[g] as f64);
    Ok(Metrics {
        acc_all: hit.iter().sum::<usize>() as f64 / labels.len() as f64,
        acc_head: acc(Group::Head as usize),
        acc_med: acc(Group::Medium as usize),
        acc_tail: acc(Group::Tail as usize),
        loss_trace: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub acc_all: f64,
    pub acc_head: Option<f64>,
    pub acc_med: Option<f64>,
    pub acc_tail: Option<f64>,
    pub loss: f64,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCounts {
    pub adapters: usize,
    pub classifier: usize,
    pub fit: usize,
    pub frozen_encoder: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub psi: Trainable,
    pub metrics: Metrics,
    pub history: Vec<MetricsRow>,
    pub groups: Vec<Group>,
    pub param_counts: ParamCounts,
}

/// Stateful fine-tuning run over one training set.
pub struct FineTuner<'a> {
    pub cfg: TrainConfig,
    pub pipeline: Pipeline<'a>,
    pub psi: Trainable,
    pub groups: Vec<Group>,
    train: &'a Dataset,
    f_zs_train: Tensor,
    opt: Sgd,
}

impl<'a> FineTuner<'a> {
    pub fn new(cfg: &TrainConfig, bundle: &'a FoundationBundle, train: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.classes != bundle.num_classes() {
            return Err(Error::Config(format!(
                "task has {} classes, foundation {}",
                train.classes,
                bundle.num_classes()
            )));
        }
        let freq = ClassFrequencies::new(train.class_counts())?;
        let zero_shot = init_classifier_from_text(&bundle.text)?;
        let classifier = if cfg.ablation.init {
            zero_shot
        } else {
            ClassifierWeights::randomized(zero_shot.w_zs().clone(), &mut crate::rng::stream(cfg.seed, 3))?
        };
        let pipeline = Pipeline::new(cfg, bundle, &freq, classifier.w_zs().clone())?;
        let adapters = Adapters::init(&pipeline.cfg, cfg.alpha, &mut crate::rng::stream(cfg.seed, 2))?;
        let psi = Trainable { adapters, w: classifier.w, fit: FitState::default() };
        let f_zs_train = plain_features(&bundle.config, &bundle.weights, train)?;
        let groups = split_groups(&freq.counts, cfg.group_thresholds)?;
        let opt = Sgd::new(&psi, cfg.momentum);
        Ok(Self { cfg: cfg.clone(), pipeline, psi, groups, train, f_zs_train, opt })
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        let (x, y) = self.train.batch(idx);
        let d = self.f_zs_train.cols();
        let mut f = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| f.extend_from_slice(self.f_zs_train.row(i)));
        (x, Tensor::new(&[idx.len(), d], f).expect("feature layout"), y)
    }

    pub fn batch_loss(&self, idx: &[usize]) -> Result<f64> {
        let (x, f_zs, y) = self.gather(idx);
        Ok(self.pipeline.loss_and_grads(&self.psi, &x, &f_zs, &y)?.loss)
    }

    /// One optimizer step on the given training indices; returns the pre-step loss.
    pub fn step(&mut self, idx: &[usize], lr: f64) -> Result<f64> {
        let (x, f_zs, y) = self.gather(idx);
        let out = self.pipeline.loss_and_grads(&self.psi, &x, &f_zs, &y)?;
        self.opt.step(&mut self.psi, &out.grads, lr);
        Ok(out.loss)
    }

    /// Central-difference check of the full objective on the given training indices.
    pub fn check_gradients(&self, idx: &[usize], eps: f64, tol: f64) -> Result<Vec<crate::gradcheck::GradCheckReport>> {
        let (x, f_zs, y) = self.gather(idx);
        let out = self.pipeline.loss_and_grads(&self.psi, &x, &f_zs, &y)?;
        crate::gradcheck::grad_check(
            |p: &Trainable| Ok(self.pipeline.loss_and_grads(p, &x, &f_zs, &y)?.loss),
            &self.psi,
            &out.grads,
            eps,
            tol,
        )
    }

    pub fn evaluate(&self, test: &Dataset) -> Result<Metrics> {
        let f_zs = plain_features(&self.pipeline.bundle.config, &self.pipeline.bundle.weights, test)?;
        let mut pred = Vec::with_capacity(test.len());
        let idx: Vec<usize> = (0..test.len()).collect();
        for chunk in idx.chunks(256) {
            let (x, _) = test.batch(chunk);
            let fz = Tensor::new(
                &[chunk.len(), f_zs.cols()],
                chunk.iter().flat_map(|&i| f_zs.row(i).to_vec()).collect(),
            )?;
            pred.extend(argmax_rows(&self.pipeline.predict_logits(&self.psi, &x, &fz)?));
        }
        grouped_accuracy(&pred, &test.labels, &self.groups)
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            adapters: self.psi.adapters.num_params(),
            classifier: self.psi.w.len(),
            fit: if self.cfg.ablation.fit { 2 } else { 0 },
            frozen_encoder: self.pipeline.bundle.weights.num_params(),
        }
    }

    /// Runs every epoch, evaluating on `test` after each.
    pub fn run(mut self, test: &Dataset) -> Result<TrainOutcome> {
        let frozen_before = self.pipeline.bundle.checksum();
        let w_zs_before = self.pipeline.w_zs.clone();
        let n = self.train.len();
        let per_epoch = n.div_ceil(self.cfg.batch_size);
        let total = per_epoch * self.cfg.epochs;
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = Vec::new();
        let mut trace = Vec::new();
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut crate::rng::stream(self.cfg.seed, 1000 + epoch as u64));
            let mut sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let lr = cosine_lr(step, total, self.cfg.lr);
                let loss = self.step(chunk, lr).map_err(|e| match e {
                    Error::NonFinite(m) => Error::TrainingAborted(format!("epoch {epoch}, step {step}: {m}")),
                    other => other,
                })?;
                sum += loss * chunk.len() as f64;
                step += 1;
            }
            let mean = sum / n as f64;
            trace.push(mean);
            let m = self.evaluate(test)?;
            history.push(MetricsRow {
                epoch: epoch + 1,
                split: "test".into(),
                acc_all: m.acc_all,
                acc_head: m.acc_head,
                acc_med: m.acc_med,
                acc_tail: m.acc_tail,
                loss: mean,
            });
        }
        if self.pipeline.bundle.checksum() != frozen_before || self.pipeline.w_zs != w_zs_before {
            return Err(Error::TrainingAborted("frozen parameters changed during training".into()));
        }
        let mut metrics = self.evaluate(test)?;
        metrics.loss_trace = trace;
        let param_counts = self.param_counts();
        Ok(TrainOutcome { psi: self.psi, metrics, history, groups: self.groups, param_counts })
    }
}

pub fn train(cfg: &TrainConfig, bundle: &FoundationBundle, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    FineTuner::new(cfg, bundle, train)?.run(test)
}

/// Standalone AdaptFormer + logit-adjusted baseline, written without the
/// composite-loss and FIT machinery. Returns the per-step loss trajectory.
pub fn train_la_baseline(cfg: &TrainConfig, bundle: &FoundationBundle, train: &Dataset) -> Result<(Trainable, Vec<f64>)> {
    if cfg.ablation.sg || cfg.ablation.cf || cfg.ablation.fit {
        return Err(Error::Config("the baseline path runs with sg, cf and fit off".into()));
    }
    cfg.validate()?;
    let enc = cfg.encoder_config(&bundle.config);
    let freq = ClassFrequencies::new(train.class_counts())?;
    let zero_shot = init_classifier_from_text(&bundle.text)?;
    let w = if cfg.ablation.init {
        zero_shot.w
    } else {
        ClassifierWeights::randomized(zero_shot.w_zs().clone(), &mut crate::rng::stream(cfg.seed, 3))?.w
    };
    let adapters = Adapters::init(&enc, cfg.alpha, &mut crate::rng::stream(cfg.seed, 2))?;
    let mut psi = Trainable { adapters, w, fit: FitState::default() };
    let mut opt = Sgd::new(&psi, cfg.momentum);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut crate::rng::stream(cfg.seed, 1000 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let trace = encode_traced(&enc, &bundle.weights, &psi.adapters, &x, None)?;
            let z = cosine_logits(&trace.features, &psi.w, cfg.logit_scale)?;
            let (loss, dz) = la_loss_grad(&z, &y, &freq)?;
            let mut grads = zeros_like(&psi);
            let (df, dw) = cosine_logits_backward(&trace.features, &psi.w, &dz, cfg.logit_scale)?;
            grads.w.add_assign(&dw);
            encode_backward(&enc, &trace, &df, &bundle.weights, &psi.adapters, &mut grads.adapters, None)?;
            opt.step(&mut psi, &grads, cosine_lr(step, total, cfg.lr));
            losses.push(loss);
            step += 1;
        }
    }
    Ok((psi, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_foundation, generate, FoundationSpec, LongTailSpec, SyntheticTaskSpec};
    use std::sync::OnceLock;

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 0.01), 0.01);
        assert!(cosine_lr(100, 100, 0.01).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.01) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn sgd_velocity_form() {
        let mut p = FitState { s1: 1.0, s2: 0.0 };
        let g = FitState { s1: 1.0, s2: -2.0 };
        let mut opt = Sgd::new(&p, 0.9);
        opt.step(&mut p, &g, 0.1);
        assert!((p.s1 - 0.9).abs() < 1e-15 && (p.s2 - 0.2).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1);
        // v = 0.9·1 + 1 = 1.9
        assert!((p.s1 - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn grouped_accuracy_examples() {
        let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat(c).take(10)).collect();
        let groups = vec![Group::Head, Group::Head, Group::Medium, Group::Medium, Group::Medium]
            .into_iter()
            .chain(std::iter::repeat(Group::Tail).take(5))
            .collect::<Vec<_>>();
        let m = grouped_accuracy(&vec![0; 100], &labels, &groups).unwrap();
        assert!((m.acc_all - 0.1).abs() < 1e-15);
        assert_eq!(m.acc_head, Some(0.5));
        assert_eq!(m.acc_tail, Some(0.0));
        let m = grouped_accuracy(&labels, &labels, &groups).unwrap();
        assert_eq!((m.acc_all, m.acc_head, m.acc_med, m.acc_tail), (1.0, Some(1.0), Some(1.0), Some(1.0)));
        let no_tail = vec![Group::Head; 10];
        assert_eq!(grouped_accuracy(&labels, &labels, &no_tail).unwrap().acc_tail, None);
    }

    #[test]
    fn random_predictions_are_near_chance() {
        use rand::Rng;
        let mut rng = crate::rng::stream(9, 0);
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let pred: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..10)).collect();
        let m = grouped_accuracy(&pred, &labels, &[Group::Medium; 10]).unwrap();
        assert!((0.07..=0.13).contains(&m.acc_all), "{}", m.acc_all);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow { epoch: 1, split: "test".into(), acc_all: 0.5, acc_head: Some(0.75), acc_med: None, acc_tail: Some(0.1), loss: 1.25 },
            MetricsRow { epoch: 2, split: "test".into(), acc_all: 0.625, acc_head: None, acc_med: Some(0.3), acc_tail: None, loss: 0.5 },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("epoch,split,acc_all,acc_head,acc_med,acc_tail,loss\n"));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
    }

    struct Fixture {
        bundle: FoundationBundle,
        train: Dataset,
        test: Dataset,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let spec = FoundationSpec { per_class: 40, epochs: 3, eval_per_class: 10, ..FoundationSpec::default() };
            let bundle = build_foundation(3, 5, &spec).unwrap();
            let task = SyntheticTaskSpec {
                grid: 8,
                patch: 4,
                world_seed: 3,
                noise: 0.8,
                train: LongTailSpec { classes: 5, n1: 60, beta: 10.0, seed: 1 },
                test_per_class: 10,
            };
            let (train, test) = generate(&task).unwrap();
            Fixture { bundle, train, test }
        })
    }

    fn small_cfg(ablation: Ablation) -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 16, ablation, group_thresholds: (30, 10), ..TrainConfig::default() }
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        let fx = fixture();
        for ablation in [Ablation::ALL, Ablation::NONE, Ablation { fit: false, ..Ablation::ALL }] {
            let mut tuner = FineTuner::new(&small_cfg(ablation), &fx.bundle, &fx.train).unwrap();
            let mut rng = crate::rng::stream(5, 5);
            tuner.psi.visit_mut(&mut |_, a| {
                use rand::Rng;
                a.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5))
            });
            for b in &mut tuner.psi.adapters.blocks {
                match b {
                    crate::encoder::BlockAdapter::Sage(p) => p.s_block = 1.0,
                    crate::encoder::BlockAdapter::AdaptFormer(p) => p.scale = 1.0,
                    crate::encoder::BlockAdapter::None => {}
                }
            }
            // One sample from each class.
            let idx: Vec<usize> = (0..5).map(|c| fx.train.labels.iter().position(|&l| l == c).unwrap()).collect();
            let r = tuner.check_gradients(&idx, 1e-5, 1e-4).unwrap();
            assert!(crate::gradcheck::all_passed(&r), "{ablation:?}: {:?}", r.iter().filter(|x| !x.passed).collect::<Vec<_>>());
        }
    }

    #[test]
    fn fit_off_objective_is_compensated_loss_on_z() {
        let fx = fixture();
        let cfg = small_cfg(Ablation { fit: false, ..Ablation::ALL });
        let tuner = FineTuner::new(&cfg, &fx.bundle, &fx.train).unwrap();
        let (x, f_zs, y) = tuner.gather(&[1, 2, 3, 50]);
        let out = tuner.pipeline.loss_and_grads(&tuner.psi, &x, &f_zs, &y).unwrap();
        let z = tuner.pipeline.predict_logits(&tuner.psi, &x, &f_zs).unwrap();
        let freq = ClassFrequencies::new(fx.train.class_counts()).unwrap();
        assert_eq!(out.loss, crate::loss::cf_loss(&z, &y, &freq, &cfg.loss).unwrap());

        let la_cfg = small_cfg(Ablation { fit: false, cf: false, ..Ablation::ALL });
        let tuner = FineTuner::new(&la_cfg, &fx.bundle, &fx.train).unwrap();
        let out = tuner.pipeline.loss_and_grads(&tuner.psi, &x, &f_zs, &y).unwrap();
        assert!((out.loss - crate::loss::la_loss(&z, &y, &freq).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_small_step_decreases_batch_loss() {
        let fx = fixture();
        let mut tuner = FineTuner::new(&small_cfg(Ablation::ALL), &fx.bundle, &fx.train).unwrap();
        let idx: Vec<usize> = (0..fx.train.len()).step_by(7).collect();
        let before = tuner.step(&idx, 1e-3).unwrap();
        let after = tuner.batch_loss(&idx).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn flag_gated_baseline_equals_dedicated_path() {
        let fx = fixture();
        for init in [true, false] {
            let cfg = small_cfg(Ablation { init, ..Ablation::NONE });
            let (psi_ref, losses_ref) = train_la_baseline(&cfg, &fx.bundle, &fx.train).unwrap();
            let mut tuner = FineTuner::new(&cfg, &fx.bundle, &fx.train).unwrap();
            let per_epoch = fx.train.len().div_ceil(cfg.batch_size);
            let total = per_epoch * cfg.epochs;
            let mut losses = Vec::new();
            let mut order: Vec<usize> = (0..fx.train.len()).collect();
            let mut step = 0;
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut crate::rng::stream(cfg.seed, 1000 + epoch as u64));
                for chunk in order.chunks(cfg.batch_size) {
                    losses.push(tuner.step(chunk, cosine_lr(step, total, cfg.lr)).unwrap());
                    step += 1;
                }
            }
            assert_eq!(losses, losses_ref);
            assert_eq!(tuner.psi, psi_ref);
        }
    }

    #[test]
    fn training_is_deterministic_and_leaves_frozen_state_alone() {
        let fx = fixture();
        let before = fx.bundle.checksum();
        let a = train(&small_cfg(Ablation::ALL), &fx.bundle, &fx.train, &fx.test).unwrap();
        let b = train(&small_cfg(Ablation::ALL), &fx.bundle, &fx.train, &fx.test).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.history, b.history);
        assert_eq!(fx.bundle.checksum(), before);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.param_counts.adapters, 2 * crate::sg_adapter::count_params(16, 4));
    }

    #[test]
    fn accuracy_is_sample_weighted_group_mix() {
        let fx = fixture();
        let out = train(&small_cfg(Ablation::ALL), &fx.bundle, &fx.train, &fx.test).unwrap();
        let m = &out.metrics;
        let mut sizes = [0usize; 3];
        fx.test.labels.iter().for_each(|&l| sizes[out.groups[l] as usize] += 1);
        let parts = [m.acc_head, m.acc_med, m.acc_tail];
        let mix: f64 = parts.iter().zip(sizes).map(|(a, n)| a.unwrap_or(0.0) * n as f64).sum::<f64>()
            / fx.test.len() as f64;
        assert!((mix - m.acc_all).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let fx = fixture();
        let bad = TrainConfig { lr: 0.0, ..small_cfg(Ablation::ALL) };
        assert!(FineTuner::new(&bad, &fx.bundle, &fx.train).is_err());
        let bad = TrainConfig { batch_size: 0, ..small_cfg(Ablation::ALL) };
        assert!(bad.validate().is_err());
    }
}
