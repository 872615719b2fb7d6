//! Synthetic long-tailed image tasks and the frozen foundation stub.
//!
//! Images are `grid × grid` arrays drawn from a class-conditional Gaussian
//! around a fixed class pattern. The patterns belong to a "world" seed shared
//! by the foundation corpus and every downstream task; sample noise is drawn
//! from per-class streams keyed by `(seed, class)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{encode_backward, encode_traced, AdapterMode, Adapters, EncoderConfig, EncoderWeights};
use crate::heads::{cosine_logits, cosine_logits_backward, TextEmbeddingSet, DEFAULT_LOGIT_SCALE};
use crate::loss::adjusted_cross_entropy;
use crate::params::{zeros_like, NamedTensors, ParamSet};
use crate::tensor::l2_normalize_rows;
use crate::trainer::{cosine_lr, Sgd};
use crate::{Error, Result, Tensor};

const TEST_STREAM: u64 = 1 << 32;
const PATTERN_STREAM: u64 = 1 << 33;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub classes: usize,
    pub n1: u64,
    pub beta: f64,
    pub seed: u64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("classes must be at least 1".into()));
        }
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 1, got {}", self.beta)));
        }
        if (self.n1 as f64) < self.beta {
            return Err(Error::Config(format!("n1 = {} is below beta = {}", self.n1, self.beta)));
        }
        if self.classes < 2 && self.beta > 1.0 {
            return Err(Error::Config("an imbalance ratio needs at least two classes".into()));
        }
        Ok(())
    }
}

/// `n_i = round(n1 · β^(−(i−1)/(C−1)))`, at least 1.
pub fn longtail_counts(spec: &LongTailSpec) -> Result<Vec<u64>> {
    spec.validate()?;
    if spec.classes == 1 {
        return Ok(vec![spec.n1]);
    }
    let c1 = (spec.classes - 1) as f64;
    Ok((0..spec.classes)
        .map(|i| ((spec.n1 as f64) * spec.beta.powf(-(i as f64) / c1)).round().max(1.0) as u64)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

/// Head if `n > hi`, tail if `n < lo`, medium otherwise.
pub fn split_groups(counts: &[u64], thresholds: (u64, u64)) -> Result<Vec<Group>> {
    let (hi, lo) = thresholds;
    if !(hi > lo && lo >= 1) {
        return Err(Error::Config(format!("group thresholds need hi > lo >= 1, got ({hi}, {lo})")));
    }
    Ok(counts
        .iter()
        .map(|&n| {
            if n > hi {
                Group::Head
            } else if n < lo {
                Group::Tail
            } else {
                Group::Medium
            }
        })
        .collect())
}

pub const DEFAULT_GROUP_THRESHOLDS: (u64, u64) = (100, 20);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub grid: usize,
    pub patch: usize,
    /// Seed of the class patterns.
    pub world_seed: u64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub train: LongTailSpec,
    pub test_per_class: usize,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.grid == 0 || self.patch == 0 || self.grid % self.patch != 0 {
            return Err(Error::Config(format!("patch {} must divide grid {}", self.patch, self.grid)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.train.classes
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        format!("{:x}", h.finalize())
    }
}

/// Class patterns for a world: each a `grid × grid` N(0, 1) field.
pub fn class_patterns(world_seed: u64, classes: usize, grid: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| crate::rng::normal(&mut crate::rng::stream(world_seed, PATTERN_STREAM + c as u64), &[grid * grid], 1.0).data)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × grid × grid`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn grid(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut c = vec![0; self.classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Gathers the given sample indices into a `k × grid × grid` batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let g = self.grid();
        let per = g * g;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data[i * per..(i + 1) * per]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&[idx.len(), g, g], data).expect("batch layout"), labels)
    }
}

fn draw(patterns: &[Vec<f64>], counts: &[u64], noise: f64, seed: u64, stream_base: u64, grid: usize) -> Dataset {
    let per = grid * grid;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, (&n, pattern)) in counts.iter().zip(patterns).enumerate() {
        let mut rng = crate::rng::stream(seed, stream_base + c as u64);
        for _ in 0..n {
            let eps = crate::rng::normal(&mut rng, &[per], noise);
            data.extend(pattern.iter().zip(&eps.data).map(|(p, e)| p + e));
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset { images: Tensor::new(&[n, grid, grid], data).expect("dataset layout"), labels, classes: counts.len() }
}

/// Long-tailed training set and balanced test set.
pub fn generate(task: &SyntheticTaskSpec) -> Result<(Dataset, Dataset)> {
    task.validate()?;
    let counts = longtail_counts(&task.train)?;
    let patterns = class_patterns(task.world_seed, task.classes(), task.grid);
    let train = draw(&patterns, &counts, task.noise, task.train.seed, 0, task.grid);
    let test_counts = vec![task.test_per_class as u64; task.classes()];
    let test = draw(&patterns, &test_counts, task.noise, task.train.seed, TEST_STREAM, task.grid);
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: Option<SyntheticTaskSpec>,
    grid: usize,
    classes: usize,
    samples: usize,
    counts: Vec<u64>,
    groups: Option<Vec<Group>>,
}

/// Writes `meta.json`, `samples.bin` (LE f64) and `labels.bin` (LE u32).
pub fn save_dataset(
    dir: &Path,
    data: &Dataset,
    spec: Option<&SyntheticTaskSpec>,
    groups: Option<&[Group]>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        spec: spec.cloned(),
        grid: data.grid(),
        classes: data.classes,
        samples: data.len(),
        counts: data.class_counts(),
        groups: groups.map(<[Group]>::to_vec),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("samples.bin"))?);
    for v in &data.images.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join("labels.bin"))?);
    for &l in &data.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let raw = fs::read(dir.join("samples.bin"))?;
    let per = meta.grid * meta.grid;
    if raw.len() != meta.samples * per * 8 {
        return Err(Error::Format(format!("samples.bin holds {} bytes, expected {}", raw.len(), meta.samples * per * 8)));
    }
    let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let raw = fs::read(dir.join("labels.bin"))?;
    if raw.len() != meta.samples * 4 {
        return Err(Error::Format("labels.bin length does not match meta.json".into()));
    }
    let labels: Vec<usize> = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize).collect();
    if labels.iter().any(|&l| l >= meta.classes) {
        return Err(Error::Format("label out of range".into()));
    }
    Ok(Dataset { images: Tensor::new(&[meta.samples, meta.grid, meta.grid], data)?, labels, classes: meta.classes })
}

/// Pretraining recipe for the foundation stub.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationSpec {
    pub encoder: EncoderConfig,
    pub per_class: u64,
    pub noise: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub templates: usize,
    pub jitter: f64,
    pub eval_per_class: usize,
}

impl Default for FoundationSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig { mode: AdapterMode::Plain, ..EncoderConfig::default() },
            per_class: 200,
            noise: 0.3,
            epochs: 8,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            seed: 1234,
            templates: 8,
            jitter: 0.05,
            eval_per_class: 100,
        }
    }
}

impl FoundationSpec {
    pub fn hash_with(&self, world_seed: u64, classes: usize) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        h.update(world_seed.to_le_bytes());
        h.update((classes as u64).to_le_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Frozen pre-trained encoder plus the pseudo-text embeddings derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct FoundationBundle {
    pub config: EncoderConfig,
    pub weights: EncoderWeights,
    /// Unit-norm class-mean CLS features, `C × d`.
    pub class_means: Tensor,
    pub text: TextEmbeddingSet,
    /// Balanced held-out accuracy of the pretrained cosine head.
    pub pretrain_accuracy: f64,
}

impl FoundationBundle {
    pub fn checksum(&self) -> String {
        let mut set = NamedTensors(vec![("class_means".into(), self.class_means.clone())]);
        for (c, rows) in self.text.embeddings.iter().enumerate() {
            for (t, e) in rows.iter().enumerate() {
                set.0.push((format!("text.{c}.{t}"), Tensor::vector(e.clone())));
            }
        }
        let mut h = Sha256::new();
        h.update(self.weights.checksum());
        h.update(set.checksum());
        format!("{:x}", h.finalize())
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.shape()[0]
    }
}

#[derive(Clone, Debug)]
struct Pretrain {
    weights: EncoderWeights,
    head: Tensor,
}

impl ParamSet for Pretrain {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.weights.visit(f);
        f("head", &self.head.data);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.weights.visit_mut(f);
        f("head", &mut self.head.data);
    }
}

/// CLS features of a dataset under a plain encoder, in batches.
pub fn plain_features(cfg: &EncoderConfig, weights: &EncoderWeights, data: &Dataset) -> Result<Tensor> {
    let plain = cfg.with_mode(AdapterMode::Plain);
    let none = Adapters::none(cfg.blocks);
    let mut out = Vec::with_capacity(data.len() * cfg.width);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, _) = data.batch(chunk);
        out.extend(encode_traced(&plain, weights, &none, &x, None)?.features.data);
    }
    Tensor::new(&[data.len(), cfg.width], out)
}

pub fn argmax_rows(z: &Tensor) -> Vec<usize> {
    z.data
        .chunks(z.cols())
        .map(|r| (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best }))
        .collect()
}

/// Pretrains a plain encoder and cosine head on a balanced draw, then derives
/// `T_n` jittered copies of the unit-norm class-mean features as template embeddings.
pub fn build_foundation(world_seed: u64, classes: usize, spec: &FoundationSpec) -> Result<FoundationBundle> {
    let cfg = spec.encoder.with_mode(AdapterMode::Plain);
    cfg.validate()?;
    if spec.templates == 0 || spec.batch_size == 0 || spec.per_class == 0 {
        return Err(Error::Config("foundation needs templates, batch size and samples > 0".into()));
    }
    let task = SyntheticTaskSpec {
        grid: cfg.grid,
        patch: cfg.patch,
        world_seed,
        noise: spec.noise,
        train: LongTailSpec { classes, n1: spec.per_class, beta: 1.0, seed: spec.seed },
        test_per_class: spec.eval_per_class,
    };
    let (train, test) = generate(&task)?;

    let mut rng = crate::rng::stream(spec.seed, 7);
    let mut params = Pretrain {
        weights: EncoderWeights::init(&cfg, &mut rng)?,
        head: l2_normalize_rows(&crate::rng::normal(&mut rng, &[classes, cfg.width], 1.0)),
    };
    let none = Adapters::none(cfg.blocks);
    let mut none_grads = none.clone();
    let offsets = vec![0.0; classes];
    let mut opt = Sgd::new(&params, spec.momentum);
    let per_epoch = train.len().div_ceil(spec.batch_size);
    let total = per_epoch * spec.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut crate::rng::stream(spec.seed, 100 + epoch as u64));
        for chunk in order.chunks(spec.batch_size) {
            let (x, y) = train.batch(chunk);
            let trace = encode_traced(&cfg, &params.weights, &none, &x, None)?;
            let z = cosine_logits(&trace.features, &params.head, DEFAULT_LOGIT_SCALE)?;
            let (loss, dz) = adjusted_cross_entropy(&z, &y, &offsets)?;
            if !loss.is_finite() {
                return Err(Error::TrainingAborted(format!("foundation loss {loss} at step {step}")));
            }
            let mut grads = zeros_like(&params);
            let (df, dw) = cosine_logits_backward(&trace.features, &params.head, &dz, DEFAULT_LOGIT_SCALE)?;
            grads.head = dw;
            encode_backward(&cfg, &trace, &df, &params.weights, &none, &mut none_grads, Some(&mut grads.weights))?;
            opt.step(&mut params, &grads, cosine_lr(step, total, spec.lr));
            step += 1;
        }
    }

    let test_f = plain_features(&cfg, &params.weights, &test)?;
    let pred = argmax_rows(&cosine_logits(&test_f, &params.head, 1.0)?);
    let correct = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    let pretrain_accuracy = correct as f64 / test.len() as f64;

    let train_f = plain_features(&cfg, &params.weights, &train)?;
    let mut means = Tensor::zeros(&[classes, cfg.width]);
    for (i, &l) in train.labels.iter().enumerate() {
        let row = train_f.row(i).to_vec();
        means.row_mut(l).iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let class_means = l2_normalize_rows(&means);
    let mut jitter_rng = crate::rng::stream(spec.seed, 8);
    let embeddings = (0..classes)
        .map(|c| {
            (0..spec.templates)
                .map(|_| {
                    let n = crate::rng::normal(&mut jitter_rng, &[cfg.width], spec.jitter);
                    class_means.row(c).iter().zip(&n.data).map(|(m, e)| m + e).collect()
                })
                .collect()
        })
        .collect();
    let names = crate::heads::templates().iter().cycle().take(spec.templates).map(|s| s.to_string()).collect();
    let text = TextEmbeddingSet::new(embeddings, names)?;
    Ok(FoundationBundle { config: cfg, weights: params.weights, class_means, text, pretrain_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lt(classes: usize, n1: u64, beta: f64) -> LongTailSpec {
        LongTailSpec { classes, n1, beta, seed: 0 }
    }

    fn task(noise: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec { grid: 8, patch: 4, world_seed: 11, noise, train: lt(4, 20, 4.0), test_per_class: 5 }
    }

    #[test]
    fn counts_examples() {
        assert_eq!(longtail_counts(&lt(5, 37, 1.0)).unwrap(), vec![37; 5]);
        assert_eq!(longtail_counts(&lt(2, 100, 100.0)).unwrap(), vec![100, 1]);
        let c = longtail_counts(&lt(10, 500, 100.0)).unwrap();
        assert_eq!((c[0], c[9]), (500, 5));
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert!(longtail_counts(&lt(1, 100, 10.0)).is_err());
        assert!(longtail_counts(&lt(3, 5, 10.0)).is_err());
    }

    #[test]
    fn group_examples() {
        assert_eq!(split_groups(&[150, 20, 100, 101, 19], (100, 20)).unwrap(), vec![
            Group::Head,
            Group::Medium,
            Group::Medium,
            Group::Head,
            Group::Tail
        ]);
        let g = split_groups(&longtail_counts(&lt(10, 500, 100.0)).unwrap(), DEFAULT_GROUP_THRESHOLDS).unwrap();
        assert_eq!(g.len(), 10);
        assert!(split_groups(&[1], (5, 5)).is_err());
        assert!(split_groups(&[1], (5, 0)).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_balanced_on_test() {
        let (a, ta) = generate(&task(0.5)).unwrap();
        let (b, tb) = generate(&task(0.5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.class_counts(), longtail_counts(&task(0.5).train).unwrap());
        assert!(ta.class_counts().iter().all(|&n| n == 5));
    }

    #[test]
    fn zero_noise_reproduces_patterns() {
        let (train, _) = generate(&task(0.0)).unwrap();
        let patterns = class_patterns(11, 4, 8);
        for (i, &l) in train.labels.iter().enumerate() {
            assert_eq!(&train.images.data[i * 64..(i + 1) * 64], &patterns[l][..]);
        }
    }

    #[test]
    fn class_means_converge_to_patterns() {
        let sigma = 0.7;
        let t = SyntheticTaskSpec { train: lt(2, 1000, 1.0), ..task(sigma) };
        let (train, _) = generate(&t).unwrap();
        let patterns = class_patterns(11, 2, 8);
        let bound = 3.0 * sigma / (1000f64).sqrt();
        for c in 0..2 {
            for p in 0..64 {
                let mean: f64 = (0..train.len())
                    .filter(|&i| train.labels[i] == c)
                    .map(|i| train.images.data[i * 64 + p])
                    .sum::<f64>()
                    / 1000.0;
                // 3σ per pixel; allow a few of 128 pixels to fall outside.
                if (mean - patterns[c][p]).abs() > 1.5 * bound {
                    panic!("pixel {p} of class {c}: {mean} vs {}", patterns[c][p]);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = task(0.3);
        let (train, _) = generate(&t).unwrap();
        let groups = split_groups(&train.class_counts(), (10, 6)).unwrap();
        save_dataset(dir.path(), &train, Some(&t), Some(&groups)).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), train);
        assert_eq!(fs::metadata(dir.path().join("labels.bin")).unwrap().len(), 4 * train.len() as u64);
    }

    #[test]
    fn foundation_is_accurate_deterministic_and_unit_norm() {
        let spec = FoundationSpec::default();
        let a = build_foundation(5, 10, &spec).unwrap();
        assert!(a.pretrain_accuracy > 0.9, "pretrain accuracy {}", a.pretrain_accuracy);
        for c in 0..10 {
            let n: f64 = a.class_means.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
        }
        assert_eq!(a.text.templates_per_class(), spec.templates);
        let b = build_foundation(5, 10, &spec).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    proptest! {
        #[test]
        fn counts_are_monotone_with_endpoint_ratio(classes in 2usize..40, n1 in 50u64..2000, beta in 1.0..50.0f64) {
            let c = longtail_counts(&lt(classes, n1, beta)).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(c.iter().all(|&n| n >= 1));
            prop_assert_eq!(c[0], n1);
            let expected_last = n1 as f64 / beta;
            prop_assert!((c[classes - 1] as f64 - expected_last).abs() <= 1.0);
        }

        #[test]
        fn groups_partition_classes(counts in proptest::collection::vec(1u64..500, 1..30)) {
            let g = split_groups(&counts, DEFAULT_GROUP_THRESHOLDS).unwrap();
            prop_assert_eq!(g.len(), counts.len());
        }
    }
}
