//! Logit-adjusted cross entropy, the distribution-mismatch compensation
//! factor, and the diagnostics behind it.
//!
//! Every softmax here is evaluated in log space: the class-count and
//! compensation terms enter as additive offsets `log n_k + log Λ_k`, so the
//! multiplicative forms never overflow.

use serde::{Deserialize, Serialize};

use crate::tensor::softmax_in_place;
use crate::{Error, Result, Tensor};

/// Per-class training counts and the summaries the losses need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequencies {
    pub counts: Vec<u64>,
    pub total: u64,
    pub min: u64,
    /// `max / min`, the imbalance ratio.
    pub beta: f64,
}

impl ClassFrequencies {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Domain("no classes".into()));
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Domain(format!("class {i} has zero samples")));
        }
        let total = counts.iter().sum();
        let min = *counts.iter().min().unwrap();
        let max = *counts.iter().max().unwrap();
        Ok(Self { counts, total, min, beta: max as f64 / min as f64 })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Training label frequencies `n_i / S_N`.
    pub fn priors(&self) -> Vec<f64> {
        self.counts.iter().map(|&n| n as f64 / self.total as f64).collect()
    }
}

/// Hyperparameters of the compensation factor and the four-term objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    /// CIFAR-100-LT (β = 100) settings.
    fn default() -> Self {
        Self { mu: 0.5, gamma: 0.05, lambda1: 0.015, lambda2: 0.015, lambda3: 0.4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `Λ_i = μ · n_i^γ · S_N / (C · n_min)`.
pub fn compensation_factors(freq: &ClassFrequencies, cfg: &LossConfig) -> Vec<f64> {
    log_compensation_factors(freq, cfg).into_iter().map(f64::exp).collect()
}

fn log_compensation_factors(freq: &ClassFrequencies, cfg: &LossConfig) -> Vec<f64> {
    let c = freq.num_classes() as f64;
    let shared = cfg.mu.ln() + (freq.total as f64).ln() - c.ln() - (freq.min as f64).ln();
    freq.counts.iter().map(|&n| shared + cfg.gamma * (n as f64).ln()).collect()
}

/// Additive log-space offsets for the adjusted softmax: `log n_k`, plus `log Λ_k` when compensating.
pub fn class_log_offsets(freq: &ClassFrequencies, compensation: Option<&LossConfig>) -> Vec<f64> {
    let mut off: Vec<f64> = freq.counts.iter().map(|&n| (n as f64).ln()).collect();
    if let Some(cfg) = compensation {
        for (o, l) in off.iter_mut().zip(log_compensation_factors(freq, cfg)) {
            *o += l;
        }
    }
    off
}

/// Mean over the batch of `-log softmax(z + offsets)_y`, with its gradient w.r.t. `z`.
pub fn adjusted_cross_entropy(z: &Tensor, labels: &[usize], offsets: &[f64]) -> Result<(f64, Tensor)> {
    let c = z.cols();
    if offsets.len() != c {
        return Err(Error::Shape(format!("{} offsets for {c} classes", offsets.len())));
    }
    if z.rows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", z.rows(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Domain(format!("label {y} out of range for {c} classes")));
    }
    z.ensure_finite()?;
    let b = labels.len() as f64;
    let mut grad = Tensor::zeros(z.shape());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        for ((g, &zv), &o) in row.iter_mut().zip(z.row(i)).zip(offsets) {
            *g = zv + o;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        softmax_in_place(row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g /= b);
    }
    Ok((total / b, grad))
}

/// Logit-adjusted loss: `-log(e^{z_y} n_y / Σ_k e^{z_k} n_k)`, batch mean.
pub fn la_loss(z: &Tensor, labels: &[usize], freq: &ClassFrequencies) -> Result<f64> {
    Ok(adjusted_cross_entropy(z, labels, &class_log_offsets(freq, None))?.0)
}

pub fn la_loss_grad(z: &Tensor, labels: &[usize], freq: &ClassFrequencies) -> Result<(f64, Tensor)> {
    adjusted_cross_entropy(z, labels, &class_log_offsets(freq, None))
}

/// Compensated loss: `-log(e^{z_y} n_y Λ_y / Σ_k e^{z_k} n_k Λ_k)`, batch mean.
pub fn cf_loss(z: &Tensor, labels: &[usize], freq: &ClassFrequencies, cfg: &LossConfig) -> Result<f64> {
    Ok(cf_loss_grad(z, labels, freq, cfg)?.0)
}

pub fn cf_loss_grad(
    z: &Tensor,
    labels: &[usize],
    freq: &ClassFrequencies,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    adjusted_cross_entropy(z, labels, &class_log_offsets(freq, Some(cfg)))
}

/// Gradients of [`composite_loss`] with respect to each of its four logit sets.
#[derive(Clone, Debug)]
pub struct CompositeGrads {
    pub z: Tensor,
    pub z_v: Tensor,
    pub z_t: Tensor,
    pub z_hat: Tensor,
}

/// Per-term values of the composite objective, before weighting.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompositeTerms {
    pub fine_tuned: f64,
    pub visual_swap: f64,
    pub textual_swap: f64,
    pub interchanged: f64,
}

/// `ℓ(z) + λ1 ℓ(z_v) + λ2 ℓ(z_t) + λ3 ℓ(ẑ)` where each `ℓ` uses the supplied class offsets.
/// Terms with a zero weight are skipped entirely.
pub fn composite_with_offsets(
    logits: [&Tensor; 4],
    labels: &[usize],
    offsets: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, CompositeTerms, CompositeGrads)> {
    let [z, z_v, z_t, z_hat] = logits;
    for t in [z_v, z_t, z_hat] {
        if t.shape() != z.shape() {
            return Err(Error::Shape(format!("logit sets {:?} vs {:?}", z.shape(), t.shape())));
        }
    }
    let mut terms = CompositeTerms::default();
    let (l0, g0) = adjusted_cross_entropy(z, labels, offsets)?;
    terms.fine_tuned = l0;
    let mut total = l0;
    let mut weighted = |w: f64, t: &Tensor, slot: &mut f64| -> Result<Tensor> {
        if w == 0.0 {
            return Ok(t.zeros_like());
        }
        let (l, g) = adjusted_cross_entropy(t, labels, offsets)?;
        *slot = l;
        total += w * l;
        Ok(g.scale(w))
    };
    let gv = weighted(cfg.lambda1, z_v, &mut terms.visual_swap)?;
    let gt = weighted(cfg.lambda2, z_t, &mut terms.textual_swap)?;
    let gh = weighted(cfg.lambda3, z_hat, &mut terms.interchanged)?;
    Ok((total, terms, CompositeGrads { z: g0, z_v: gv, z_t: gt, z_hat: gh }))
}

/// Four-term objective with the compensated loss on every term.
pub fn composite_loss(
    z: &Tensor,
    z_v: &Tensor,
    z_t: &Tensor,
    z_hat: &Tensor,
    labels: &[usize],
    freq: &ClassFrequencies,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(composite_loss_grad(z, z_v, z_t, z_hat, labels, freq, cfg)?.0)
}

pub fn composite_loss_grad(
    z: &Tensor,
    z_v: &Tensor,
    z_t: &Tensor,
    z_hat: &Tensor,
    labels: &[usize],
    freq: &ClassFrequencies,
    cfg: &LossConfig,
) -> Result<(f64, CompositeGrads)> {
    cfg.validate()?;
    let offsets = class_log_offsets(freq, Some(cfg));
    let (l, _, g) = composite_with_offsets([z, z_v, z_t, z_hat], labels, &offsets, cfg)?;
    Ok((l, g))
}

fn check_priors(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("{name} has a zero or negative prior")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `z_i - log P_s(i) + log P_t(i)` applied to every row of `z`.
pub fn post_compensate(z: &Tensor, train_priors: &[f64], test_priors: &[f64]) -> Result<Tensor> {
    check_priors("training priors", train_priors)?;
    check_priors("test priors", test_priors)?;
    if train_priors.len() != z.cols() || test_priors.len() != z.cols() {
        return Err(Error::Shape("prior length differs from class count".into()));
    }
    let shift: Vec<f64> =
        train_priors.iter().zip(test_priors).map(|(s, t)| t.ln() - s.ln()).collect();
    z.add_row_vector(&shift)
}

/// `Θ(i) = (P_s(i)/P_t(i)) · Σ_j (P_t(j)/P_s(j)) e^{z_j} / Σ_j e^{z_j}` for one logit vector.
pub fn theta_diagnostic(z: &[f64], train_priors: &[f64], test_priors: &[f64]) -> Result<Vec<f64>> {
    check_priors("training priors", train_priors)?;
    check_priors("test priors", test_priors)?;
    if train_priors.len() != z.len() || test_priors.len() != z.len() {
        return Err(Error::Shape("prior length differs from class count".into()));
    }
    let mut p = z.to_vec();
    softmax_in_place(&mut p);
    let bracket: f64 = p.iter().zip(train_priors.iter().zip(test_priors)).map(|(pj, (s, t))| t / s * pj).sum();
    Ok(train_priors.iter().zip(test_priors).map(|(s, t)| s / t * bracket).collect())
}

/// Exact `Υ = (1/C) Σ_j (S_N / n_j) e^{z_j} / Σ_j e^{z_j}` for a balanced test prior.
pub fn upsilon_exact(z: &[f64], freq: &ClassFrequencies) -> Result<f64> {
    if z.len() != freq.num_classes() {
        return Err(Error::Shape("logit length differs from class count".into()));
    }
    let mut p = z.to_vec();
    softmax_in_place(&mut p);
    let s = freq.total as f64;
    let c = z.len() as f64;
    Ok(p.iter().zip(&freq.counts).map(|(pj, &n)| s / n as f64 * pj).sum::<f64>() / c)
}

/// Upper bound `S_N / (C · n_min)` of [`upsilon_exact`].
pub fn upsilon_bound(freq: &ClassFrequencies) -> f64 {
    freq.total as f64 / (freq.num_classes() as f64 * freq.min as f64)
}
