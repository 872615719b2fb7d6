//! Verification and study tools: the block-partitioned attention expansion,
//! the marginal-ratio study, attention export and parameter counts.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::encoder::{encode, Adapters, EncoderConfig, EncoderWeights};
use crate::sg_adapter::Guidance;
use crate::{Error, Result, Tensor};

/// `(Q Kᵀ) V` for one head, computed directly and as the eight-term expansion
/// over `f = [f1, f2]` with row-partitioned `W_q`, `W_k`, `W_v`. Returns the max
/// absolute difference.
pub fn msa_decomposition_discrepancy(f: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<f64> {
    let d = f.cols();
    if d % 2 != 0 {
        return Err(Error::Shape(format!("feature width {d} must be even")));
    }
    for w in [w_q, w_k, w_v] {
        if w.rows() != d {
            return Err(Error::Shape(format!("projection has {} rows for width {d}", w.rows())));
        }
    }
    let h = d / 2;
    let f1 = f.slice_cols(0, h);
    let f2 = f.slice_cols(h, h);
    let split = |w: &Tensor| -> Result<(Tensor, Tensor)> {
        let k = w.cols();
        Ok((Tensor::new(&[h, k], w.data[..h * k].to_vec())?, Tensor::new(&[h, k], w.data[h * k..].to_vec())?))
    };
    let (wq1, wq2) = split(w_q)?;
    let (wk1, wk2) = split(w_k)?;
    let (wv1, wv2) = split(w_v)?;

    let direct = f.matmul(w_q)?.matmul_t(&f.matmul(w_k)?)?.matmul(&f.matmul(w_v)?)?;

    let q = [f1.matmul(&wq1)?, f2.matmul(&wq2)?];
    let k = [f1.matmul(&wk1)?, f2.matmul(&wk2)?];
    let v = [f1.matmul(&wv1)?, f2.matmul(&wv2)?];
    let mut expanded = Tensor::zeros(direct.shape());
    for vi in &v {
        for qi in &q {
            for ki in &k {
                expanded.add_assign(&qi.matmul_t(ki)?.matmul(vi)?);
            }
        }
    }
    Ok(direct.max_abs_diff(&expanded))
}

/// Random instance of [`msa_decomposition_discrepancy`] with `b` tokens.
pub fn msa_decomposition_check(d: usize, d_k: usize, b: usize, seed: u64) -> Result<f64> {
    let mut rng = crate::rng::stream(seed, 0);
    let f = crate::rng::normal(&mut rng, &[b, d], 1.0);
    let w = |rng: &mut rand_chacha::ChaCha8Rng| crate::rng::normal(rng, &[d, d_k], 1.0 / (d as f64).sqrt());
    let (wq, wk, wv) = (w(&mut rng), w(&mut rng), w(&mut rng));
    msa_decomposition_discrepancy(&f, &wq, &wk, &wv)
}

/// Class-conditional Gaussians `N(m_y, Σ_y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianClassModel {
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianClassModel {
    /// Means drawn as `N(0, spread²·I)`, covariance `σ²·I` for every class.
    pub fn isotropic(classes: usize, dim: usize, spread: f64, sigma: f64, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, 0);
        let means = (0..classes).map(|_| crate::rng::normal(&mut rng, &[dim], spread).data).collect();
        let cov = (0..dim).map(|i| (0..dim).map(|j| if i == j { sigma * sigma } else { 0.0 }).collect()).collect::<Vec<_>>();
        Self { means, covariances: vec![cov; classes] }
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }
}

/// Cholesky factor and log-determinant of an SPD matrix.
struct Gaussian {
    mean: Vec<f64>,
    chol: Vec<Vec<f64>>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: Vec<f64>, cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("covariance does not match mean dimension".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i][j] - cov[j][i]).abs() > 1e-12 * (1.0 + cov[i][j].abs()) {
                    return Err(Error::Domain("covariance is not symmetric".into()));
                }
            }
        }
        let mut l = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = cov[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if i == j {
                    if !(s > 1e-300) {
                        return Err(Error::Domain("covariance is singular or not positive definite".into()));
                    }
                    l[i][i] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        let log_det = 2.0 * (0..d).map(|i| l[i][i].ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self { mean, chol: l, log_norm })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut y = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (x[i] - self.mean[i]) - (0..i).map(|k| self.chol[i][k] * y[k]).sum::<f64>();
            y[i] = s / self.chol[i][i];
        }
        self.log_norm - 0.5 * y.iter().map(|v| v * v).sum::<f64>()
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d).map(|i| self.mean[i] + (0..=i).map(|k| self.chol[i][k] * z[k]).sum::<f64>()).collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioStudyResult {
    /// Mean of `P'_s(x) / P_t(x)` over test draws of each class.
    pub ratios: Vec<f64>,
    pub counts: Vec<u64>,
    /// `None` when either series is constant.
    pub pearson_r: Option<f64>,
    pub p_value: Option<f64>,
    /// Grid point minimizing the squared error of `μ·n^γ` against the ratios.
    pub best_mu: f64,
    pub best_gamma: f64,
    pub fit_rmse: f64,
    pub gamma_grid: Vec<f64>,
    pub mu_grid: Vec<f64>,
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` under the null of zero correlation (Student t, `n − 2` dof).
pub fn pearson_p_value(r: f64, n: usize) -> Option<f64> {
    if n < 3 {
        return None;
    }
    if r.abs() >= 1.0 {
        return Some(0.0);
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Monte-Carlo study of the training/test marginal ratio per class.
///
/// The training marginal mixes class conditionals whose means are estimated from
/// each class's `n_i` training draws, weighted by `n_i / S_N`; the test marginal
/// mixes the true conditionals uniformly. Both are evaluated analytically at
/// test draws of every class.
pub fn marginal_ratio_study(
    model: &GaussianClassModel,
    counts: &[u64],
    gamma_grid: &[f64],
    mu_grid: &[f64],
    test_per_class: usize,
    seed: u64,
) -> Result<RatioStudyResult> {
    let c = model.classes();
    if counts.len() != c || c == 0 {
        return Err(Error::Shape(format!("{} counts for {c} classes", counts.len())));
    }
    if counts.contains(&0) || test_per_class == 0 {
        return Err(Error::Domain("every class needs training and test draws".into()));
    }
    if gamma_grid.is_empty() || mu_grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let truth = (0..c)
        .map(|k| Gaussian::new(model.means[k].clone(), &model.covariances[k]))
        .collect::<Result<Vec<_>>>()?;
    let total: u64 = counts.iter().sum();
    let log_ps: Vec<f64> = counts.iter().map(|&n| (n as f64 / total as f64).ln()).collect();
    let log_pt = -(c as f64).ln();

    let mut estimated = Vec::with_capacity(c);
    for k in 0..c {
        let mut rng = crate::rng::stream(seed, k as u64);
        let mut mean = vec![0.0; model.dim()];
        for _ in 0..counts[k] {
            let x = truth[k].sample(&mut rng);
            mean.iter_mut().zip(&x).for_each(|(m, v)| *m += v / counts[k] as f64);
        }
        estimated.push(Gaussian::new(mean, &model.covariances[k])?);
    }

    let mut ratios = Vec::with_capacity(c);
    let mut ls = vec![0.0; c];
    let mut lt = vec![0.0; c];
    for i in 0..c {
        let mut rng = crate::rng::stream(seed, (1 << 32) + i as u64);
        let mut acc = 0.0;
        for _ in 0..test_per_class {
            let x = truth[i].sample(&mut rng);
            for k in 0..c {
                ls[k] = log_ps[k] + estimated[k].log_pdf(&x);
                lt[k] = log_pt + truth[k].log_pdf(&x);
            }
            acc += (log_sum_exp(&ls) - log_sum_exp(&lt)).exp();
        }
        ratios.push(acc / test_per_class as f64);
    }

    let sizes: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let pearson_r = pearson(&ratios, &sizes);
    let p_value = pearson_r.and_then(|r| pearson_p_value(r, c));

    let (mut best_mu, mut best_gamma, mut best) = (mu_grid[0], gamma_grid[0], f64::INFINITY);
    for &mu in mu_grid {
        for &g in gamma_grid {
            let err: f64 = ratios.iter().zip(&sizes).map(|(r, n)| (r - mu * n.powf(g)).powi(2)).sum();
            if err < best {
                (best_mu, best_gamma, best) = (mu, g, err);
            }
        }
    }
    Ok(RatioStudyResult {
        ratios,
        counts: counts.to_vec(),
        pearson_r,
        p_value,
        best_mu,
        best_gamma,
        fit_rmse: (best / c as f64).sqrt(),
        gamma_grid: gamma_grid.to_vec(),
        mu_grid: mu_grid.to_vec(),
    })
}

/// Per-sample attention stacks, each `blocks × heads × tokens × tokens`.
pub fn attention_maps(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: &Adapters,
    guidance: Option<&Guidance>,
    images: &Tensor,
) -> Result<Vec<Tensor>> {
    let (_, per_block) = encode(cfg, weights, adapters, images, guidance)?;
    let batch = images.shape()[0];
    let (h, t) = (cfg.heads, cfg.tokens());
    let per = h * t * t;
    Ok((0..batch)
        .map(|s| {
            let data = per_block.iter().flat_map(|a| a.data[s * per..(s + 1) * per].to_vec()).collect();
            Tensor::new(&[cfg.blocks, h, t, t], data).expect("attention layout")
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub model: String,
    pub sample: usize,
    pub file: String,
    pub cls_file: String,
    /// `[blocks, heads, tokens, tokens]`
    pub shape: Vec<usize>,
}

/// CLS query rows of an attention stack: `blocks × heads × tokens`.
pub fn cls_rows(att: &Tensor) -> Tensor {
    let s = att.shape();
    let (l, h, t) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(l * h * t);
    for lh in 0..l * h {
        out.extend_from_slice(&att.data[lh * t * t..lh * t * t + t]);
    }
    Tensor::new(&[l, h, t], out).expect("cls layout")
}

fn write_f64s(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes each model's per-sample attention (LE f64) and CLS rows, plus `index.json`.
pub fn export_attention(dir: &Path, models: &[(&str, &[Tensor])]) -> Result<Vec<AttentionEntry>> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::new();
    for (name, maps) in models {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid model name {name:?}")));
        }
        for (i, att) in maps.iter().enumerate() {
            let file = format!("{name}_{i:04}.bin");
            let cls_file = format!("{name}_{i:04}_cls.bin");
            write_f64s(&dir.join(&file), &att.data)?;
            write_f64s(&dir.join(&cls_file), &cls_rows(att).data)?;
            index.push(AttentionEntry { model: name.to_string(), sample: i, file, cls_file, shape: att.shape().to_vec() });
        }
    }
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn read_attention(dir: &Path, entry: &AttentionEntry) -> Result<Tensor> {
    let raw = fs::read(dir.join(&entry.file))?;
    let n: usize = entry.shape.iter().product();
    if raw.len() != n * 8 {
        return Err(Error::Format(format!("{} holds {} bytes, expected {}", entry.file, raw.len(), n * 8)));
    }
    Tensor::new(&entry.shape, raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub method: String,
    pub formula: String,
    pub per_block: usize,
    pub total: usize,
}

/// Per-block and `L`-block parameter counts of the lightweight fine-tuning modules.
pub fn parameter_table(d: usize, r: usize, heads: usize, prompts: usize, blocks: usize) -> Result<Vec<ParamRow>> {
    if d == 0 || r == 0 || heads == 0 || prompts == 0 || blocks == 0 {
        return Err(Error::Config("parameter table arguments must be positive".into()));
    }
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let rows = [
        ("BitFit", "11d", 11 * d),
        ("VPT", "pd", prompts * d),
        ("Adapter", "(2r+3)d + r", (2 * r + 3) * d + r),
        ("LoRA", "4rd", 4 * r * d),
        ("AdaptFormer", "(2r+3)d + r + 1", crate::encoder::adaptformer_count_params(d, r)),
        ("SG-Adapter", "(5r+d+4)d + 3r + 2", crate::sg_adapter::count_params(d, r)),
    ];
    Ok(rows
        .into_iter()
        .map(|(m, f, n)| ParamRow { method: m.into(), formula: f.into(), per_block: n, total: n * blocks })
        .collect())
}
