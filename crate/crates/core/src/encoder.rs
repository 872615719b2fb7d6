//! A small ViT-style encoder with plain, AdaptFormer and semantic-guided blocks.
//!
//! Block recurrence (LN sits only in front of the MLP):
//!
//! ```text
//! f~    = MSA(f) + f
//! f_out = MLP(LN(f~)) + f~                      plain
//! f_out = MLP(LN(f~)) + s   · Adapter(f~) + f~  adaptformer
//! f_out = MLP(LN(f~)) + s_l · SG(f~, w̄)   + f~  sage
//! ```
//!
//! Activations are processed as a `(batch · tokens) × d` matrix; attention
//! runs per sample and head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::sg_adapter::{sg_backward, sg_forward_cached, Guidance, SgAdapterParams, SgCache};
use crate::tensor::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_cached, relu, softmax_in_place, LayerNormCache,
    LN_EPS,
};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Plain,
    #[serde(rename = "adaptformer")]
    AdaptFormer,
    Sage,
}

impl AdapterMode {
    pub fn as_u32(self) -> u32 {
        match self {
            Self::Plain => 0,
            Self::AdaptFormer => 1,
            Self::Sage => 2,
        }
    }

    pub fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Self::Plain),
            1 => Ok(Self::AdaptFormer),
            2 => Ok(Self::Sage),
            _ => Err(Error::Format(format!("unknown adapter mode {v}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub bottleneck: usize,
    /// Image side length in pixels.
    pub grid: usize,
    /// Patch side length in pixels.
    pub patch: usize,
    pub mode: AdapterMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { blocks: 2, width: 16, heads: 2, bottleneck: 4, grid: 8, patch: 4, mode: AdapterMode::Sage }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if self.patch == 0 || self.grid == 0 || self.grid % self.patch != 0 {
            return Err(Error::Config(format!("patch {} does not divide grid {}", self.patch, self.grid)));
        }
        if self.mode != AdapterMode::Plain && (self.bottleneck == 0 || self.bottleneck >= self.width) {
            return Err(Error::Config(format!(
                "bottleneck {} must satisfy 1 <= r < width {}",
                self.bottleneck, self.width
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.grid / self.patch
    }

    /// Patch count plus the prepended CLS token.
    pub fn tokens(&self) -> usize {
        self.patches_per_side().pow(2) + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn with_mode(mut self, mode: AdapterMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Patch projection, CLS vector and positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub patch_w: Tensor,
    pub patch_b: Vec<f64>,
    pub cls: Vec<f64>,
    pub pos: Tensor,
}

/// Attention, LN and MLP weights of one block. Q, K, V are stored fused
/// (d × d) and sliced into `heads` column groups of width `d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub mlp_w1: Tensor,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Tensor,
    pub mlp_b2: Vec<f64>,
}

impl BaseBlock {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        let b4 = 1.0 / (4.0 * d as f64).sqrt();
        Self {
            w_q: crate::rng::uniform(rng, &[d, d], b),
            w_k: crate::rng::uniform(rng, &[d, d], b),
            w_v: crate::rng::uniform(rng, &[d, d], b),
            w_o: crate::rng::uniform(rng, &[d, d], b),
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            mlp_w1: crate::rng::uniform(rng, &[d, 4 * d], b),
            mlp_b1: vec![0.0; 4 * d],
            mlp_w2: crate::rng::uniform(rng, &[4 * d, d], b4),
            mlp_b2: vec![0.0; d],
        }
    }

    pub fn width(&self) -> usize {
        self.ln_gain.len()
    }
}

/// Every non-adapter weight of the encoder. Frozen during fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub embedding: Embedding,
    pub blocks: Vec<BaseBlock>,
}

impl EncoderWeights {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let pd = cfg.patch_dim();
        let embedding = Embedding {
            patch_w: crate::rng::uniform(rng, &[pd, d], 1.0 / (pd as f64).sqrt()),
            patch_b: vec![0.0; d],
            cls: crate::rng::normal(rng, &[d], 0.5).data,
            pos: crate::rng::normal(rng, &[cfg.tokens(), d], 0.1),
        };
        let blocks = (0..cfg.blocks).map(|_| BaseBlock::init(d, rng)).collect();
        Ok(Self { embedding, blocks })
    }

    /// Checks array shapes against `cfg`.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.width;
        let e = &self.embedding;
        let ok = e.patch_w.shape() == [cfg.patch_dim(), d]
            && e.patch_b.len() == d
            && e.cls.len() == d
            && e.pos.shape() == [cfg.tokens(), d]
            && self.blocks.len() == cfg.blocks
            && self.blocks.iter().all(|b| {
                b.w_q.shape() == [d, d]
                    && b.w_k.shape() == [d, d]
                    && b.w_v.shape() == [d, d]
                    && b.w_o.shape() == [d, d]
                    && b.mlp_w1.shape() == [d, 4 * d]
                    && b.mlp_w2.shape() == [4 * d, d]
                    && b.ln_gain.len() == d
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("encoder weights do not match configuration".into()))
        }
    }
}

impl ParamSet for EncoderWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let e = &self.embedding;
        f("embed.patch_w", &e.patch_w.data);
        f("embed.patch_b", &e.patch_b);
        f("embed.cls", &e.cls);
        f("embed.pos", &e.pos.data);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("block.{i}.{s}");
            f(&n("w_q"), &b.w_q.data);
            f(&n("w_k"), &b.w_k.data);
            f(&n("w_v"), &b.w_v.data);
            f(&n("w_o"), &b.w_o.data);
            f(&n("ln.gain"), &b.ln_gain);
            f(&n("ln.bias"), &b.ln_bias);
            f(&n("mlp.w1"), &b.mlp_w1.data);
            f(&n("mlp.b1"), &b.mlp_b1);
            f(&n("mlp.w2"), &b.mlp_w2.data);
            f(&n("mlp.b2"), &b.mlp_b2);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let e = &mut self.embedding;
        f("embed.patch_w", &mut e.patch_w.data);
        f("embed.patch_b", &mut e.patch_b);
        f("embed.cls", &mut e.cls);
        f("embed.pos", &mut e.pos.data);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = |s: &str| format!("block.{i}.{s}");
            f(&n("w_q"), &mut b.w_q.data);
            f(&n("w_k"), &mut b.w_k.data);
            f(&n("w_v"), &mut b.w_v.data);
            f(&n("w_o"), &mut b.w_o.data);
            f(&n("ln.gain"), &mut b.ln_gain);
            f(&n("ln.bias"), &mut b.ln_bias);
            f(&n("mlp.w1"), &mut b.mlp_w1.data);
            f(&n("mlp.b1"), &mut b.mlp_b1);
            f(&n("mlp.w2"), &mut b.mlp_w2.data);
            f(&n("mlp.b2"), &mut b.mlp_b2);
        }
    }
}

/// Bottleneck adapter in parallel with the MLP: `ReLU(LN(f~) W_down + b_down) W_up + b_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptFormerParams {
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub w_down: Tensor,
    pub b_down: Vec<f64>,
    pub w_up: Tensor,
    pub b_up: Vec<f64>,
    pub scale: f64,
}

impl AdaptFormerParams {
    pub fn init(d: usize, r: usize, rng: &mut impl Rng) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::Config(format!("bottleneck r={r} must satisfy 1 <= r < d={d}")));
        }
        Ok(Self {
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            w_down: crate::rng::uniform(rng, &[d, r], 1.0 / (d as f64).sqrt()),
            b_down: vec![0.0; r],
            w_up: Tensor::zeros(&[r, d]),
            b_up: vec![0.0; d],
            scale: 0.1,
        })
    }
}

/// `(2r + 3)·d + r + 1`
pub fn adaptformer_count_params(d: usize, r: usize) -> usize {
    (2 * r + 3) * d + r + 1
}

impl ParamSet for AdaptFormerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("ln.gain", &self.ln_gain);
        f("ln.bias", &self.ln_bias);
        f("down.w", &self.w_down.data);
        f("down.b", &self.b_down);
        f("up.w", &self.w_up.data);
        f("up.b", &self.b_up);
        f("scale", std::slice::from_ref(&self.scale));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("ln.gain", &mut self.ln_gain);
        f("ln.bias", &mut self.ln_bias);
        f("down.w", &mut self.w_down.data);
        f("down.b", &mut self.b_down);
        f("up.w", &mut self.w_up.data);
        f("up.b", &mut self.b_up);
        f("scale", std::slice::from_mut(&mut self.scale));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockAdapter {
    None,
    AdaptFormer(AdaptFormerParams),
    Sage(SgAdapterParams),
}

impl BlockAdapter {
    pub fn mode(&self) -> AdapterMode {
        match self {
            Self::None => AdapterMode::Plain,
            Self::AdaptFormer(_) => AdapterMode::AdaptFormer,
            Self::Sage(_) => AdapterMode::Sage,
        }
    }
}

/// The trainable adapter stack, one entry per block.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapters {
    pub blocks: Vec<BlockAdapter>,
}

impl Adapters {
    pub fn init(cfg: &EncoderConfig, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|_| match cfg.mode {
                AdapterMode::Plain => Ok(BlockAdapter::None),
                AdapterMode::AdaptFormer => {
                    AdaptFormerParams::init(cfg.width, cfg.bottleneck, rng).map(BlockAdapter::AdaptFormer)
                }
                AdapterMode::Sage => {
                    SgAdapterParams::init(cfg.width, cfg.bottleneck, alpha, rng).map(BlockAdapter::Sage)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn none(blocks: usize) -> Self {
        Self { blocks: vec![BlockAdapter::None; blocks] }
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.blocks.len() != cfg.blocks {
            return Err(Error::Shape(format!("{} adapters for {} blocks", self.blocks.len(), cfg.blocks)));
        }
        if let Some(b) = self.blocks.iter().find(|b| b.mode() != cfg.mode) {
            return Err(Error::Config(format!("{:?} adapter in a {:?} encoder", b.mode(), cfg.mode)));
        }
        Ok(())
    }
}

impl ParamSet for Adapters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                BlockAdapter::None => {}
                BlockAdapter::AdaptFormer(p) => p.visit(&mut |n, a| f(&format!("adaptformer.{i}.{n}"), a)),
                BlockAdapter::Sage(p) => p.visit(&mut |n, a| f(&format!("sg.{i}.{n}"), a)),
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match b {
                BlockAdapter::None => {}
                BlockAdapter::AdaptFormer(p) => {
                    p.visit_mut(&mut |n, a| f(&format!("adaptformer.{i}.{n}"), a))
                }
                BlockAdapter::Sage(p) => p.visit_mut(&mut |n, a| f(&format!("sg.{i}.{n}"), a)),
            }
        }
    }
}

/// Multi-head self-attention intermediates for one block.
#[derive(Clone, Debug)]
pub struct MsaCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `batch × heads × tokens × tokens`, row-major.
    attention: Vec<f64>,
    concat: Tensor,
    batch: usize,
    tokens: usize,
    heads: usize,
}

impl MsaCache {
    pub fn attention(&self) -> Tensor {
        Tensor::new(&[self.batch, self.heads, self.tokens, self.tokens], self.attention.clone())
            .expect("attention layout")
    }
}

/// `Concat(head_1, …, head_h) · W_o` for a `batch × tokens × d` input, without the residual.
/// Returns the output and the attention probabilities (`batch × heads × tokens × tokens`).
pub fn msa_forward(x: &Tensor, block: &BaseBlock, heads: usize) -> Result<(Tensor, Tensor)> {
    let (out, cache) = msa_forward_cached(x, block, heads)?;
    Ok((out, cache.attention()))
}

fn msa_forward_cached(x: &Tensor, block: &BaseBlock, heads: usize) -> Result<(Tensor, MsaCache)> {
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!("attention input must be batch×tokens×d, got {:?}", x.shape())));
    }
    let (batch, tokens, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if d != block.width() || heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} with {heads} heads vs block width {}", block.width())));
    }
    let dk = d / heads;
    let q = x.matmul(&block.w_q)?;
    let k = x.matmul(&block.w_k)?;
    let v = x.matmul(&block.w_v)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut attention = vec![0.0; batch * heads * tokens * tokens];
    let mut concat = Tensor::zeros(x.shape());
    for s in 0..batch {
        let base = s * tokens;
        for h in 0..heads {
            let a = &mut attention[(s * heads + h) * tokens * tokens..(s * heads + h + 1) * tokens * tokens];
            for t1 in 0..tokens {
                let qrow = &q.data[(base + t1) * d + h * dk..(base + t1) * d + (h + 1) * dk];
                let arow = &mut a[t1 * tokens..(t1 + 1) * tokens];
                for (t2, slot) in arow.iter_mut().enumerate() {
                    let krow = &k.data[(base + t2) * d + h * dk..(base + t2) * d + (h + 1) * dk];
                    *slot = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(arow);
                let out = &mut concat.data[(base + t1) * d + h * dk..(base + t1) * d + (h + 1) * dk];
                for (t2, &p) in arow.iter().enumerate() {
                    let vrow = &v.data[(base + t2) * d + h * dk..(base + t2) * d + (h + 1) * dk];
                    for (o, vv) in out.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    let out = concat.matmul(&block.w_o)?;
    Ok((out, MsaCache { input: x.clone(), q, k, v, attention, concat, batch, tokens, heads }))
}

/// Returns `d input`; weight gradients go to `grads` when given.
fn msa_backward(
    d_out: &Tensor,
    cache: &MsaCache,
    block: &BaseBlock,
    grads: Option<&mut BaseBlock>,
) -> Result<Tensor> {
    let (batch, tokens, heads) = (cache.batch, cache.tokens, cache.heads);
    let d = block.width();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let d_concat = d_out.matmul_t(&block.w_o)?;
    let mut dq = Tensor::zeros(cache.q.shape());
    let mut dk_t = Tensor::zeros(cache.k.shape());
    let mut dv = Tensor::zeros(cache.v.shape());
    let mut d_scores = vec![0.0; tokens];
    for s in 0..batch {
        let base = s * tokens;
        for h in 0..heads {
            let a = &cache.attention[(s * heads + h) * tokens * tokens..(s * heads + h + 1) * tokens * tokens];
            let cols = h * dk..(h + 1) * dk;
            for t1 in 0..tokens {
                let dhead = &d_concat.data[(base + t1) * d..(base + t1 + 1) * d][cols.clone()];
                let arow = &a[t1 * tokens..(t1 + 1) * tokens];
                // dA = dhead · V_hᵀ, dV_h += Aᵀ · dhead
                for t2 in 0..tokens {
                    let vrow = &cache.v.data[(base + t2) * d..(base + t2 + 1) * d][cols.clone()];
                    d_scores[t2] = dhead.iter().zip(vrow).map(|(x, y)| x * y).sum();
                    let dvrow = &mut dv.data[(base + t2) * d..(base + t2 + 1) * d][cols.clone()];
                    for (g, x) in dvrow.iter_mut().zip(dhead) {
                        *g += arow[t2] * x;
                    }
                }
                let inner: f64 = d_scores.iter().zip(arow).map(|(g, p)| g * p).sum();
                for t2 in 0..tokens {
                    let ds = arow[t2] * (d_scores[t2] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in cols.clone() {
                        dq.data[(base + t1) * d + c] += ds * cache.k.data[(base + t2) * d + c];
                        dk_t.data[(base + t2) * d + c] += ds * cache.q.data[(base + t1) * d + c];
                    }
                }
            }
        }
    }
    let mut dx = dq.matmul_t(&block.w_q)?;
    dx.add_assign(&dk_t.matmul_t(&block.w_k)?);
    dx.add_assign(&dv.matmul_t(&block.w_v)?);
    if let Some(g) = grads {
        g.w_o.add_assign(&cache.concat.t_matmul(d_out)?);
        g.w_q.add_assign(&cache.input.t_matmul(&dq)?);
        g.w_k.add_assign(&cache.input.t_matmul(&dk_t)?);
        g.w_v.add_assign(&cache.input.t_matmul(&dv)?);
    }
    Ok(dx)
}

#[derive(Clone, Debug)]
enum AdapterCache {
    None,
    AdaptFormer { ln: LayerNormCache, normed: Tensor, pre: Tensor, act: Tensor, out: Tensor },
    Sage { cache: Box<SgCache>, out: Tensor },
}

/// Intermediates of one block's forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    msa: MsaCache,
    ln: LayerNormCache,
    ln_out: Tensor,
    mlp_pre: Tensor,
    mlp_act: Tensor,
    adapter: AdapterCache,
}

impl BlockCache {
    pub fn attention(&self) -> Tensor {
        self.msa.attention()
    }
}

/// One transformer block on a `batch × tokens × d` input.
pub fn block_forward(
    f_prev: &Tensor,
    block: &BaseBlock,
    adapter: &BlockAdapter,
    heads: usize,
    guidance: Option<&Guidance>,
) -> Result<(Tensor, Tensor)> {
    let (out, cache) = block_forward_cached(f_prev, block, adapter, heads, guidance)?;
    Ok((out, cache.attention()))
}

pub fn block_forward_cached(
    f_prev: &Tensor,
    block: &BaseBlock,
    adapter: &BlockAdapter,
    heads: usize,
    guidance: Option<&Guidance>,
) -> Result<(Tensor, BlockCache)> {
    match (adapter, guidance) {
        (BlockAdapter::Sage(_), None) => {
            return Err(Error::Config("semantic-guided block needs a guidance vector".into()))
        }
        (BlockAdapter::None | BlockAdapter::AdaptFormer(_), Some(_)) => {
            return Err(Error::Config("guidance supplied to a block without a semantic-guided adapter".into()))
        }
        _ => {}
    }
    let (msa_out, msa) = msa_forward_cached(f_prev, block, heads)?;
    let f_tilde = msa_out.add(f_prev)?;
    let (ln_out, ln) = layer_norm_cached(&f_tilde, &block.ln_gain, &block.ln_bias, LN_EPS)?;
    let mlp_pre = ln_out.matmul(&block.mlp_w1)?.add_row_vector(&block.mlp_b1)?;
    let mlp_act = mlp_pre.map(gelu);
    let mut out = mlp_act.matmul(&block.mlp_w2)?.add_row_vector(&block.mlp_b2)?;
    out.add_assign(&f_tilde);
    let adapter_cache = match adapter {
        BlockAdapter::None => AdapterCache::None,
        BlockAdapter::AdaptFormer(p) => {
            let (normed, ln) = layer_norm_cached(&f_tilde, &p.ln_gain, &p.ln_bias, LN_EPS)?;
            let pre = normed.matmul(&p.w_down)?.add_row_vector(&p.b_down)?;
            let act = pre.map(relu);
            let a_out = act.matmul(&p.w_up)?.add_row_vector(&p.b_up)?;
            out.axpy(p.scale, &a_out);
            AdapterCache::AdaptFormer { ln, normed, pre, act, out: a_out }
        }
        BlockAdapter::Sage(p) => {
            let g = guidance.expect("checked above");
            let (a_out, cache) = sg_forward_cached(&f_tilde, g, p)?;
            out.axpy(p.s_block, &a_out);
            AdapterCache::Sage { cache: Box::new(cache), out: a_out }
        }
    };
    Ok((out, BlockCache { msa, ln, ln_out, mlp_pre, mlp_act, adapter: adapter_cache }))
}

/// Returns `(d f_prev, d w̄)`. Adapter gradients accumulate into `adapter_grads`;
/// base-weight gradients only when `base_grads` is given.
pub fn block_backward(
    d_out: &Tensor,
    cache: &BlockCache,
    block: &BaseBlock,
    adapter: &BlockAdapter,
    adapter_grads: &mut BlockAdapter,
    mut base_grads: Option<&mut BaseBlock>,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let mut d_tilde = d_out.clone();

    // MLP branch.
    let d_act = d_out.matmul_t(&block.mlp_w2)?;
    let d_pre = d_act.zip(&cache.mlp_pre, |g, x| g * gelu_grad(x))?;
    let d_ln_out = d_pre.matmul_t(&block.mlp_w1)?;
    let (d_from_ln, dg, db) = layer_norm_backward(&cache.ln, &block.ln_gain, &d_ln_out);
    d_tilde.add_assign(&d_from_ln);
    if let Some(g) = base_grads.as_deref_mut() {
        g.mlp_w2.add_assign(&cache.mlp_act.t_matmul(d_out)?);
        add_into(&mut g.mlp_b2, &d_out.sum_rows());
        g.mlp_w1.add_assign(&cache.ln_out.t_matmul(&d_pre)?);
        add_into(&mut g.mlp_b1, &d_pre.sum_rows());
        add_into(&mut g.ln_gain, &dg);
        add_into(&mut g.ln_bias, &db);
    }

    // Adapter branch.
    let mut d_w_bar = None;
    match (adapter, adapter_grads, &cache.adapter) {
        (BlockAdapter::None, BlockAdapter::None, AdapterCache::None) => {}
        (
            BlockAdapter::AdaptFormer(p),
            BlockAdapter::AdaptFormer(g),
            AdapterCache::AdaptFormer { ln, normed, pre, act, out },
        ) => {
            g.scale += d_out.dot(out);
            let d_a_out = d_out.scale(p.scale);
            g.w_up.add_assign(&act.t_matmul(&d_a_out)?);
            add_into(&mut g.b_up, &d_a_out.sum_rows());
            let d_act = d_a_out.matmul_t(&p.w_up)?;
            let d_pre = d_act.zip(pre, |g, x| if x > 0.0 { g } else { 0.0 })?;
            g.w_down.add_assign(&normed.t_matmul(&d_pre)?);
            add_into(&mut g.b_down, &d_pre.sum_rows());
            let d_normed = d_pre.matmul_t(&p.w_down)?;
            let (dx, dgain, dbias) = layer_norm_backward(ln, &p.ln_gain, &d_normed);
            add_into(&mut g.ln_gain, &dgain);
            add_into(&mut g.ln_bias, &dbias);
            d_tilde.add_assign(&dx);
        }
        (BlockAdapter::Sage(p), BlockAdapter::Sage(g), AdapterCache::Sage { cache, out }) => {
            g.s_block += d_out.dot(out);
            let d_a_out = d_out.scale(p.s_block);
            let (dx, dw) = sg_backward(&d_a_out, cache, p, g)?;
            d_tilde.add_assign(&dx);
            d_w_bar = Some(dw);
        }
        _ => return Err(Error::Config("adapter gradient layout differs from the adapter".into())),
    }

    // Attention branch plus residual.
    let mut d_prev = d_tilde.clone();
    d_prev.add_assign(&msa_backward(&d_tilde, &cache.msa, block, base_grads)?);
    Ok((d_prev, d_w_bar))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Splits `batch × grid × grid` images into flattened patches: `(batch · patches) × patch²`.
pub fn patchify(images: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let g = cfg.grid;
    if images.shape().len() != 3 || images.shape()[1] != g || images.shape()[2] != g {
        return Err(Error::Shape(format!("images must be batch×{g}×{g}, got {:?}", images.shape())));
    }
    let batch = images.shape()[0];
    let (p, side) = (cfg.patch, cfg.patches_per_side());
    let mut out = Vec::with_capacity(batch * side * side * p * p);
    for s in 0..batch {
        let img = &images.data[s * g * g..(s + 1) * g * g];
        for pr in 0..side {
            for pc in 0..side {
                for y in 0..p {
                    let start = (pr * p + y) * g + pc * p;
                    out.extend_from_slice(&img[start..start + p]);
                }
            }
        }
    }
    Tensor::new(&[batch * side * side, p * p], out)
}

#[derive(Clone, Debug)]
pub struct EncodeTrace {
    pub features: Tensor,
    patches: Tensor,
    blocks: Vec<BlockCache>,
    batch: usize,
}

impl EncodeTrace {
    /// Per-block attention, each `batch × heads × tokens × tokens`.
    pub fn attentions(&self) -> Vec<Tensor> {
        self.blocks.iter().map(BlockCache::attention).collect()
    }
}

/// Encodes a batch of images; returns CLS features (`batch × d`) and per-block attention.
pub fn encode(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: &Adapters,
    images: &Tensor,
    guidance: Option<&Guidance>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let trace = encode_traced(cfg, weights, adapters, images, guidance)?;
    let att = trace.attentions();
    Ok((trace.features, att))
}

pub fn encode_traced(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: &Adapters,
    images: &Tensor,
    guidance: Option<&Guidance>,
) -> Result<EncodeTrace> {
    cfg.validate()?;
    weights.check(cfg)?;
    adapters.check(cfg)?;
    let patches = patchify(images, cfg)?;
    let batch = images.shape()[0];
    let (t, d) = (cfg.tokens(), cfg.width);
    let projected = patches.matmul(&weights.embedding.patch_w)?.add_row_vector(&weights.embedding.patch_b)?;
    let mut x = Tensor::zeros(&[batch, t, d]);
    for s in 0..batch {
        for tok in 0..t {
            let pos = weights.embedding.pos.row(tok);
            let src = if tok == 0 {
                &weights.embedding.cls[..]
            } else {
                projected.row(s * (t - 1) + tok - 1)
            };
            let dst = x.row_mut(s * t + tok);
            for j in 0..d {
                dst[j] = src[j] + pos[j];
            }
        }
    }
    let g = if cfg.mode == AdapterMode::Sage { guidance } else { None };
    if cfg.mode == AdapterMode::Sage && g.is_none() && cfg.blocks > 0 {
        return Err(Error::Config("semantic-guided encoder needs a guidance vector".into()));
    }
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for (base, adapter) in weights.blocks.iter().zip(&adapters.blocks) {
        let (next, cache) = block_forward_cached(&x, base, adapter, cfg.heads, g)?;
        x = next;
        blocks.push(cache);
    }
    let mut features = Tensor::zeros(&[batch, d]);
    for s in 0..batch {
        features.row_mut(s).copy_from_slice(x.row(s * t));
    }
    Ok(EncodeTrace { features, patches, blocks, batch })
}

/// Back-propagates `d features` through the encoder. Returns the summed guidance gradient
/// (zeros when no block is semantic-guided).
pub fn encode_backward(
    cfg: &EncoderConfig,
    trace: &EncodeTrace,
    d_features: &Tensor,
    weights: &EncoderWeights,
    adapters: &Adapters,
    adapter_grads: &mut Adapters,
    mut weight_grads: Option<&mut EncoderWeights>,
) -> Result<Vec<f64>> {
    let (t, d, batch) = (cfg.tokens(), cfg.width, trace.batch);
    if d_features.shape() != [batch, d] {
        return Err(Error::Shape(format!("feature gradient {:?} for batch {batch}", d_features.shape())));
    }
    let mut dx = Tensor::zeros(&[batch, t, d]);
    for s in 0..batch {
        dx.row_mut(s * t).copy_from_slice(d_features.row(s));
    }
    let mut d_w_bar = vec![0.0; d];
    for i in (0..cfg.blocks).rev() {
        let base_g = weight_grads.as_deref_mut().map(|w| &mut w.blocks[i]);
        let (prev, dw) = block_backward(
            &dx,
            &trace.blocks[i],
            &weights.blocks[i],
            &adapters.blocks[i],
            &mut adapter_grads.blocks[i],
            base_g,
        )?;
        if let Some(dw) = dw {
            add_into(&mut d_w_bar, &dw);
        }
        dx = prev;
    }
    if let Some(w) = weight_grads {
        let e = &mut w.embedding;
        let mut d_proj = Tensor::zeros(&[batch * (t - 1), d]);
        for s in 0..batch {
            for tok in 0..t {
                let src = dx.row(s * t + tok).to_vec();
                add_into(e.pos.row_mut(tok), &src);
                if tok == 0 {
                    add_into(&mut e.cls, &src);
                } else {
                    d_proj.row_mut(s * (t - 1) + tok - 1).copy_from_slice(&src);
                }
            }
        }
        e.patch_w.add_assign(&trace.patches.t_matmul(&d_proj)?);
        add_into(&mut e.patch_b, &d_proj.sum_rows());
    }
    Ok(d_w_bar)
}
