//! Semantic-guided adapter.
//!
//! The adapter fuses three streams per token row: the normalized visual
//! feature `f^v`, the normalized class guidance `f^t` (the mean classifier
//! row, broadcast over rows), and their product after a modality projection
//! `f^vt`. A 2r-wide bottleneck `[f^v W_v ‖ f^vt W_vt + s_vt f^t W_t]` goes
//! through an α-mixed ReLU and one shared up-projection.

use rand::Rng;

use crate::params::ParamSet;
use crate::tensor::{layer_norm_backward, layer_norm_cached, relu, LayerNormCache, LN_EPS};
use crate::{Error, Result, Tensor};

/// Mean classifier row, the semantic guidance vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub w_bar: Vec<f64>,
}

/// Column means of the classifier matrix `W` (C × d).
pub fn build_guidance(classifier: &Tensor) -> Result<Guidance> {
    if classifier.shape().len() != 2 {
        return Err(Error::Shape(format!("classifier must be C×d, got {:?}", classifier.shape())));
    }
    let c = classifier.rows();
    let mut w_bar = classifier.sum_rows();
    w_bar.iter_mut().for_each(|v| *v /= c as f64);
    Ok(Guidance { w_bar })
}

/// Spreads a guidance gradient back over the classifier rows (adds `dw̄ / C` to each row).
pub fn guidance_backward(d_w_bar: &[f64], classifier_grad: &mut Tensor) {
    let c = classifier_grad.rows() as f64;
    let d = classifier_grad.cols();
    for row in classifier_grad.data.chunks_mut(d) {
        for (g, dw) in row.iter_mut().zip(d_w_bar) {
            *g += dw / c;
        }
    }
}

/// `(5r + d + 4)·d + 3r + 2`
pub fn count_params(d: usize, r: usize) -> usize {
    (5 * r + d + 4) * d + 3 * r + 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgAdapterParams {
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub w_proj: Tensor,
    pub b_proj: Vec<f64>,
    pub w_v_down: Tensor,
    pub b_v_down: Vec<f64>,
    pub w_vt_down: Tensor,
    pub b_vt_down: Vec<f64>,
    pub w_t_down: Tensor,
    pub b_t_down: Vec<f64>,
    pub w_up: Tensor,
    pub b_up: Vec<f64>,
    pub s_vt: f64,
    /// Block-level scale applied to the adapter output when it joins the residual stream.
    pub s_block: f64,
    /// Share of the ReLU path in the output mix. A hyperparameter, never trained.
    pub alpha: f64,
}

impl SgAdapterParams {
    /// Down-projections and the modality projection draw from U(-1/√d, 1/√d);
    /// the up-projection and all biases start at zero, so a fresh adapter adds
    /// nothing to the residual stream.
    pub fn init(d: usize, r: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::Config(format!("bottleneck r={r} must satisfy 1 <= r < d={d}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha={alpha} outside [0, 1]")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            w_proj: crate::rng::uniform(rng, &[d, d], bound),
            b_proj: vec![0.0; d],
            w_v_down: crate::rng::uniform(rng, &[d, r], bound),
            b_v_down: vec![0.0; r],
            w_vt_down: crate::rng::uniform(rng, &[d, r], bound),
            b_vt_down: vec![0.0; r],
            w_t_down: crate::rng::uniform(rng, &[d, r], bound),
            b_t_down: vec![0.0; r],
            w_up: Tensor::zeros(&[2 * r, d]),
            b_up: vec![0.0; d],
            s_vt: 0.5,
            s_block: 0.1,
            alpha,
        })
    }

    pub fn width(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn bottleneck(&self) -> usize {
        self.b_v_down.len()
    }
}

impl ParamSet for SgAdapterParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("ln.gain", &self.ln_gain);
        f("ln.bias", &self.ln_bias);
        f("proj.w", &self.w_proj.data);
        f("proj.b", &self.b_proj);
        f("v_down.w", &self.w_v_down.data);
        f("v_down.b", &self.b_v_down);
        f("vt_down.w", &self.w_vt_down.data);
        f("vt_down.b", &self.b_vt_down);
        f("t_down.w", &self.w_t_down.data);
        f("t_down.b", &self.b_t_down);
        f("up.w", &self.w_up.data);
        f("up.b", &self.b_up);
        f("s_vt", std::slice::from_ref(&self.s_vt));
        f("s_block", std::slice::from_ref(&self.s_block));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("ln.gain", &mut self.ln_gain);
        f("ln.bias", &mut self.ln_bias);
        f("proj.w", &mut self.w_proj.data);
        f("proj.b", &mut self.b_proj);
        f("v_down.w", &mut self.w_v_down.data);
        f("v_down.b", &mut self.b_v_down);
        f("vt_down.w", &mut self.w_vt_down.data);
        f("vt_down.b", &mut self.b_vt_down);
        f("t_down.w", &mut self.w_t_down.data);
        f("t_down.b", &mut self.b_t_down);
        f("up.w", &mut self.w_up.data);
        f("up.b", &mut self.b_up);
        f("s_vt", std::slice::from_mut(&mut self.s_vt));
        f("s_block", std::slice::from_mut(&mut self.s_block));
    }
}

/// Intermediates of [`sg_forward`] kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SgCache {
    visual_ln: LayerNormCache,
    text_ln: LayerNormCache,
    f_v: Tensor,
    f_t: Tensor,
    projected_t: Tensor,
    f_vt: Tensor,
    t_down: Tensor,
    bottleneck: Tensor,
    mixed: Tensor,
}

pub fn sg_forward(f_tilde: &Tensor, guidance: &Guidance, p: &SgAdapterParams) -> Result<Tensor> {
    Ok(sg_forward_cached(f_tilde, guidance, p)?.0)
}

pub fn sg_forward_cached(
    f_tilde: &Tensor,
    guidance: &Guidance,
    p: &SgAdapterParams,
) -> Result<(Tensor, SgCache)> {
    let d = p.width();
    if f_tilde.cols() != d || guidance.w_bar.len() != d {
        return Err(Error::Shape(format!(
            "adapter width {d}, feature width {}, guidance width {}",
            f_tilde.cols(),
            guidance.w_bar.len()
        )));
    }
    let (f_v, visual_ln) = layer_norm_cached(f_tilde, &p.ln_gain, &p.ln_bias, LN_EPS)?;
    // Every row of repeat(w̄) is identical, so normalize once and broadcast.
    let w_bar = Tensor::new(&[1, d], guidance.w_bar.clone())?;
    let (f_t, text_ln) = layer_norm_cached(&w_bar, &p.ln_gain, &p.ln_bias, LN_EPS)?;
    let projected_t = f_t.matmul(&p.w_proj)?.add_row_vector(&p.b_proj)?;
    let mut f_vt = f_v.clone();
    for row in f_vt.data.chunks_mut(d) {
        for (v, t) in row.iter_mut().zip(&projected_t.data) {
            *v *= t;
        }
    }
    let visual_branch = f_v.matmul(&p.w_v_down)?.add_row_vector(&p.b_v_down)?;
    let t_down = f_t.matmul(&p.w_t_down)?.add_row_vector(&p.b_t_down)?;
    let text_shift: Vec<f64> = t_down.data.iter().map(|v| p.s_vt * v).collect();
    let fused_branch = f_vt.matmul(&p.w_vt_down)?.add_row_vector(&p.b_vt_down)?.add_row_vector(&text_shift)?;
    let bottleneck = Tensor::concat_cols(&visual_branch, &fused_branch)?;
    let alpha = p.alpha;
    let mixed = bottleneck.map(|h| alpha * relu(h) + (1.0 - alpha) * h);
    let out = mixed.matmul(&p.w_up)?.add_row_vector(&p.b_up)?;
    Ok((out, SgCache { visual_ln, text_ln, f_v, f_t, projected_t, f_vt, t_down, bottleneck, mixed }))
}

/// Returns `(d f_tilde, d w̄)` and accumulates parameter gradients into `grads`.
/// `s_block` is not touched here; the enclosing block owns that product.
pub fn sg_backward(
    d_out: &Tensor,
    cache: &SgCache,
    p: &SgAdapterParams,
    grads: &mut SgAdapterParams,
) -> Result<(Tensor, Vec<f64>)> {
    let d = p.width();
    let r = p.bottleneck();
    grads.w_up.add_assign(&cache.mixed.t_matmul(d_out)?);
    add_into(&mut grads.b_up, &d_out.sum_rows());
    let d_mixed = d_out.matmul_t(&p.w_up)?;
    let alpha = p.alpha;
    let d_bottleneck = d_mixed.zip(&cache.bottleneck, |g, h| {
        let slope = if h > 0.0 { 1.0 } else { 0.0 };
        g * (alpha * slope + (1.0 - alpha))
    })?;
    let d_visual = d_bottleneck.slice_cols(0, r);
    let d_fused = d_bottleneck.slice_cols(r, r);

    grads.w_v_down.add_assign(&cache.f_v.t_matmul(&d_visual)?);
    add_into(&mut grads.b_v_down, &d_visual.sum_rows());
    let mut d_f_v = d_visual.matmul_t(&p.w_v_down)?;

    grads.w_vt_down.add_assign(&cache.f_vt.t_matmul(&d_fused)?);
    let d_fused_sum = d_fused.sum_rows();
    add_into(&mut grads.b_vt_down, &d_fused_sum);
    let d_f_vt = d_fused.matmul_t(&p.w_vt_down)?;

    grads.s_vt += d_fused_sum.iter().zip(&cache.t_down.data).map(|(a, b)| a * b).sum::<f64>();
    let d_t_down = Tensor::new(&[1, r], d_fused_sum.iter().map(|v| p.s_vt * v).collect())?;
    grads.w_t_down.add_assign(&cache.f_t.t_matmul(&d_t_down)?);
    add_into(&mut grads.b_t_down, &d_t_down.data);
    let mut d_f_t = d_t_down.matmul_t(&p.w_t_down)?;

    let mut d_projected = vec![0.0; d];
    for ((dvt_row, fv_row), dfv_row) in
        d_f_vt.data.chunks(d).zip(cache.f_v.data.chunks(d)).zip(d_f_v.data.chunks_mut(d))
    {
        for j in 0..d {
            dfv_row[j] += dvt_row[j] * cache.projected_t.data[j];
            d_projected[j] += dvt_row[j] * fv_row[j];
        }
    }
    let d_projected = Tensor::new(&[1, d], d_projected)?;
    grads.w_proj.add_assign(&cache.f_t.t_matmul(&d_projected)?);
    add_into(&mut grads.b_proj, &d_projected.data);
    d_f_t.add_assign(&d_projected.matmul_t(&p.w_proj)?);

    let (d_f_tilde, dg_v, db_v) = layer_norm_backward(&cache.visual_ln, &p.ln_gain, &d_f_v);
    let (d_w_bar, dg_t, db_t) = layer_norm_backward(&cache.text_ln, &p.ln_gain, &d_f_t);
    add_into(&mut grads.ln_gain, &dg_v);
    add_into(&mut grads.ln_gain, &dg_t);
    add_into(&mut grads.ln_bias, &db_v);
    add_into(&mut grads.ln_bias, &db_t);
    Ok((d_f_tilde, d_w_bar.data))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
