//! Cosine classifier, text-derived initialization and interchanged (FIT) logits.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::{l2_normalize_rows, l2_normalize_rows_backward};
use crate::{Error, Result, Tensor};

pub const DEFAULT_LOGIT_SCALE: f64 = 25.0;

const TEMPLATE_TEXT: &str = include_str!("../data/templates.txt");

/// Prompt templates with a `{cls}` placeholder.
pub fn templates() -> Vec<&'static str> {
    TEMPLATE_TEXT.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

pub fn render_template(template: &str, class_name: &str) -> String {
    template.replace("{cls}", class_name)
}

/// Trainable rows `W` and the frozen zero-shot rows `W_zs`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    pub w: Tensor,
    w_zs: Tensor,
}

impl ClassifierWeights {
    /// `W` starts as an exact copy of `W_zs`.
    pub fn from_zero_shot(w_zs: Tensor) -> Result<Self> {
        if w_zs.shape().len() != 2 {
            return Err(Error::Shape(format!("classifier must be C×d, got {:?}", w_zs.shape())));
        }
        w_zs.ensure_finite()?;
        Ok(Self { w: w_zs.clone(), w_zs })
    }

    /// Replaces the trainable rows with random unit-norm directions; `W_zs` is kept.
    pub fn randomized(w_zs: Tensor, rng: &mut impl Rng) -> Result<Self> {
        let mut c = Self::from_zero_shot(w_zs)?;
        let raw = crate::rng::normal(rng, c.w.shape(), 1.0);
        c.w = l2_normalize_rows(&raw);
        Ok(c)
    }

    pub fn w_zs(&self) -> &Tensor {
        &self.w_zs
    }

    pub fn num_classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Per-class template embeddings, `classes × templates × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSet {
    pub embeddings: Vec<Vec<Vec<f64>>>,
    pub templates: Vec<String>,
}

impl TextEmbeddingSet {
    pub fn new(embeddings: Vec<Vec<Vec<f64>>>, templates: Vec<String>) -> Result<Self> {
        let s = Self { embeddings, templates };
        s.check()?;
        Ok(s)
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn templates_per_class(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn width(&self) -> usize {
        self.embeddings.first().and_then(|c| c.first()).map_or(0, Vec::len)
    }

    fn check(&self) -> Result<()> {
        let tn = self.templates_per_class();
        if self.embeddings.is_empty() || tn == 0 {
            return Err(Error::Domain("text embedding set needs at least one class and template".into()));
        }
        if let Some(i) = self.embeddings.iter().position(|c| c.len() != tn) {
            return Err(Error::Shape(format!(
                "class {i} has {} templates, class 0 has {tn}",
                self.embeddings[i].len()
            )));
        }
        let d = self.width();
        if d == 0 || self.embeddings.iter().flatten().any(|e| e.len() != d) {
            return Err(Error::Shape("template embeddings differ in width".into()));
        }
        Ok(())
    }

    /// Header `class,template,dim0,...`, one row per (class, template).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["class".to_string(), "template".to_string()];
        header.extend((0..self.width()).map(|j| format!("dim{j}")));
        w.write_record(&header)?;
        for (c, rows) in self.embeddings.iter().enumerate() {
            for (t, e) in rows.iter().enumerate() {
                let mut rec = vec![c.to_string(), t.to_string()];
                rec.extend(e.iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "class" || &header[1] != "template" {
            return Err(Error::Format("expected header class,template,dim0,...".into()));
        }
        let d = header.len() - 2;
        let mut embeddings: Vec<Vec<Vec<f64>>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse_idx = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Format(format!("bad index {s:?}")))
            };
            let (c, t) = (parse_idx(&rec[0])?, parse_idx(&rec[1])?);
            let e = (0..d)
                .map(|j| rec[j + 2].parse::<f64>().map_err(|_| Error::Format(format!("bad value {:?}", &rec[j + 2]))))
                .collect::<Result<Vec<_>>>()?;
            if c > embeddings.len() {
                return Err(Error::Format(format!("class {c} appears before class {}", embeddings.len())));
            }
            if c == embeddings.len() {
                embeddings.push(Vec::new());
            }
            if t != embeddings[c].len() {
                return Err(Error::Format(format!("class {c}: template {t} out of order")));
            }
            embeddings[c].push(e);
        }
        let tn = embeddings.first().map_or(0, Vec::len);
        let templates = templates().iter().cycle().take(tn).map(|s| s.to_string()).collect();
        Self::new(embeddings, templates)
    }
}

/// `w_i^zs = mean over templates`, and `W = W_zs`.
pub fn init_classifier_from_text(t: &TextEmbeddingSet) -> Result<ClassifierWeights> {
    t.check()?;
    let d = t.width();
    let tn = t.templates_per_class() as f64;
    let rows = t
        .embeddings
        .iter()
        .map(|c| {
            let mut m = vec![0.0; d];
            for e in c {
                m.iter_mut().zip(e).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= tn);
            m
        })
        .collect::<Vec<_>>();
    ClassifierWeights::from_zero_shot(Tensor::from_rows(&rows)?)
}

/// `scale · cos(f_b, w_i)` for every sample and class.
pub fn cosine_logits(f: &Tensor, w: &Tensor, scale: f64) -> Result<Tensor> {
    if f.cols() != w.cols() {
        return Err(Error::Shape(format!("features width {} vs classifier width {}", f.cols(), w.cols())));
    }
    Ok(l2_normalize_rows(f).matmul_t(&l2_normalize_rows(w))?.scale(scale))
}

/// Returns `(d f, d W)` for upstream gradient `dz`.
pub fn cosine_logits_backward(f: &Tensor, w: &Tensor, dz: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    let fh = l2_normalize_rows(f);
    let wh = l2_normalize_rows(w);
    let dz = dz.scale(scale);
    let d_fh = dz.matmul(&wh)?;
    let d_wh = dz.t_matmul(&fh)?;
    Ok((l2_normalize_rows_backward(f, &d_fh), l2_normalize_rows_backward(w, &d_wh)))
}

/// Learnable mixing weights of the interchanged logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub s1: f64,
    pub s2: f64,
}

impl ParamSet for FitState {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("s1", std::slice::from_ref(&self.s1));
        f("s2", std::slice::from_ref(&self.s2));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("s1", std::slice::from_mut(&mut self.s1));
        f("s2", std::slice::from_mut(&mut self.s2));
    }
}

/// `ẑ = z + s1·z_v + s2·z_t`.
pub fn fit_logits(z: &Tensor, z_v: &Tensor, z_t: &Tensor, s: &FitState) -> Result<Tensor> {
    if z.shape() != z_v.shape() || z.shape() != z_t.shape() {
        return Err(Error::Shape(format!(
            "logit shapes {:?}, {:?}, {:?}",
            z.shape(),
            z_v.shape(),
            z_t.shape()
        )));
    }
    let mut out = z.clone();
    out.grad = None;
    out.axpy(s.s1, z_v);
    out.axpy(s.s2, z_t);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixty_templates_with_placeholder() {
        let t = templates();
        assert_eq!(t.len(), 60);
        assert!(t.iter().all(|s| s.contains("{cls}")));
        assert_eq!(render_template(t[0], "dog"), "a photo of a dog.");
    }

    #[test]
    fn single_template_is_copied() {
        let set = TextEmbeddingSet::new(vec![vec![vec![0.3, -1.0]]], vec!["x".into()]).unwrap();
        let c = init_classifier_from_text(&set).unwrap();
        assert_eq!(c.w_zs().data, vec![0.3, -1.0]);
        assert_eq!(c.w, *c.w_zs());
    }

    #[test]
    fn two_templates_average() {
        let set = TextEmbeddingSet::new(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]], vec![]).unwrap();
        assert_eq!(init_classifier_from_text(&set).unwrap().w_zs().data, vec![0.5, 0.5]);
    }

    #[test]
    fn random_set_matches_mean_oracle() {
        let mut rng = crate::rng::stream(3, 0);
        let emb: Vec<Vec<Vec<f64>>> =
            (0..3).map(|_| (0..4).map(|_| crate::rng::normal(&mut rng, &[5], 1.0).data).collect()).collect();
        let set = TextEmbeddingSet::new(emb.clone(), vec![]).unwrap();
        let c = init_classifier_from_text(&set).unwrap();
        for (i, class) in emb.iter().enumerate() {
            for j in 0..5 {
                let mean = (class[0][j] + class[1][j] + class[2][j] + class[3][j]) / 4.0;
                assert!((c.w_zs().row(i)[j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ragged_templates_are_rejected() {
        let emb = vec![vec![vec![1.0], vec![2.0]], vec![vec![3.0]]];
        assert!(TextEmbeddingSet::new(emb, vec![]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = crate::rng::stream(4, 0);
        let emb = (0..2).map(|_| (0..3).map(|_| crate::rng::normal(&mut rng, &[4], 1.0).data).collect()).collect();
        let set = TextEmbeddingSet::new(emb, templates()[..3].iter().map(|s| s.to_string()).collect()).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("class,template,dim0,dim1,dim2,dim3\n"));
        let back = TextEmbeddingSet::read_csv(&buf[..]).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn csv_rejects_ragged_and_bad_header() {
        let ragged = "class,template,dim0\n0,0,1\n0,1,2\n1,0,3\n";
        assert!(TextEmbeddingSet::read_csv(ragged.as_bytes()).is_err());
        assert!(TextEmbeddingSet::read_csv("c,t,x\n0,0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn cosine_examples() {
        let f = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![5.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let z = cosine_logits(&f, &w, 1.0).unwrap();
        assert!((z.data[0] - 1.0).abs() < 1e-12);
        assert_eq!(z.data[1], 0.0);
        let f = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let z = cosine_logits(&f, &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 25.0).unwrap();
        assert!((z.data[0] - 25.0 / 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn fit_examples() {
        let z = Tensor::filled(&[1, 1], 0.5);
        let zv = Tensor::filled(&[1, 1], 0.2);
        let zt = Tensor::filled(&[1, 1], 0.1);
        let out = fit_logits(&z, &zv, &zt, &FitState { s1: 1.0, s2: 2.0 }).unwrap();
        assert!((out.data[0] - 0.9).abs() < 1e-15);
        assert!(fit_logits(&z, &Tensor::zeros(&[1, 2]), &zt, &FitState::default()).is_err());
    }

    #[test]
    fn fit_random_matches_elementwise_oracle() {
        let mut rng = crate::rng::stream(6, 0);
        let [z, zv, zt] = [0, 1, 2].map(|_| crate::rng::normal(&mut rng, &[4, 3], 2.0));
        let s = FitState { s1: 0.7, s2: -1.3 };
        let out = fit_logits(&z, &zv, &zt, &s).unwrap();
        for i in 0..12 {
            assert!((out.data[i] - (z.data[i] + 0.7 * zv.data[i] + -1.3 * zt.data[i])).abs() <= 1e-15);
        }
        assert_eq!(fit_logits(&z, &zv, &zt, &FitState::default()).unwrap(), z);
    }

    #[test]
    fn randomized_rows_are_unit_norm_and_keep_zero_shot() {
        let w_zs = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let c = ClassifierWeights::randomized(w_zs.clone(), &mut crate::rng::stream(0, 0)).unwrap();
        assert_eq!(*c.w_zs(), w_zs);
        for i in 0..2 {
            let n: f64 = c.w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(8, 0);
        let f = crate::rng::normal(&mut rng, &[3, 4], 1.0);
        let w = crate::rng::normal(&mut rng, &[5, 4], 1.0);
        let probe = crate::rng::normal(&mut rng, &[3, 5], 1.0);
        let (df, dw) = cosine_logits_backward(&f, &w, &probe, 25.0).unwrap();
        let mut set = crate::params::NamedTensors(vec![("f".into(), f), ("w".into(), w)]);
        set.0[0].1.set_grad(df.data).unwrap();
        set.0[1].1.set_grad(dw.data).unwrap();
        let r = crate::gradcheck::grad_check_tensors(
            |s| Ok(cosine_logits(&s.0[0].1, &s.0[1].1, 25.0)?.dot(&probe)),
            &set,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(crate::gradcheck::all_passed(&r), "{r:?}");
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-5.0..5.0f64, rows * cols)
            .prop_filter("nonzero rows", move |v| v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
            .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(f in matrix(3, 4), w in matrix(5, 4), c in 0.01..100.0f64) {
            let z = cosine_logits(&f, &w, 25.0).unwrap();
            prop_assert!(cosine_logits(&f.scale(c), &w, 25.0).unwrap().max_abs_diff(&z) < 1e-7);
            prop_assert!(cosine_logits(&f, &w.scale(c), 25.0).unwrap().max_abs_diff(&z) < 1e-7);
            prop_assert!(z.data.iter().all(|v| v.abs() <= 25.0 + 1e-12));
        }

        #[test]
        fn argmax_survives_feature_rescaling(f in matrix(2, 4), w in matrix(6, 4), c in 0.01..100.0f64) {
            let argmax = |z: &Tensor| -> Vec<usize> {
                z.data.chunks(6).map(|r| (0..6).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap()).collect()
            };
            let z = cosine_logits(&f, &w, 25.0).unwrap();
            let zc = cosine_logits(&f.scale(c), &w, 25.0).unwrap();
            // Ties at the 1e-10 level may legitimately flip.
            let sorted_gap = z.data.chunks(6).map(|r| {
                let mut s = r.to_vec();
                s.sort_by(|a, b| b.total_cmp(a));
                s[0] - s[1]
            }).fold(f64::MAX, f64::min);
            prop_assume!(sorted_gap > 1e-8);
            prop_assert_eq!(argmax(&z), argmax(&zc));
        }
    }
}
