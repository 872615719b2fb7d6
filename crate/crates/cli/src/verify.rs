//! Self-checks runnable from the command line.

use ltadapt::analysis::msa_decomposition_check;
use ltadapt::data::{build_foundation, generate, FoundationSpec, LongTailSpec, SyntheticTaskSpec};
use ltadapt::encoder::{BlockAdapter, EncoderConfig};
use ltadapt::gradcheck::GradCheckReport;
use ltadapt::trainer::{Ablation, FineTuner, TrainConfig};
use ltadapt::{ParamSet, Result};
use rand::Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Gradient check of the whole objective for a Sage pipeline with `classes`
/// classes on a batch of `batch` samples, at a randomly perturbed probe point
/// with adapter scales set to 1.
pub fn gradient_suite(encoder: EncoderConfig, classes: usize, batch: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let spec = FoundationSpec { encoder, per_class: 20, epochs: 1, eval_per_class: 4, ..FoundationSpec::default() };
    let bundle = build_foundation(seed, classes, &spec)?;
    let task = SyntheticTaskSpec {
        grid: encoder.grid,
        patch: encoder.patch,
        world_seed: seed,
        noise: 0.8,
        train: LongTailSpec { classes, n1: 40, beta: 10.0, seed },
        test_per_class: 1,
    };
    let (train, _) = generate(&task)?;
    let cfg = TrainConfig { bottleneck: encoder.bottleneck, ablation: Ablation::ALL, group_thresholds: (30, 10), ..TrainConfig::default() };
    let mut tuner = FineTuner::new(&cfg, &bundle, &train)?;
    let mut rng = ltadapt::rng::stream(seed, 77);
    tuner.psi.visit_mut(&mut |_, a| a.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5)));
    for b in &mut tuner.psi.adapters.blocks {
        match b {
            BlockAdapter::Sage(p) => p.s_block = 1.0,
            BlockAdapter::AdaptFormer(p) => p.scale = 1.0,
            BlockAdapter::None => {}
        }
    }
    let mut idx = Vec::with_capacity(batch);
    for c in 0..classes {
        if idx.len() == batch {
            break;
        }
        if let Some(i) = train.labels.iter().position(|&l| l == c) {
            idx.push(i);
        }
    }
    tuner.check_gradients(&idx, GRAD_EPS, GRAD_TOL)
}

/// Largest discrepancy of the attention expansion identity over `instances` draws.
pub fn decomposition_suite(instances: u64, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut rng = ltadapt::rng::stream(seed, 0);
    for i in 0..instances {
        let d = 2 * rng.gen_range(1..=6);
        let d_k = rng.gen_range(1..=d);
        let b = rng.gen_range(2..=9);
        worst = worst.max(msa_decomposition_check(d, d_k, b, seed.wrapping_add(i))?);
    }
    Ok(worst)
}
