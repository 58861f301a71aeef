//! Finite-difference gradient checks shared by the test targets.
//!
//! The network is piecewise linear, so a difference quotient only estimates
//! the derivative when the whole stencil stays on one linear piece. Each test
//! walks a fixed list of seeds and takes the first evaluation point where no
//! rectifier changes sign at any `theta +- STEP`, then compares every entry.

#![allow(dead_code)]

use sslseg::imagery::MaskBatch;
use sslseg::losses::{focal_loss, ntxent_loss};
use sslseg::model::{
    embed_loss_grad, forward_embed, forward_logits, forward_segment, init_params,
    rectifier_pattern, segment_loss_grad, ArchConfig, Branch, ImageBatch, ModelParams,
};
use sslseg::rng::SplitMix64;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
const BIAS: (f64, f64) = (0.2, 1.0);
const SEARCH: u64 = 64;

pub fn tiny() -> ArchConfig {
    ArchConfig {
        in_channels: 3,
        base_width: 2,
        depth: 1,
        embed_dim: 8,
        tile: 8,
    }
}

pub fn images(n: usize, seed: u64) -> ImageBatch<f64> {
    let mut rng = SplitMix64::new(seed);
    ImageBatch {
        batch: n,
        channels: 3,
        size: 8,
        data: (0..n * 3 * 64).map(|_| rng.next_f64()).collect(),
    }
}

/// Initial weights with biases of random sign and magnitude in `BIAS`, and the
/// segmentation head rescaled so logits peak at 2.
pub fn params(seed: u64, batch: &ImageBatch<f64>) -> ModelParams<f64> {
    let mut p = init_params::<f64>(&tiny(), seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0xb1a5);
    let entries: Vec<_> = p.index().to_vec();
    for e in &entries {
        for v in &mut p.values_mut()[e.offset..e.offset + e.len()] {
            if e.shape.len() == 1 {
                let m = rng.uniform(BIAS.0, BIAS.1);
                *v = if rng.bernoulli(0.5) { m } else { -m };
            }
        }
    }
    let peak = forward_logits(&p, batch)
        .unwrap()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for name in ["head.weight", "head.bias"] {
        for v in p.tensor_mut(name).unwrap() {
            *v *= 2.0 / peak;
        }
    }
    p
}

/// Whether no rectifier on the path to `branch` changes sign on any stencil.
pub fn smooth(params: &ModelParams<f64>, batch: &ImageBatch<f64>, branch: Branch) -> bool {
    let base = rectifier_pattern(params, batch, branch).unwrap();
    let mut p = params.clone();
    for i in 0..params.len() {
        let x = params.values()[i];
        for d in [STEP, -STEP] {
            p.values_mut()[i] = x + d;
            if rectifier_pattern(&p, batch, branch).unwrap() != base {
                return false;
            }
        }
        p.values_mut()[i] = x;
    }
    true
}

pub fn smooth_point(items: usize, branch: Branch) -> (ModelParams<f64>, ImageBatch<f64>, u64) {
    (0..SEARCH)
        .find_map(|seed| {
            let batch = images(items, 1000 + seed);
            let params = params(seed, &batch);
            smooth(&params, &batch, branch).then_some((params, batch, seed))
        })
        .expect("no kink-free evaluation point among the searched seeds")
}

/// Every entry violating `|a - n| <= max(REL_TOL * max(|a|, |n|), ABS_TOL)`.
pub fn check(
    params: &ModelParams<f64>,
    analytic: &[f64],
    loss: impl Fn(&ModelParams<f64>) -> f64,
) -> Vec<String> {
    assert_eq!(analytic.len(), params.len());
    let mut bad = Vec::new();
    let mut p = params.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let x = params.values()[i];
        p.values_mut()[i] = x + STEP;
        let up = loss(&p);
        p.values_mut()[i] = x - STEP;
        let down = loss(&p);
        p.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * STEP);
        if (a - numeric).abs() > (REL_TOL * a.abs().max(numeric.abs())).max(ABS_TOL) {
            bad.push(format!(
                "{}[{i}]: analytic {a:e} numeric {numeric:e}",
                params.tensor_of(i).unwrap()
            ));
        }
    }
    bad
}

/// Mismatching entries of the focal-loss gradient, with the seed used.
pub fn focal_mismatches() -> (u64, Vec<String>) {
    let (params, batch, seed) = smooth_point(2, Branch::Segment);
    let mut rng = SplitMix64::new(seed ^ 0x7a59);
    let targets = MaskBatch::new(
        2,
        8,
        8,
        (0..128).map(|_| rng.bernoulli(0.3) as u8).collect(),
    )
    .unwrap();
    let (_, grad) = segment_loss_grad(&params, &batch, &targets, 0.4, 2.0).unwrap();
    let bad = check(&params, &grad, |p| {
        focal_loss(&forward_segment(p, &batch).unwrap(), &targets, 0.4, 2.0)
            .unwrap()
            .0
    });
    (seed, bad)
}

/// Mismatching entries of the NT-Xent gradient for two source items, each
/// seen twice, with the seed used.
pub fn ntxent_mismatches() -> (u64, Vec<String>) {
    let (params, batch, seed) = smooth_point(4, Branch::Embed);
    let (_, grad) = embed_loss_grad(&params, &batch, 0.5).unwrap();
    let bad = check(&params, &grad, |p| {
        ntxent_loss(&forward_embed(p, &batch).unwrap(), 0.5)
            .unwrap()
            .0
    });
    (seed, bad)
}
