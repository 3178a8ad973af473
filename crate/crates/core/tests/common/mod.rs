#![allow(dead_code)]

pub mod oracle;
pub mod traces;

use exloop_core::nn::{FeatureMap, NetworkSpec, Shape, Weights};
use exloop_core::{ExpressionLabel, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random conv/pool/dense network with at most 1,000 parameters and
/// random weights drawn wider than the default init so ReLUs are active.
pub fn random_tiny_net(seed: u64) -> (NetworkSpec, Weights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let c = rng.random_range(1..=2);
        let side = [2, 4, 6][rng.random_range(0..3)];
        let mut b = NetworkSpec::builder(Shape::new(c, side, side));
        if rng.random_bool(0.8) {
            b = b.conv3x3(rng.random_range(1..=3)).relu();
            if rng.random_bool(0.6) {
                b = b.maxpool2();
            }
        }
        if rng.random_bool(0.7) {
            b = b.dense(rng.random_range(2..=8)).relu();
        }
        let spec = b.dense(NUM_CLASSES).softmax().build().unwrap();
        if spec.param_count() > 1000 {
            continue;
        }
        let mut weights = Weights::zeros(&spec);
        weights.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        return (spec, weights);
    }
}

pub fn random_batch(spec: &NetworkSpec, n: usize, seed: u64) -> Vec<(FeatureMap, ExpressionLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..spec.input.len()).map(|_| rng.random_range(0.0..1.0)).collect();
            let label = ExpressionLabel::from_index(rng.random_range(0..NUM_CLASSES)).unwrap();
            (FeatureMap::new(spec.input, data).unwrap(), label)
        })
        .collect()
}

pub fn to_f64_batch(batch: &[(FeatureMap, ExpressionLabel)]) -> Vec<(Vec<f64>, ExpressionLabel)> {
    batch
        .iter()
        .map(|(x, y)| (x.data.clone(), *y))
        .collect()
}

/// Relative error between analytic and numeric gradients. Components where
/// both are below `floor` in magnitude are compared against `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for the relative error. f64 central differences at
/// step 1e-4 carry roughly 1e-11 of round-off on a loss near 2.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;

/// Max relative error between analytic and finite-difference gradients for
/// the random tiny net `seed`. Batches that sit within 1e-3 of a ReLU or
/// pooling kink are redrawn, since finite differences are invalid there.
pub fn gradient_check(seed: u64) -> (usize, f64) {
    let (spec, weights) = random_tiny_net(seed);
    let params = oracle::flatten(&weights);
    let mut batch_seed = seed.wrapping_mul(7919);
    let batch = loop {
        let batch = random_batch(&spec, 4, batch_seed);
        let f = to_f64_batch(&batch);
        let margin = f
            .iter()
            .map(|(x, _)| oracle::kink_margin(&spec, &params, x))
            .fold(f64::INFINITY, f64::min);
        if margin > 1e-3 {
            break batch;
        }
        batch_seed += 1;
    };
    let (_, grads) = exloop_core::nn::loss_and_grads(&spec, &weights, &batch).unwrap();
    let numeric = oracle::numeric_grads(&spec, &params, &to_f64_batch(&batch), FD_STEP);
    let worst = grads
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a as f64, *n, GRAD_FLOOR))
        .fold(0.0, f64::max);
    (spec.param_count(), worst)
}
