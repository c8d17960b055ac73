//! Fixture generators and independent numeric oracles shared by the integration tests.
#![allow(dead_code)]

use fgpl_core::lattice::{BatchPredictions, ClassDistribution, Lattice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A strictly positive probability row.
pub fn simplex(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn lattice(rng: &mut impl Rng, c: usize) -> Lattice {
    Lattice::from_rows((0..c).map(|_| simplex(rng, c)).collect()).unwrap()
}

pub fn distribution(rng: &mut impl Rng, c: usize) -> ClassDistribution {
    ClassDistribution::new((0..c).map(|_| rng.random_range(1..500)).collect()).unwrap()
}

pub fn logits(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(-3.0..3.0)).collect()
}

/// A batch of `m` random rows with labels drawn uniformly.
pub fn batch(rng: &mut impl Rng, c: usize, m: usize) -> BatchPredictions {
    let probs = (0..m).map(|_| simplex(rng, c)).collect();
    let labels = (0..m).map(|_| rng.random_range(0..c)).collect();
    BatchPredictions::new(probs, labels, c).unwrap()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

/// `phi_hat_k = exp(eta_k) / sum_j w_j exp(eta_j)`.
pub fn reweighted(eta: &[f64], w: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = eta.iter().zip(w).map(|(e, w)| e + w.ln()).collect();
    let lse = log_sum_exp(&shifted);
    eta.iter().map(|e| (e - lse).exp()).collect()
}

/// Central differences of `f` around `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Smallest `|p_j - p_i + delta|` over the hard set: distance to the nearest hinge kink.
pub fn kink_distance(p: &[f64], label: usize, hard: &[usize], delta: f64) -> f64 {
    hard.iter()
        .map(|&j| (p[j] - p[label] + delta).abs())
        .fold(f64::INFINITY, f64::min)
}
