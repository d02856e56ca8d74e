#![allow(dead_code)]

use ncl::numerics::{Matrix, Tape, Var};
use ncl::synth::{Dataset, DatasetSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Entries bounded away from zero, so ReLU kinks stay out of reach of a
/// finite-difference step.
pub fn off_zero_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    random_matrix(rng, rows, cols).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// `sum(x * R)` for a fixed random `R`, so every output entry receives a
/// distinct upstream gradient.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.value(x).shape();
    let weights = tape.leaf(random_matrix(&mut rng(seed), r, c));
    let prod = tape.mul(x, weights).unwrap();
    tape.sum(prod).unwrap()
}

pub fn tiny_dataset(count: usize, mismatch_rate: f64, seed: u64) -> Dataset {
    Dataset::generate(&DatasetSpec {
        count,
        dim: 8,
        text_tokens: 3,
        image_patches: 4,
        num_concepts: 6,
        mismatch_rate,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Direct softmax recomputation of the label-masked objective:
/// `(1/B) sum_i l_i [-log softmax_j(cos(q_i, t_j)/tau)_i]` summed over views.
pub fn brute_soft_nce(views: &[(&Matrix, &Matrix)], labels: &[bool], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for (q, t) in views {
        let b = q.rows();
        for i in 0..b {
            if !labels[i] {
                continue;
            }
            let logits: Vec<f64> = (0..b).map(|j| cos(q.row(i), t.row(j)) / tau).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let p = (logits[i] - m).exp() / z;
            total += -p.ln() / b as f64;
        }
    }
    total
}

/// `n` draws around 0.1 and `n` around 0.9, both with standard deviation `sd`.
pub fn planted_clusters(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let lo = Normal::new(0.1, sd).unwrap();
    let hi = Normal::new(0.9, sd).unwrap();
    let mut xs: Vec<f64> = (0..n).map(|_| lo.sample(rng)).collect();
    xs.extend((0..n).map(|_| hi.sample(rng)));
    xs
}

pub fn mixture_log_likelihood(xs: &[f64], w0: f64, m: [f64; 2], v: [f64; 2]) -> f64 {
    let pdf = |x: f64, m: f64, v: f64| {
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    };
    xs.iter()
        .map(|&x| (w0 * pdf(x, m[0], v[0]) + (1.0 - w0) * pdf(x, m[1], v[1])).ln())
        .sum()
}

/// Brute-force maximum-likelihood search over a grid of two-component
/// mixtures with means near 0.1 and 0.9. Returns `(log-likelihood, w0, means)`.
pub fn grid_mle(xs: &[f64]) -> (f64, f64, [f64; 2]) {
    let mut best = (f64::NEG_INFINITY, 0.0, [0.0; 2]);
    let steps =
        |lo: f64, hi: f64, n: usize| (0..=n).map(move |k| lo + (hi - lo) * k as f64 / n as f64);
    for m0 in steps(0.05, 0.15, 40) {
        for m1 in steps(0.85, 0.95, 40) {
            for w0 in steps(0.3, 0.7, 16) {
                for s0 in steps(0.015, 0.06, 9) {
                    for s1 in steps(0.015, 0.06, 9) {
                        let ll = mixture_log_likelihood(xs, w0, [m0, m1], [s0 * s0, s1 * s1]);
                        if ll > best.0 {
                            best = (ll, w0, [m0, m1]);
                        }
                    }
                }
            }
        }
    }
    best
}
