//! Noise-pair Filter Block.
//!
//! A two-component 1-D Gaussian mixture is fitted by EM to each view's
//! per-sample losses. Component 0 is always the lower-mean (matched)
//! component. Posteriors of component 0 are thresholded per view, the two
//! views' decisions are combined into matched / mismatched / partially
//! matched sets, and the sets become binary soft labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::SoftLabelVector;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_THETA: f64 = 0.5;
/// Fewer losses than this cannot support a two-component fit.
pub const MIN_EM_POINTS: usize = 4;

/// Min-max bounds used to map raw losses onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScaling {
    pub min: f64,
    pub max: f64,
}

impl LossScaling {
    pub fn fit(losses: &[f64]) -> Self {
        let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    /// Constant ranges map to 0.5.
    pub fn apply(&self, x: f64) -> f64 {
        let range = self.max - self.min;
        if !(range > 0.0) {
            0.5
        } else {
            (x - self.min) / range
        }
    }
}

/// Min-max normalizes to `[0, 1]`; constant vectors become all 0.5.
pub fn normalize_losses(losses: &[f64]) -> Vec<f64> {
    let s = LossScaling::fit(losses);
    losses.iter().map(|&x| s.apply(x)).collect()
}

/// Two-component 1-D mixture with `means[0] <= means[1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl GmmParams {
    fn log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k]))
    }

    /// `log p(x)` under the mixture.
    pub fn log_density(&self, x: f64) -> f64 {
        let [a, b] = self.log_joint(x);
        log_add_exp(a, b)
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter().map(|&x| self.log_density(x)).sum()
    }

    /// Responsibilities `[p(k=0|x), p(k=1|x)]`.
    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let [a, b] = self.log_joint(x);
        let z = log_add_exp(a, b);
        [(a - z).exp(), (b - z).exp()]
    }

    fn relabeled(self) -> Self {
        if self.means[0] <= self.means[1] {
            self
        } else {
            Self {
                weights: [self.weights[1], self.weights[0]],
                means: [self.means[1], self.means[0]],
                variances: [self.variances[1], self.variances[0]],
            }
        }
    }
}

/// Posterior of the matched (lower-mean) component, computed in log space.
pub fn posterior(gmm: &GmmParams, loss: f64) -> f64 {
    gmm.responsibilities(loss)[0].clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmFit {
    pub params: GmmParams,
    /// Log-likelihood of the initial parameters followed by one entry per
    /// completed iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Too few points to fit; every sample is treated as matched.
    pub fallback: bool,
}

impl EmFit {
    pub fn posteriors(&self, losses: &[f64]) -> Vec<f64> {
        if self.fallback {
            vec![1.0; losses.len()]
        } else {
            losses.iter().map(|&l| posterior(&self.params, l)).collect()
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fits the mixture by EM. Means start at the 25th/75th percentiles, both
/// variances at the sample variance, weights at one half.
pub fn em_fit(losses: &[f64], opts: &EmOptions) -> Result<EmFit> {
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("loss vector passed to EM".into()));
    }
    let n = losses.len();
    let mean = if n == 0 {
        0.0
    } else {
        losses.iter().sum::<f64>() / n as f64
    };
    if n < MIN_EM_POINTS {
        return Ok(EmFit {
            params: GmmParams {
                weights: [1.0, 0.0],
                means: [mean, mean],
                variances: [VARIANCE_FLOOR; 2],
            },
            log_likelihoods: vec![],
            iterations: 0,
            converged: false,
            fallback: true,
        });
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let var = (losses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64)
        .max(VARIANCE_FLOOR);
    let mut params = GmmParams {
        weights: [0.5, 0.5],
        means: [quantile(&sorted, 0.25), quantile(&sorted, 0.75)],
        variances: [var, var],
    };
    let mut lls = vec![params.log_likelihood(losses)];
    let mut converged = false;
    let mut iterations = 0;
    let mut resp = vec![[0.0; 2]; n];
    while iterations < opts.max_iters {
        for (r, &x) in resp.iter_mut().zip(losses) {
            *r = params.responsibilities(x);
        }
        let mut next = params;
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= 0.0 {
                // Empty component: keep its location, drop its weight.
                next.weights[k] = 0.0;
                continue;
            }
            let mu = resp.iter().zip(losses).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let v = resp
                .iter()
                .zip(losses)
                .map(|(r, x)| r[k] * (x - mu) * (x - mu))
                .sum::<f64>()
                / nk;
            next.weights[k] = nk / n as f64;
            next.means[k] = mu;
            next.variances[k] = v.max(VARIANCE_FLOOR);
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / total, next.weights[1] / total];
        params = next;
        iterations += 1;
        let ll = params.log_likelihood(losses);
        let gain = ll - lls[lls.len() - 1];
        lls.push(ll);
        if gain < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        params: params.relabeled(),
        log_likelihoods: lls,
        iterations,
        converged,
        fallback: false,
    })
}

/// Index sets produced by thresholding both views' posteriors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSets {
    pub len: usize,
    pub matched: BTreeSet<usize>,
    pub mismatched: BTreeSet<usize>,
    pub matched_wcb: BTreeSet<usize>,
    pub mismatched_wcb: BTreeSet<usize>,
    /// Matched in either view.
    pub s_m: BTreeSet<usize>,
    /// Mismatched in both views.
    pub s_u: BTreeSet<usize>,
    /// Mismatched in exactly one view.
    pub s_p: BTreeSet<usize>,
}

pub fn build_sets(post: &[f64], post_wcb: &[f64], theta: f64) -> Result<PairSets> {
    if post.len() != post_wcb.len() {
        return Err(Error::shape(
            "build_sets",
            format!("{} vs {} posteriors", post.len(), post_wcb.len()),
        ));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!(
            "theta must lie in (0, 1), got {theta}"
        )));
    }
    let split = |p: &[f64]| -> (BTreeSet<usize>, BTreeSet<usize>) {
        (0..p.len()).partition(|&i| p[i] > theta)
    };
    let (matched, mismatched) = split(post);
    let (matched_wcb, mismatched_wcb) = split(post_wcb);
    let s_m = matched.union(&matched_wcb).copied().collect();
    let s_u: BTreeSet<usize> = mismatched.intersection(&mismatched_wcb).copied().collect();
    let either: BTreeSet<usize> = mismatched.union(&mismatched_wcb).copied().collect();
    let s_p = either.difference(&s_u).copied().collect();
    Ok(PairSets {
        len: post.len(),
        matched,
        mismatched,
        matched_wcb,
        mismatched_wcb,
        s_m,
        s_u,
        s_p,
    })
}

/// 1 for pairs in `S_m` outside `S_u` and `S_p`, 0 otherwise.
pub fn soft_labels(sets: &PairSets) -> SoftLabelVector {
    SoftLabelVector(
        (0..sets.len)
            .map(|i| sets.s_m.contains(&i) && !sets.s_u.contains(&i) && !sets.s_p.contains(&i))
            .collect(),
    )
}

/// When the mixture is refitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterScope {
    /// Fit on every batch's own losses.
    Batch,
    /// Fit once on the losses accumulated over the previous epoch and apply
    /// that fit to each batch.
    Epoch,
}

/// Monotone map applied to raw losses before min-max scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTransform {
    /// Raw losses.
    Identity,
    /// `sqrt(loss)`.
    #[default]
    Sqrt,
    /// `ln(1 + loss)`.
    Log1p,
    /// `ln(loss + 1e-3)`.
    Log,
}

impl LossTransform {
    pub fn apply(self, loss: f64) -> f64 {
        let x = loss.max(0.0);
        match self {
            LossTransform::Identity => x,
            LossTransform::Sqrt => x.sqrt(),
            LossTransform::Log1p => x.ln_1p(),
            LossTransform::Log => (x + 1e-3).ln(),
        }
    }
}

/// Settings shared by every per-view fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterOptions {
    pub transform: LossTransform,
    pub em: EmOptions,
    /// The high-loss component is treated as noise only when the mean raw
    /// loss of its members reaches this value. `0` disables the check.
    pub min_noise_loss: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            transform: LossTransform::default(),
            em: EmOptions::default(),
            min_noise_loss: 0.0,
        }
    }
}

/// Chance-level NCE loss for a batch of `b`: a positive that scores like a
/// random negative yields about `ln b`.
pub fn chance_loss(b: usize) -> f64 {
    (b as f64).ln()
}

/// A fitted per-view model ready to label batches.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFilter {
    pub transform: LossTransform,
    pub scaling: LossScaling,
    pub fit: EmFit,
    /// Responsibility-weighted mean raw loss of the high-loss component.
    pub noise_loss: f64,
    /// False when the fit fell back or the high-loss component sits below
    /// [`FilterOptions::min_noise_loss`]; every sample is then matched.
    pub active: bool,
}

impl ViewFilter {
    pub fn fit(raw_losses: &[f64], opts: &FilterOptions) -> Result<Self> {
        let transform = opts.transform;
        let mapped: Vec<f64> = raw_losses.iter().map(|&x| transform.apply(x)).collect();
        let scaling = LossScaling::fit(&mapped);
        let normalized: Vec<f64> = mapped.iter().map(|&x| scaling.apply(x)).collect();
        let fit = em_fit(&normalized, &opts.em)?;
        let (mut num, mut den) = (0.0, 0.0);
        for (&raw, &x) in raw_losses.iter().zip(&normalized) {
            let r = fit.params.responsibilities(x)[1];
            num += r * raw;
            den += r;
        }
        let noise_loss = if den > 0.0 { num / den } else { 0.0 };
        let active = !fit.fallback && noise_loss >= opts.min_noise_loss;
        Ok(Self {
            transform,
            scaling,
            fit,
            noise_loss,
            active,
        })
    }

    /// Matched-component posteriors. Inputs are clamped to the span of the
    /// two means first: with unequal variances the wider component would
    /// otherwise also win the far tail on the other side.
    pub fn posteriors(&self, raw_losses: &[f64]) -> Vec<f64> {
        if !self.active {
            return vec![1.0; raw_losses.len()];
        }
        let [lo, hi] = self.fit.params.means;
        raw_losses
            .iter()
            .map(|&x| {
                posterior(
                    &self.fit.params,
                    self.scaling.apply(self.transform.apply(x)).clamp(lo, hi),
                )
            })
            .collect()
    }
}

/// Labels a batch from its two loss views. With a single view, the same
/// posteriors stand in for both.
pub fn label_batch(
    global: (&ViewFilter, &[f64]),
    wcb: Option<(&ViewFilter, &[f64])>,
    theta: f64,
) -> Result<(PairSets, SoftLabelVector)> {
    let post = global.0.posteriors(global.1);
    let post_wcb = match wcb {
        Some((f, l)) => f.posteriors(l),
        None => post.clone(),
    };
    let sets = build_sets(&post, &post_wcb, theta)?;
    let labels = soft_labels(&sets);
    Ok((sets, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_losses(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_losses(&[3.0, 3.0, 3.0]), vec![0.5; 3]);
    }

    #[test]
    fn identical_points() {
        let fit = em_fit(&[0.4; 10], &EmOptions::default()).unwrap();
        assert_eq!(fit.params.means, [0.4, 0.4]);
        assert_eq!(fit.params.variances, [VARIANCE_FLOOR; 2]);
        for p in fit.posteriors(&[0.4]) {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points_fall_back() {
        let fit = em_fit(&[0.1, 0.9, 0.5], &EmOptions::default()).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.posteriors(&[0.1, 0.9, 0.5]), vec![1.0; 3]);
    }

    #[test]
    fn posterior_symmetry_and_limit() {
        let g = GmmParams {
            weights: [0.5, 0.5],
            means: [0.2, 0.8],
            variances: [0.01, 0.01],
        };
        assert!((posterior(&g, 0.5) - 0.5).abs() < 1e-15);
        assert!(posterior(&g, -50.0) > 1.0 - 1e-12);
        assert!(posterior(&g, 50.0) < 1e-12);
    }

    #[test]
    fn worked_set_example() {
        let sets = build_sets(&[0.9, 0.3], &[0.8, 0.6], 0.5).unwrap();
        assert_eq!(sets.s_m, BTreeSet::from([0, 1]));
        assert!(sets.s_u.is_empty());
        assert_eq!(sets.s_p, BTreeSet::from([1]));
        assert_eq!(soft_labels(&sets).0, vec![true, false]);
    }

    #[test]
    fn unanimous_sets() {
        let s = build_sets(&[0.9; 4], &[0.7; 4], 0.5).unwrap();
        assert_eq!(s.s_m.len(), 4);
        assert!(s.s_u.is_empty() && s.s_p.is_empty());
        let s = build_sets(&[0.1; 4], &[0.5; 4], 0.5).unwrap();
        assert_eq!(s.s_u.len(), 4);
        assert!(s.s_m.is_empty() && s.s_p.is_empty());
        assert_eq!(soft_labels(&s).count_ones(), 0);
    }

    #[test]
    fn set_errors() {
        assert!(build_sets(&[0.1], &[0.1, 0.2], 0.5).is_err());
        assert!(build_sets(&[0.1], &[0.1], 1.0).is_err());
    }

    #[test]
    fn single_view_labels() {
        let losses = [0.1, 0.12, 0.09, 0.11, 0.95, 0.9, 0.1, 0.13];
        let opts = FilterOptions {
            transform: LossTransform::Identity,
            ..Default::default()
        };
        let f = ViewFilter::fit(&losses, &opts).unwrap();
        let (_, labels) = label_batch((&f, &losses), None, 0.5).unwrap();
        assert_eq!(
            labels.0,
            vec![true, true, true, true, false, false, true, true]
        );
    }
}
