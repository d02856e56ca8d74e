//! Training loop: compensation, fusion, noise filtering and the soft-label
//! objective, plus per-epoch evaluation and the four-way ablation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_filter, FilterQuality, Recalls};
use crate::fusion::{masked_objective, nce_per_sample, SoftLabelVector, View, DEFAULT_TAU};
use crate::model::Model;
use crate::nfb::{
    chance_loss, label_batch, EmOptions, FilterOptions, FilterScope, GmmParams, LossTransform,
    ViewFilter, DEFAULT_THETA,
};
use crate::numerics::{Matrix, ParamGroup, ParamStore, Tape};
use crate::synth::{Dataset, TripletSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_wcb: f64,
    pub lr_other: f64,
    pub tau: f64,
    pub theta: f64,
    pub filter_scope: FilterScope,
    pub loss_transform: LossTransform,
    /// Ignore a high-loss component whose mean loss is below chance level.
    pub chance_gate: bool,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub enable_wcb: bool,
    pub enable_nfb: bool,
    pub em_max_iters: usize,
    pub em_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            lr_wcb: 1e-3,
            lr_other: 1e-3,
            tau: DEFAULT_TAU,
            theta: DEFAULT_THETA,
            filter_scope: FilterScope::Epoch,
            loss_transform: LossTransform::default(),
            chance_gate: true,
            warmup_epochs: 3,
            seed: 0,
            adam: AdamConfig::default(),
            enable_wcb: true,
            enable_nfb: true,
            em_max_iters: 100,
            em_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 4 {
            return bad(format!("batch_size must be >= 4, got {}", self.batch_size));
        }
        if !(self.lr_wcb > 0.0 && self.lr_other > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.warmup_epochs < 1 {
            return bad("warmup_epochs must be >= 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("invalid Adam hyperparameters".into());
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        match (self.enable_wcb, self.enable_nfb) {
            (false, false) => Variant::Baseline,
            (true, false) => Variant::WcbOnly,
            (false, true) => Variant::NfbOnly,
            (true, true) => Variant::Full,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.enable_wcb, self.enable_nfb) = v.flags();
        self
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            transform: self.loss_transform,
            em: EmOptions {
                max_iters: self.em_max_iters,
                tol: self.em_tol,
            },
            min_noise_loss: if self.chance_gate {
                chance_loss(self.batch_size)
            } else {
                0.0
            },
        }
    }
}

/// Component switches compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    WcbOnly,
    NfbOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::WcbOnly,
        Variant::NfbOnly,
        Variant::Full,
    ];

    /// `(enable_wcb, enable_nfb)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::WcbOnly => (true, false),
            Variant::NfbOnly => (false, true),
            Variant::Full => (true, true),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::WcbOnly => "wcb_only",
            Variant::NfbOnly => "nfb_only",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Adam with one learning rate per [`ParamGroup`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr_wcb: f64,
    lr_other: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig, lr_wcb: f64, lr_other: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            cfg,
            lr_wcb,
            lr_other,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = match p.group {
                ParamGroup::Wcb => self.lr_wcb,
                ParamGroup::Other => self.lr_other,
            };
            let g = p.grad.data();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * g[k];
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * g[k] * g[k];
                *w -= lr * (m.data()[k] / c1) / ((v.data()[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// Per-epoch metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub variant: Variant,
    pub train_loss: f64,
    pub label1_fraction: f64,
    pub filter_active: bool,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    /// Absent when ground truth is unavailable or filtering is disabled.
    pub filter: Option<FilterQuality>,
}

impl MetricsRecord {
    pub fn recalls(&self) -> Recalls {
        Recalls {
            r1: self.recall_at_1,
            r10: self.recall_at_10,
            r50: self.recall_at_50,
        }
    }
}

/// Mixture fit of one view for the filter report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: View,
    pub gmm: GmmParams,
    pub fallback: bool,
    /// Mean raw loss of the high-loss component.
    pub noise_loss: f64,
    /// Whether this view's fit was used to reject samples.
    pub active: bool,
}

/// One epoch of filter diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub epoch: usize,
    pub views: Vec<ViewReport>,
    /// `|S_m|`, summed over the epoch's batches.
    pub s_m: usize,
    /// `|S_u|`.
    pub s_u: usize,
    /// `|S_p|`.
    pub s_p: usize,
    pub quality: Option<FilterQuality>,
}

#[derive(Clone, Debug)]
pub struct EpochOutcome {
    pub metrics: MetricsRecord,
    pub filter: Option<FilterReport>,
    /// Final soft label per training sample, in dataset order.
    pub labels: Vec<bool>,
    /// Detached global-view losses per training sample.
    pub losses: Vec<f64>,
    pub losses_wcb: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct EpochFilters {
    global: ViewFilter,
    wcb: Option<ViewFilter>,
}

/// Owns the model and optimizer state across epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: Adam,
    /// Losses of the previous epoch, indexed by training sample.
    previous: Option<(Vec<f64>, Option<Vec<f64>>)>,
}

fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    // A trailing single sample cannot form a contrastive batch.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

impl Trainer {
    pub fn new(config: TrainConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(dim, config.seed);
        let adam = Adam::new(&model.store, config.adam, config.lr_wcb, config.lr_other);
        Ok(Self {
            config,
            model,
            adam,
            previous: None,
        })
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Detached per-sample losses for every training sample under the
    /// current parameters, batched in `order`.
    fn detached_losses(
        &self,
        train: &[TripletSample],
        order: &[usize],
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let use_wcb = self.config.enable_wcb;
        let mut global = vec![0.0; train.len()];
        let mut wcb = use_wcb.then(|| vec![0.0; train.len()]);
        for batch in batches(order, self.config.batch_size) {
            let samples: Vec<&TripletSample> = batch.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let fwd = self.model.forward_batch(&mut tape, &samples, use_wcb)?;
            let l = nce_per_sample(&mut tape, fwd.query, fwd.target, self.config.tau)?;
            for (k, &i) in batch.iter().enumerate() {
                global[i] = tape.value(l).data()[k];
            }
            if let (Some((q, t)), Some(w)) = (fwd.wcb, wcb.as_mut()) {
                let lw = nce_per_sample(&mut tape, q, t, self.config.tau)?;
                for (k, &i) in batch.iter().enumerate() {
                    w[i] = tape.value(lw).data()[k];
                }
            }
        }
        Ok((global, wcb))
    }

    fn fit_filters(&self, losses: &(Vec<f64>, Option<Vec<f64>>)) -> Result<EpochFilters> {
        let opts = self.config.filter_options();
        Ok(EpochFilters {
            global: ViewFilter::fit(&losses.0, &opts)?,
            wcb: losses
                .1
                .as_ref()
                .map(|l| ViewFilter::fit(l, &opts))
                .transpose()?,
        })
    }

    fn view_reports(filters: &EpochFilters) -> Vec<ViewReport> {
        let mut out = vec![ViewReport {
            view: View::Global,
            gmm: filters.global.fit.params,
            fallback: filters.global.fit.fallback,
            noise_loss: filters.global.noise_loss,
            active: filters.global.active,
        }];
        if let Some(w) = &filters.wcb {
            out.push(ViewReport {
                view: View::Wcb,
                gmm: w.fit.params,
                fallback: w.fit.fallback,
                noise_loss: w.noise_loss,
                active: w.active,
            });
        }
        out
    }

    /// Retrieval metrics of the current parameters on `eval`.
    pub fn evaluate(&self, eval: &[TripletSample]) -> Result<Recalls> {
        let (q, g) = self.model.embed(eval, self.config.enable_wcb)?;
        Recalls::compute(&q, &g)
    }

    /// One pass over `train`. Ground truth of `train` is read only after the
    /// pass, to score the filter.
    pub fn train_epoch(
        &mut self,
        train: &[TripletSample],
        eval: &[TripletSample],
        epoch: usize,
    ) -> Result<EpochOutcome> {
        if train.len() < 2 {
            return Err(Error::Config(
                "training split needs at least two samples".into(),
            ));
        }
        let cfg = self.config.clone();
        let filter_active = cfg.enable_nfb && epoch >= cfg.warmup_epochs;
        let order = self.epoch_order(train.len(), epoch);

        let epoch_filters = if filter_active && cfg.filter_scope == FilterScope::Epoch {
            let losses = match self.previous.take() {
                Some(l) => l,
                None => self.detached_losses(train, &order)?,
            };
            Some(self.fit_filters(&losses)?)
        } else {
            None
        };

        let mut labels = vec![true; train.len()];
        let mut losses = vec![0.0; train.len()];
        let mut losses_wcb = cfg.enable_wcb.then(|| vec![0.0; train.len()]);
        let (mut s_m, mut s_u, mut s_p) = (0, 0, 0);
        let mut total_loss = 0.0;
        let all_batches = batches(&order, cfg.batch_size);

        for (bi, batch) in all_batches.iter().enumerate() {
            let samples: Vec<&TripletSample> = batch.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let fwd = self
                .model
                .forward_batch(&mut tape, &samples, cfg.enable_wcb)?;
            let per_sample = nce_per_sample(&mut tape, fwd.query, fwd.target, cfg.tau)?;
            let per_sample_wcb = match fwd.wcb {
                Some((q, t)) => Some(nce_per_sample(&mut tape, q, t, cfg.tau)?),
                None => None,
            };
            // Detached copies feed the filter; labels re-enter as constants.
            let l_global = tape.value(per_sample).data().to_vec();
            let l_wcb = per_sample_wcb.map(|v| tape.value(v).data().to_vec());

            let batch_labels = if filter_active {
                let batch_filters;
                let filters = match &epoch_filters {
                    Some(f) => f,
                    None => {
                        batch_filters = self.fit_filters(&(l_global.clone(), l_wcb.clone()))?;
                        &batch_filters
                    }
                };
                let (sets, labels) = label_batch(
                    (&filters.global, &l_global),
                    filters.wcb.as_ref().zip(l_wcb.as_deref()),
                    cfg.theta,
                )?;
                s_m += sets.s_m.len();
                s_u += sets.s_u.len();
                s_p += sets.s_p.len();
                labels
            } else {
                SoftLabelVector::ones(batch.len())
            };

            let loss = masked_objective(&mut tape, per_sample, per_sample_wcb, &batch_labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {bi}: loss {value}; samples {batch:?}; per-sample {l_global:?}"
                )));
            }
            total_loss += value;
            let grads = tape.backward(loss)?;
            self.model.store.zero_grads();
            self.model.store.accumulate(&tape, &grads);
            if !self.model.store.grads_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {bi}: non-finite gradient"
                )));
            }
            self.adam.step(&mut self.model.store);

            for (k, &i) in batch.iter().enumerate() {
                labels[i] = batch_labels.0[k];
                losses[i] = l_global[k];
                if let (Some(w), Some(lw)) = (losses_wcb.as_mut(), l_wcb.as_ref()) {
                    w[i] = lw[k];
                }
            }
        }
        self.previous = Some((losses.clone(), losses_wcb.clone()));

        let noisy: Vec<bool> = train.iter().map(|s| s.truth.is_noisy()).collect();
        let quality = if cfg.enable_nfb {
            evaluate_filter(&labels, Some(&noisy))?
        } else {
            None
        };
        let filter = if filter_active {
            let filters = match epoch_filters {
                Some(f) => f,
                None => self.fit_filters(&(losses.clone(), losses_wcb.clone()))?,
            };
            Some(FilterReport {
                epoch,
                views: Self::view_reports(&filters),
                s_m,
                s_u,
                s_p,
                quality,
            })
        } else {
            None
        };

        let recalls = self.evaluate(eval)?;
        let ones = labels.iter().filter(|&&l| l).count();
        Ok(EpochOutcome {
            metrics: MetricsRecord {
                epoch,
                variant: cfg.variant(),
                train_loss: total_loss / all_batches.len() as f64,
                label1_fraction: ones as f64 / labels.len() as f64,
                filter_active,
                recall_at_1: recalls.r1,
                recall_at_10: recalls.r10,
                recall_at_50: recalls.r50,
                filter: quality,
            },
            filter,
            labels,
            losses,
            losses_wcb,
        })
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub filter_reports: Vec<FilterReport>,
    /// Holdout recalls of the final parameters.
    pub final_recalls: Recalls,
    /// Soft labels of the last epoch (all ones when no epoch ran).
    pub final_labels: Vec<bool>,
    pub model: Model,
}

/// Trains for `config.epochs`, calling `on_epoch` after each epoch.
pub fn run_training_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochOutcome),
) -> Result<RunResult> {
    dataset.spec.validate()?;
    let mut trainer = Trainer::new(config.clone(), dataset.spec.dim)?;
    let (train, eval) = (dataset.train(), dataset.holdout());
    let mut records = Vec::with_capacity(config.epochs);
    let mut filter_reports = Vec::new();
    let mut final_labels = vec![true; train.len()];
    for epoch in 0..config.epochs {
        let out = trainer.train_epoch(train, eval, epoch)?;
        on_epoch(&out);
        records.push(out.metrics);
        filter_reports.extend(out.filter);
        final_labels = out.labels;
    }
    let final_recalls = match records.last() {
        Some(r) => r.recalls(),
        None => trainer.evaluate(eval)?,
    };
    Ok(RunResult {
        records,
        filter_reports,
        final_recalls,
        final_labels,
        model: trainer.model,
    })
}

pub fn run_training(dataset: &Dataset, config: &TrainConfig) -> Result<RunResult> {
    run_training_with(dataset, config, |_| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub recalls: Recalls,
}

/// Final holdout recalls of the four variants, trained with identical seeds.
pub fn run_ablation(dataset: &Dataset, config: &TrainConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .into_iter()
        .map(|v| {
            let run = run_training(dataset, &config.clone().with_variant(v))?;
            Ok(AblationRow {
                variant: v,
                recalls: run.final_recalls,
            })
        })
        .collect()
}
