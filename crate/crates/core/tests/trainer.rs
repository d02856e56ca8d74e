//! Training-loop behavior: determinism, label detachment, baseline
//! equivalence and warm-up.

mod common;

use common::tiny_dataset;
use ncl::fusion::{masked_objective, nce_per_sample, SoftLabelVector};
use ncl::model::Model;
use ncl::nfb::{label_batch, FilterOptions, LossTransform, ViewFilter};
use ncl::numerics::{Matrix, Tape};
use ncl::synth::{Dataset, DatasetSpec, TripletSample};
use ncl::train::{run_training, TrainConfig, Trainer, Variant};

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 4,
        warmup_epochs: 1,
        ..Default::default()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = tiny_dataset(80, 0.3, 5);
    for v in Variant::ALL {
        let cfg = small_config().with_variant(v);
        let a = run_training(&ds, &cfg).unwrap();
        let b = run_training(&ds, &cfg).unwrap();
        assert_eq!(a.records, b.records, "{v}");
        assert_eq!(a.model, b.model, "{v}");
        assert_eq!(a.final_labels, b.final_labels);
    }
}

#[test]
fn different_seeds_differ() {
    let ds = tiny_dataset(80, 0.3, 5);
    let a = run_training(&ds, &small_config()).unwrap();
    let b = run_training(
        &ds,
        &TrainConfig {
            seed: 1,
            ..small_config()
        },
    )
    .unwrap();
    assert_ne!(a.model, b.model);
}

fn gradients(
    model: &Model,
    samples: &[&TripletSample],
    label_pass: bool,
) -> (Vec<Matrix>, SoftLabelVector) {
    let mut tape = Tape::new();
    let fwd = model.forward_batch(&mut tape, samples, true).unwrap();
    let l = nce_per_sample(&mut tape, fwd.query, fwd.target, 0.07).unwrap();
    let (q, t) = fwd.wcb.unwrap();
    let lw = nce_per_sample(&mut tape, q, t, 0.07).unwrap();
    let labels = if label_pass {
        let opts = FilterOptions {
            transform: LossTransform::Identity,
            ..Default::default()
        };
        let (lg, lwv) = (
            tape.value(l).data().to_vec(),
            tape.value(lw).data().to_vec(),
        );
        let fg = ViewFilter::fit(&lg, &opts).unwrap();
        let fw = ViewFilter::fit(&lwv, &opts).unwrap();
        label_batch((&fg, &lg), Some((&fw, &lwv)), 0.5).unwrap().1
    } else {
        // Labels fixed in advance: same pattern the labeling pass produces.
        gradients(model, samples, true).1
    };
    let loss = masked_objective(&mut tape, l, Some(lw), &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut store = model.store.clone();
    store.zero_grads();
    store.accumulate(&tape, &grads);
    (store.iter().map(|p| p.grad.clone()).collect(), labels)
}

#[test]
fn labeling_pass_does_not_reach_the_gradient() {
    let ds = tiny_dataset(12, 0.5, 6);
    let model = Model::init(8, 3);
    let samples: Vec<&TripletSample> = ds.samples.iter().take(12).collect();
    let (with_pass, labels) = gradients(&model, &samples, true);
    let (constant, labels2) = gradients(&model, &samples, false);
    assert_eq!(labels, labels2);
    assert!(labels.count_ones() < labels.len(), "filter removed nothing");
    assert_eq!(with_pass, constant);
}

#[test]
fn one_batch_baseline_epoch_is_one_adam_step() {
    let ds = tiny_dataset(20, 0.3, 7);
    let (train, eval) = ds.samples.split_at(8);
    let cfg = TrainConfig {
        batch_size: 8,
        ..Default::default()
    }
    .with_variant(Variant::Baseline);
    let mut trainer = Trainer::new(cfg.clone(), 8).unwrap();
    trainer.train_epoch(train, eval, 0).unwrap();

    // Manual oracle: the first Adam step moves every weight by
    // lr * g / (|g| + eps) against the gradient of the mean NCE loss.
    let model = Model::init(8, cfg.seed);
    let refs: Vec<&TripletSample> = train.iter().collect();
    let mut tape = Tape::new();
    let fwd = model.forward_batch(&mut tape, &refs, false).unwrap();
    let l = nce_per_sample(&mut tape, fwd.query, fwd.target, cfg.tau).unwrap();
    let loss = masked_objective(&mut tape, l, None, &SoftLabelVector::ones(8)).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut store = model.store.clone();
    store.zero_grads();
    store.accumulate(&tape, &grads);
    let mut moved = 0;
    for (p, got) in store.iter().zip(trainer.model.store.iter()) {
        let lr = match p.group {
            ncl::numerics::ParamGroup::Wcb => cfg.lr_wcb,
            ncl::numerics::ParamGroup::Other => cfg.lr_other,
        };
        for ((w, g), w_new) in p
            .value
            .data()
            .iter()
            .zip(p.grad.data())
            .zip(got.value.data())
        {
            let expected = w - lr * g / (g.abs() + cfg.adam.eps);
            assert!(
                (w_new - expected).abs() <= 1e-12,
                "{}: {w_new} vs {expected}",
                p.name
            );
            moved += usize::from(w_new != w);
        }
    }
    assert!(moved > 0);
}

#[test]
fn filter_inside_warmup_matches_disabled_filter() {
    let ds = tiny_dataset(80, 0.3, 8);
    let on = TrainConfig {
        warmup_epochs: 4,
        ..small_config()
    };
    let off = TrainConfig {
        enable_nfb: false,
        ..on.clone()
    };
    let a = run_training(&ds, &on).unwrap();
    let b = run_training(&ds, &off).unwrap();
    assert_eq!(a.model, b.model);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.train_loss, y.train_loss);
        assert_eq!(x.recalls(), y.recalls());
        assert_eq!(x.label1_fraction, 1.0);
    }
    assert!(a.filter_reports.is_empty());
}

#[test]
fn baseline_and_nfb_only_share_the_warmup() {
    let ds = tiny_dataset(80, 0.3, 9);
    let cfg = TrainConfig {
        warmup_epochs: 2,
        ..small_config()
    };
    let base = run_training(&ds, &cfg.clone().with_variant(Variant::Baseline)).unwrap();
    let nfb = run_training(&ds, &cfg.with_variant(Variant::NfbOnly)).unwrap();
    for e in 0..2 {
        assert_eq!(base.records[e].train_loss, nfb.records[e].train_loss);
        assert_eq!(base.records[e].recalls(), nfb.records[e].recalls());
    }
    assert!(nfb.records[2].filter_active && !base.records[2].filter_active);
}

#[test]
fn zero_epochs_is_a_no_op() {
    let ds = tiny_dataset(40, 0.3, 10);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    let run = run_training(&ds, &cfg).unwrap();
    assert!(run.records.is_empty() && run.filter_reports.is_empty());
    assert_eq!(run.model, Model::init(8, cfg.seed));
    assert!(run.final_labels.iter().all(|&l| l));
}

#[test]
fn warmup_keeps_every_pair() {
    let ds = tiny_dataset(80, 0.5, 11);
    let cfg = TrainConfig {
        warmup_epochs: 3,
        ..small_config()
    };
    let run = run_training(&ds, &cfg).unwrap();
    for r in &run.records[..3] {
        assert_eq!(r.label1_fraction, 1.0);
        assert!(!r.filter_active);
    }
    assert_eq!(run.filter_reports.len(), 1);
    assert_eq!(run.filter_reports[0].epoch, 3);
}

#[test]
fn clean_data_keeps_most_pairs() {
    let spec = DatasetSpec {
        mismatch_rate: 0.0,
        partial_rate: 0.0,
        ..Default::default()
    };
    let ds = Dataset::generate(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..Default::default()
    };
    let run = run_training(&ds, &cfg).unwrap();
    for r in &run.records[cfg.warmup_epochs..] {
        assert!(r.filter_active);
        assert!(
            r.label1_fraction >= 0.9,
            "epoch {}: {}",
            r.epoch,
            r.label1_fraction
        );
    }
}

#[test]
fn losses_are_recorded_per_sample() {
    let ds = tiny_dataset(40, 0.3, 12);
    let mut trainer = Trainer::new(small_config(), 8).unwrap();
    let out = trainer.train_epoch(ds.train(), ds.holdout(), 0).unwrap();
    assert_eq!(out.losses.len(), ds.train().len());
    assert!(out.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert_eq!(
        out.losses_wcb.as_ref().map(Vec::len),
        Some(ds.train().len())
    );
}
