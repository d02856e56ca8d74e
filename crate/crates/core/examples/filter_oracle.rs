//! Reference run for noise-detection quality: default dataset with 30%
//! mismatched training pairs, 3 warm-up epochs, 20 epochs in total.
//!
//! Prints the per-epoch filter precision/recall/F1 for seed 0, then the
//! final F1 for seeds 0..4. The acceptance threshold (F1 >= 0.90) was frozen
//! from this run: seed 0 ends at 0.936 and the worst of the four seeds at
//! 0.928.

use std::time::Instant;

use ncl::synth::{Dataset, DatasetSpec};
use ncl::train::{run_training_with, TrainConfig};

fn final_f1(seed: u64, verbose: bool) -> ncl::Result<f64> {
    let spec = DatasetSpec {
        mismatch_rate: 0.3,
        partial_rate: 0.0,
        seed,
        ..Default::default()
    };
    let config = TrainConfig {
        warmup_epochs: 3,
        epochs: 20,
        seed,
        ..Default::default()
    };
    let dataset = Dataset::generate(&spec)?;
    let run = run_training_with(&dataset, &config, |out| {
        if !verbose {
            return;
        }
        let m = &out.metrics;
        let q = m
            .filter
            .map(|q| (q.precision, q.recall, q.f1))
            .unwrap_or_default();
        println!(
            "epoch {:2} loss {:.4} label1 {:.3} R@10 {:.3} filter P {:.3} R {:.3} F1 {:.3}",
            m.epoch, m.train_loss, m.label1_fraction, m.recall_at_10, q.0, q.1, q.2
        );
    })?;
    Ok(run
        .records
        .last()
        .and_then(|r| r.filter)
        .map_or(0.0, |q| q.f1))
}

fn main() -> ncl::Result<()> {
    let start = Instant::now();
    let f1 = final_f1(0, true)?;
    println!(
        "seed 0: final F1 {f1:.4} in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    let mut worst = f1;
    for seed in 1..4 {
        let f = final_f1(seed, false)?;
        println!("seed {seed}: final F1 {f:.4}");
        worst = worst.min(f);
    }
    println!("worst final F1 over seeds 0..4: {worst:.4}");
    Ok(())
}
