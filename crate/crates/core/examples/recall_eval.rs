//! Recall@K of an untrained model versus a briefly trained one on the clean
//! holdout split.

use ncl::synth::{Dataset, DatasetSpec};
use ncl::train::{TrainConfig, Trainer};

fn main() -> ncl::Result<()> {
    let spec = DatasetSpec {
        count: 800,
        ..Default::default()
    };
    let dataset = Dataset::generate(&spec)?;
    let config = TrainConfig {
        epochs: 5,
        ..Default::default()
    };
    let mut trainer = Trainer::new(config.clone(), spec.dim)?;
    let r = trainer.evaluate(dataset.holdout())?;
    println!(
        "untrained: R@1 {:.3} R@10 {:.3} R@50 {:.3}",
        r.r1, r.r10, r.r50
    );
    for epoch in 0..config.epochs {
        let out = trainer.train_epoch(dataset.train(), dataset.holdout(), epoch)?;
        let m = out.metrics;
        println!(
            "epoch {epoch}: R@1 {:.3} R@10 {:.3} R@50 {:.3}",
            m.recall_at_1, m.recall_at_10, m.recall_at_50
        );
    }
    Ok(())
}
