//! Four-way ablation on the default noisy benchmark: plain contrastive
//! training, compensation only, filtering only, and both.
//!
//! Takes roughly 20 s in release mode.

use ncl::run::ablation_csv;
use ncl::synth::{Dataset, DatasetSpec};
use ncl::train::{run_ablation, TrainConfig};

fn main() -> ncl::Result<()> {
    let dataset = Dataset::generate(&DatasetSpec::default())?;
    let rows = run_ablation(&dataset, &TrainConfig::default())?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
