//! Generates a small noisy benchmark, prints its truth histogram, and checks
//! that the binary file reads back bit-exactly.

use ncl::synth::{read_dataset, write_dataset, Dataset, DatasetSpec, Truth};

fn main() -> ncl::Result<()> {
    let spec = DatasetSpec {
        count: 500,
        mismatch_rate: 0.2,
        partial_rate: 0.1,
        seed: 42,
        ..Default::default()
    };
    let dataset = Dataset::generate(&spec)?;
    let [clean, mis, par] = Dataset::histogram(dataset.train());
    println!(
        "train split: {} samples (clean {clean}, mismatched {mis}, partial {par}); holdout {}",
        dataset.train().len(),
        dataset.holdout().len()
    );

    let s = &dataset.samples[0];
    println!(
        "sample 0: text {}x{}, reference {}x{}, truth {:?}, concepts {} -> {}",
        s.mod_text.len(),
        s.mod_text.dim(),
        s.ref_image.len(),
        s.ref_image.dim(),
        s.truth,
        s.ref_concept,
        s.target_concept
    );
    let noisy = dataset
        .train()
        .iter()
        .filter(|s| s.truth != Truth::Clean)
        .count();
    println!(
        "noisy fraction of train split: {:.3}",
        noisy as f64 / dataset.train().len() as f64
    );

    let path = std::env::temp_dir().join(format!("ncl-example-{}.ncld", std::process::id()));
    write_dataset(&dataset, &path)?;
    let back = read_dataset(&path)?;
    println!("round trip bit-exact: {}", back == dataset);
    std::fs::remove_file(&path).ok();
    Ok(())
}
