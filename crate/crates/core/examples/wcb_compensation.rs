//! Attention-weighted compensation of one image bundle.
//!
//! Perturbing a high-attention patch moves the compensated embedding far
//! more than perturbing a distractor patch with near-zero attention.

use ncl::model::Model;
use ncl::numerics::{l2_norm, Tape};
use ncl::synth::{Dataset, DatasetSpec, TokenBundle};
use ncl::wcb::{compensate, weight_relocate};

fn embed(bundle: &TokenBundle, model: &Model) -> ncl::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = compensate(&mut tape, bundle, &model.store)?;
    Ok(tape.value(v).data().to_vec())
}

fn main() -> ncl::Result<()> {
    let spec = DatasetSpec {
        count: 1,
        ..Default::default()
    };
    let dataset = Dataset::generate(&spec)?;
    let bundle = &dataset.samples[0].ref_image;
    let model = Model::init(spec.dim, 7);

    let weighted = weight_relocate(bundle);
    println!("relocated tokens: {}x{}", weighted.rows(), weighted.cols());
    let base = embed(bundle, &model)?;
    println!(
        "compensated norm {:.4}, global norm {:.4}",
        l2_norm(&base),
        l2_norm(bundle.global_token())
    );

    let rows: Vec<usize> = (0..bundle.len())
        .filter(|&r| r != bundle.global_index)
        .collect();
    let hi = *rows
        .iter()
        .max_by(|&&a, &&b| bundle.attention[a].total_cmp(&bundle.attention[b]))
        .unwrap();
    let lo = *rows
        .iter()
        .min_by(|&&a, &&b| bundle.attention[a].total_cmp(&bundle.attention[b]))
        .unwrap();
    for (label, row) in [("high-attention", hi), ("distractor", lo)] {
        let mut perturbed = bundle.clone();
        for v in perturbed.tokens.row_mut(row) {
            *v += 1.0;
        }
        let moved = embed(&perturbed, &model)?;
        let shift: Vec<f64> = moved.iter().zip(&base).map(|(a, b)| a - b).collect();
        println!(
            "{label:>14} row {row:2} (attention {:.4}): embedding shift {:.5}",
            bundle.attention[row],
            l2_norm(&shift)
        );
    }
    Ok(())
}
