//! Per-sample contrastive losses and the label-masked objective, with
//! gradients flowing back to the queries.

use ncl::fusion::{soft_nce_loss, SoftLabelVector, DEFAULT_TAU};
use ncl::numerics::{Matrix, Tape};

fn main() -> ncl::Result<()> {
    let queries = Matrix::from_rows(&[
        [1.0, 0.1, 0.0],
        [0.0, 1.0, 0.2],
        [0.3, 0.0, 1.0],
        [0.5, 0.5, 0.5],
    ])?;
    // The last target does not match its query.
    let targets = Matrix::from_rows(&[
        [0.9, 0.2, 0.0],
        [0.1, 1.0, 0.1],
        [0.2, 0.1, 1.0],
        [-1.0, 0.2, 0.1],
    ])?;

    for labels in [
        SoftLabelVector::ones(4),
        SoftLabelVector(vec![true, true, true, false]),
    ] {
        let mut tape = Tape::new();
        let q = tape.leaf(queries.clone());
        let t = tape.leaf(targets.clone());
        let out = soft_nce_loss(&mut tape, (q, t), None, &labels, DEFAULT_TAU)?;
        let per: Vec<String> = tape
            .value(out.per_sample)
            .data()
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect();
        let grads = tape.backward(out.loss)?;
        println!(
            "labels {:?}: per-sample [{}], objective {:.4}, |dL/dq| {:.4}",
            labels.0,
            per.join(", "),
            tape.value(out.loss).item(),
            grads.wrt(q).norm()
        );
    }
    Ok(())
}
