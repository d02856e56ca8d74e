//! Query fusion, per-sample NCE losses and the soft-label NCE objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init_mlp, mlp_forward, Matrix, ParamGroup, ParamStore, Tape, Var};

pub const DEFAULT_TAU: f64 = 0.07;

/// Which pair of embeddings a query or loss belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Global tokens straight from the encoder.
    Global,
    /// Compensated embeddings.
    Wcb,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Global => "global",
            View::Wcb => "wcb",
        }
    }

    pub fn fusion_mlp(self) -> &'static str {
        match self {
            View::Global => "fuse_global",
            View::Wcb => "fuse_wcb",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub view: View,
}

/// Per-sample contrastive losses of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector {
    pub values: Vec<f64>,
    pub view: View,
}

impl LossVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Binary per-pair training mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SoftLabelVector(pub Vec<bool>);

impl SoftLabelVector {
    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&l| l).count()
    }

    pub fn as_mask(&self) -> Vec<f64> {
        self.0.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }
}

/// Registers both query-fusion MLPs (`2d -> d -> d`).
pub fn init_fusion<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) {
    for view in [View::Global, View::Wcb] {
        init_mlp(
            store,
            view.fusion_mlp(),
            2 * dim,
            dim,
            dim,
            ParamGroup::Other,
            rng,
        );
    }
}

/// `MLP_view([text | image])` row-wise over a batch.
pub fn fuse_query(
    tape: &mut Tape,
    text: Var,
    image: Var,
    store: &ParamStore,
    view: View,
) -> Result<Var> {
    let (t, i) = (tape.value(text).shape(), tape.value(image).shape());
    if t != i {
        return Err(Error::shape(
            "fuse_query",
            format!("text {t:?} vs image {i:?}"),
        ));
    }
    let joined = tape.concat_cols(text, image)?;
    mlp_forward(tape, joined, store, view.fusion_mlp())
}

/// Single-query convenience wrapper around [`fuse_query`].
pub fn fuse_query_vectors(
    text: &[f64],
    image: &[f64],
    store: &ParamStore,
    view: View,
) -> Result<QueryEmbedding> {
    let mut tape = Tape::new();
    let t = tape.leaf(Matrix::row_vector(text.to_vec()));
    let i = tape.leaf(Matrix::row_vector(image.to_vec()));
    let q = fuse_query(&mut tape, t, i, store, view)?;
    Ok(QueryEmbedding {
        vector: tape.value(q).data().to_vec(),
        view,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `B x 1` column of `-log softmax_j(cos(q_i, t_j) / tau)_i`.
pub fn nce_per_sample(tape: &mut Tape, queries: Var, targets: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (qb, tb) = (tape.value(queries).rows(), tape.value(targets).rows());
    if qb != tb {
        return Err(Error::shape(
            "nce_per_sample",
            format!("{qb} queries vs {tb} targets"),
        ));
    }
    if qb < 2 {
        return Err(Error::Config(format!(
            "contrastive batch needs B >= 2, got {qb}"
        )));
    }
    let sims = tape.cosine_matrix(queries, targets)?;
    tape.nce_rows(sims, tau)
}

/// Tape-free evaluation of [`nce_per_sample`].
pub fn nce_loss_vector(
    queries: &Matrix,
    targets: &Matrix,
    tau: f64,
    view: View,
) -> Result<LossVector> {
    let mut tape = Tape::new();
    let q = tape.leaf(queries.clone());
    let t = tape.leaf(targets.clone());
    let l = nce_per_sample(&mut tape, q, t, tau)?;
    Ok(LossVector {
        values: tape.value(l).data().to_vec(),
        view,
    })
}

/// Outputs of [`soft_nce_loss`].
#[derive(Clone, Copy, Debug)]
pub struct SoftNce {
    /// Scalar objective.
    pub loss: Var,
    /// Per-sample losses of the global view.
    pub per_sample: Var,
    /// Per-sample losses of the compensated view, when present.
    pub per_sample_wcb: Option<Var>,
}

/// `(1/B) sum_i l_i ell_i + (1/B) sum_i l_i ell_wcb_i`; the second term is
/// omitted when `wcb` is `None`.
pub fn soft_nce_loss(
    tape: &mut Tape,
    global: (Var, Var),
    wcb: Option<(Var, Var)>,
    labels: &SoftLabelVector,
    tau: f64,
) -> Result<SoftNce> {
    let per_sample = nce_per_sample(tape, global.0, global.1, tau)?;
    let per_sample_wcb = match wcb {
        Some((q, t)) => Some(nce_per_sample(tape, q, t, tau)?),
        None => None,
    };
    let loss = masked_objective(tape, per_sample, per_sample_wcb, labels)?;
    Ok(SoftNce {
        loss,
        per_sample,
        per_sample_wcb,
    })
}

/// The label-masked reduction of already recorded per-sample losses.
pub fn masked_objective(
    tape: &mut Tape,
    per_sample: Var,
    per_sample_wcb: Option<Var>,
    labels: &SoftLabelVector,
) -> Result<Var> {
    let b = tape.value(per_sample).rows();
    if labels.len() != b {
        return Err(Error::shape(
            "soft_nce_loss",
            format!("{} labels for a batch of {b}", labels.len()),
        ));
    }
    let mask = labels.as_mask();
    let loss = tape.masked_mean(per_sample, mask.clone())?;
    match per_sample_wcb {
        Some(l) => {
            if tape.value(l).rows() != b {
                return Err(Error::shape(
                    "soft_nce_loss",
                    "views disagree on batch size",
                ));
            }
            let term = tape.masked_mean(l, mask)?;
            tape.add(loss, term)
        }
        None => Ok(loss),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::set_mlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_similarities_give_log_b() {
        // Every query orthogonal to every target.
        let q = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let l = nce_loss_vector(&q, &t, 0.07, View::Global).unwrap();
        for v in l.values {
            assert!((v - 0.6931471805599453).abs() < 1e-15);
        }
    }

    #[test]
    fn opposite_off_diagonal() {
        let q = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let l = nce_loss_vector(&q, &q, 1.0, View::Global).unwrap();
        for v in l.values {
            assert!((v - 0.12692801104297263).abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn error_paths() {
        let q = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            nce_loss_vector(&q, &q, 0.0, View::Global),
            Err(Error::Config(_))
        ));
        let z = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            nce_loss_vector(&z, &q, 0.07, View::Global),
            Err(Error::Degenerate(_))
        ));
        let one = Matrix::row_vector(vec![1.0, 0.0]);
        assert!(nce_loss_vector(&one, &one, 0.07, View::Global).is_err());
    }

    #[test]
    fn zero_fusion_gives_zero_query_then_degenerate_cosine() {
        let d = 3;
        let mut store = ParamStore::new();
        set_mlp(
            &mut store,
            View::Global.fusion_mlp(),
            ParamGroup::Other,
            [
                Matrix::zeros(2 * d, d),
                Matrix::zeros(1, d),
                Matrix::zeros(d, d),
                Matrix::zeros(1, d),
            ],
        )
        .unwrap();
        let q =
            fuse_query_vectors(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], &store, View::Global).unwrap();
        assert_eq!(q.vector, vec![0.0; 3]);
        let queries = Matrix::from_rows(&[q.vector.clone(), q.vector]).unwrap();
        let targets = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(
            nce_loss_vector(&queries, &targets, 0.07, View::Global),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn fusion_is_not_symmetric_in_halves() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_fusion(&mut store, 4, &mut rng);
        let a = [0.3, -0.2, 0.9, 0.1];
        let b = [-0.5, 0.4, 0.2, 0.7];
        let ab = fuse_query_vectors(&a, &b, &store, View::Wcb).unwrap();
        let ba = fuse_query_vectors(&b, &a, &store, View::Wcb).unwrap();
        assert_ne!(ab.vector, ba.vector);
    }

    #[test]
    fn soft_labels_mask_and_mismatch() {
        let mut tape = Tape::new();
        let q = tape.leaf(Matrix::from_rows(&[[1.0, 0.2], [0.1, 1.0], [0.5, 0.5]]).unwrap());
        let t = tape.leaf(Matrix::from_rows(&[[0.9, 0.1], [0.0, 1.0], [0.3, 0.8]]).unwrap());
        let out = soft_nce_loss(
            &mut tape,
            (q, t),
            None,
            &SoftLabelVector(vec![false; 3]),
            0.07,
        )
        .unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
        let g = tape.backward(out.loss).unwrap();
        assert!(g.wrt(q).data().iter().all(|&v| v == 0.0));
        let bad = soft_nce_loss(
            &mut tape,
            (q, t),
            None,
            &SoftLabelVector(vec![true; 2]),
            0.07,
        );
        assert!(bad.is_err());
    }
}
