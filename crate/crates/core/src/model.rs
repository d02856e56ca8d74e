//! Parameters and forward pass of the full retrieval model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, FormatError, Result};
use crate::fusion::{fuse_query, init_fusion, View};
use crate::numerics::{l2_norm, Matrix, ParamGroup, ParamStore, Tape, Var};
use crate::synth::TripletSample;
use crate::wcb::{compensate_triplet, init_wcb};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"NCLW";

/// Tape handles of one batch's queries and targets.
#[derive(Clone, Copy, Debug)]
pub struct BatchForward {
    pub query: Var,
    pub target: Var,
    /// Compensated-view `(query, target)`.
    pub wcb: Option<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dim: usize,
    pub store: ParamStore,
}

impl Model {
    /// Registers every MLP (both compensation MLPs and both fusion MLPs)
    /// regardless of which ones a variant uses, so identical seeds yield
    /// identical initial weights across variants.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_wcb(&mut store, dim, &mut rng);
        init_fusion(&mut store, dim, &mut rng);
        Self { dim, store }
    }

    fn global_rows(tape: &mut Tape, samples: &[&TripletSample]) -> Result<[Var; 3]> {
        let stack = |pick: fn(&TripletSample) -> &[f64]| {
            Matrix::from_rows(&samples.iter().map(|s| pick(s)).collect::<Vec<_>>())
        };
        Ok([
            tape.leaf(stack(|s| s.mod_text.global_token())?),
            tape.leaf(stack(|s| s.ref_image.global_token())?),
            tape.leaf(stack(|s| s.tar_image.global_token())?),
        ])
    }

    /// Records queries and targets for a batch. Only bundles are read; the
    /// ground-truth fields of the samples are never touched.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        samples: &[&TripletSample],
        use_wcb: bool,
    ) -> Result<BatchForward> {
        Self::forward_with(&self.store, tape, samples, use_wcb)
    }

    /// [`Model::forward_batch`] over an arbitrary parameter store, for
    /// perturbation-based checks.
    pub fn forward_with(
        store: &ParamStore,
        tape: &mut Tape,
        samples: &[&TripletSample],
        use_wcb: bool,
    ) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let [text, reference, target] = Self::global_rows(tape, samples)?;
        let query = fuse_query(tape, text, reference, store, View::Global)?;
        let wcb = if use_wcb {
            let mut rows: [Vec<Var>; 3] = Default::default();
            for s in samples {
                let c = compensate_triplet(tape, s, store)?;
                for (r, v) in rows.iter_mut().zip(c) {
                    r.push(v);
                }
            }
            let t = tape.stack_rows(&rows[0])?;
            let r = tape.stack_rows(&rows[1])?;
            let tar = tape.stack_rows(&rows[2])?;
            let q = fuse_query(tape, t, r, store, View::Wcb)?;
            Some((q, tar))
        } else {
            None
        };
        Ok(BatchForward { query, target, wcb })
    }

    /// Retrieval embeddings `(queries, gallery)`, one row per sample.
    ///
    /// Each view is L2-normalized and the views are concatenated and scaled
    /// by `1/sqrt(views)`, so the cosine between a query and a gallery row is
    /// the mean of the per-view cosines.
    pub fn embed(&self, samples: &[TripletSample], use_wcb: bool) -> Result<(Matrix, Matrix)> {
        let mut queries = Vec::with_capacity(samples.len());
        let mut gallery = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let refs: Vec<&TripletSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let fwd = self.forward_batch(&mut tape, &refs, use_wcb)?;
            let mut views = vec![(fwd.query, fwd.target)];
            views.extend(fwd.wcb);
            let scale = 1.0 / (views.len() as f64).sqrt();
            for i in 0..refs.len() {
                let mut q = Vec::new();
                let mut g = Vec::new();
                for &(qv, tv) in &views {
                    q.extend(unit_row(tape.value(qv).row(i), scale)?);
                    g.extend(unit_row(tape.value(tv).row(i), scale)?);
                }
                queries.push(q);
                gallery.push(g);
            }
        }
        Ok((Matrix::from_rows(&queries)?, Matrix::from_rows(&gallery)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = WeightsHeader {
            dim: self.dim,
            params: self
                .store
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    group: p.group,
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
        };
        let payload: Vec<f64> = self
            .store
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        container::write_atomic(path, &container::encode(WEIGHTS_MAGIC, &header, &payload)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = container::read_file(path)?;
        let (header, payload): (WeightsHeader, Vec<f64>) =
            container::decode(&bytes, WEIGHTS_MAGIC)?;
        let mut store = ParamStore::new();
        let mut pos = 0;
        for e in header.params {
            let n = e.rows * e.cols;
            let values = payload.get(pos..pos + n).ok_or_else(|| {
                FormatError::Header(format!("payload too short for `{}`", e.name))
            })?;
            store.insert(
                e.name,
                e.group,
                Matrix::new(e.rows, e.cols, values.to_vec())?,
            );
            pos += n;
        }
        if pos != payload.len() {
            return Err(
                FormatError::Header("payload longer than declared parameters".into()).into(),
            );
        }
        Ok(Self {
            dim: header.dim,
            store,
        })
    }
}

fn unit_row(row: &[f64], scale: f64) -> Result<Vec<f64>> {
    let n = l2_norm(row);
    if n == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    Ok(row.iter().map(|v| v * scale / n).collect())
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    dim: usize,
    params: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;
    use crate::synth::{Dataset, DatasetSpec};

    #[test]
    fn init_is_deterministic_and_grouped() {
        let a = Model::init(8, 3);
        assert_eq!(a, Model::init(8, 3));
        assert_ne!(a, Model::init(8, 4));
        assert_eq!(a.store.len(), 16);
        assert_eq!(
            a.store
                .iter()
                .filter(|p| p.group == ParamGroup::Wcb)
                .count(),
            8
        );
    }

    #[test]
    fn embedding_cosine_is_mean_of_views() {
        let spec = DatasetSpec {
            count: 6,
            dim: 8,
            ..Default::default()
        };
        let ds = Dataset::generate(&spec).unwrap();
        let model = Model::init(8, 1);
        let (q, g) = model.embed(&ds.samples, true).unwrap();
        let refs: Vec<&TripletSample> = ds.samples.iter().collect();
        let mut tape = Tape::new();
        let f = model.forward_batch(&mut tape, &refs, true).unwrap();
        let (qw, tw) = f.wcb.unwrap();
        let c1 = cosine(tape.value(f.query).row(0), tape.value(f.target).row(2)).unwrap();
        let c2 = cosine(tape.value(qw).row(0), tape.value(tw).row(2)).unwrap();
        let c = cosine(q.row(0), g.row(2)).unwrap();
        assert!((c - 0.5 * (c1 + c2)).abs() < 1e-12);
    }
}
