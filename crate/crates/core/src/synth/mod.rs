//! Synthetic stand-in for a frozen vision-language encoder.
//!
//! Produces token bundles shaped like real encoder output: text sequences of
//! `n + 2` rows (start, `n` words, end-of-text global row) and image sequences
//! of `m + 1` rows (class-token global row, `m` patches), each with a
//! per-token attention map. Samples are planted over a table of concept
//! anchors so that ground truth about corrupted pairs is known.

mod io;

pub use io::{read_dataset, read_header, write_dataset, DatasetHeader, SampleMeta, DATASET_MAGIC};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, l2_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Token embeddings of one encoded input plus its attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBundle {
    pub tokens: Matrix,
    pub attention: Vec<f64>,
    pub global_index: usize,
    pub modality: Modality,
}

impl TokenBundle {
    pub fn new(
        tokens: Matrix,
        attention: Vec<f64>,
        global_index: usize,
        modality: Modality,
    ) -> Result<Self> {
        let b = Self {
            tokens,
            attention,
            global_index,
            modality,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn global_token(&self) -> &[f64] {
        self.tokens.row(self.global_index)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.tokens.rows();
        if self.attention.len() != l {
            return Err(Error::shape(
                "TokenBundle",
                format!("{} attention weights for {l} tokens", self.attention.len()),
            ));
        }
        if self.global_index >= l {
            return Err(Error::shape(
                "TokenBundle",
                format!("global index {} out of {l} tokens", self.global_index),
            ));
        }
        if self.attention.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Degenerate("negative or NaN attention weight".into()));
        }
        let total: f64 = self.attention.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate(format!("attention sums to {total}")));
        }
        Ok(())
    }
}

/// Ground-truth correspondence of a generated triplet. Never consumed by the
/// training path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Clean,
    Mismatched,
    Partial,
}

impl Truth {
    pub fn is_noisy(self) -> bool {
        !matches!(self, Truth::Clean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub mod_text: TokenBundle,
    pub ref_image: TokenBundle,
    pub tar_image: TokenBundle,
    pub truth: Truth,
    pub ref_concept: usize,
    /// Concept the modification text asks for.
    pub target_concept: usize,
    /// Concept blended into (partial) or substituted for (mismatched) the
    /// target image; equals `target_concept` for clean samples.
    pub drawn_concept: usize,
}

/// Benchmark knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_concepts: usize,
    pub dim: usize,
    pub text_tokens: usize,
    pub image_patches: usize,
    pub count: usize,
    pub mismatch_rate: f64,
    pub partial_rate: f64,
    pub distractor_fraction: f64,
    pub noise_scale: f64,
    /// Norm scale of the per-sample appearance vector shared by reference
    /// and target image.
    pub instance_scale: f64,
    /// Trailing fraction of samples kept clean for retrieval evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_concepts: 16,
            dim: 32,
            text_tokens: 8,
            image_patches: 16,
            count: 2000,
            mismatch_rate: 0.3,
            partial_rate: 0.0,
            distractor_fraction: 0.25,
            noise_scale: 0.05,
            instance_scale: 0.5,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_concepts < 1 || self.text_tokens < 1 || self.image_patches < 1 || self.count < 1
        {
            return bad("num_concepts, text_tokens, image_patches and count must be >= 1".into());
        }
        if self.dim < 4 {
            return bad(format!("dim must be >= 4, got {}", self.dim));
        }
        for (name, v) in [
            ("mismatch_rate", self.mismatch_rate),
            ("partial_rate", self.partial_rate),
            ("holdout_fraction", self.holdout_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.mismatch_rate + self.partial_rate > 1.0 + 1e-12 {
            return bad("mismatch_rate + partial_rate must not exceed 1".into());
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return bad(format!(
                "distractor_fraction must lie in [0, 1), got {}",
                self.distractor_fraction
            ));
        }
        if self.distractors(self.text_tokens) >= self.text_tokens
            || self.distractors(self.image_patches) >= self.image_patches
        {
            return bad("distractor_fraction leaves no informative tokens".into());
        }
        if !(self.noise_scale >= 0.0) || !(self.instance_scale >= 0.0) {
            return bad("noise_scale and instance_scale must be >= 0".into());
        }
        if self.holdout_fraction >= 1.0 {
            return bad("holdout_fraction must leave training samples".into());
        }
        Ok(())
    }

    fn distractors(&self, tokens: usize) -> usize {
        (self.distractor_fraction * tokens as f64).ceil() as usize
    }

    pub fn text_len(&self) -> usize {
        self.text_tokens + 2
    }

    pub fn image_len(&self) -> usize {
        self.image_patches + 1
    }

    /// Number of leading samples eligible for corruption.
    pub fn train_count(&self) -> usize {
        self.count - (self.holdout_fraction * self.count as f64).round() as usize
    }
}

/// Unit-norm concept anchors plus the shared start-of-text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTable {
    pub anchors: Vec<Vec<f64>>,
    pub start_token: Vec<f64>,
}

/// Largest pairwise cosine above which concepts are considered crowded.
pub const CROWDED_COSINE: f64 = 0.95;

impl ConceptTable {
    pub fn max_pairwise_cosine(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.anchors.len() {
            for j in i + 1..self.anchors.len() {
                let c = cosine(&self.anchors[i], &self.anchors[j]).unwrap_or(1.0);
                worst = worst.max(c);
            }
        }
        worst
    }

    pub fn is_crowded(&self) -> bool {
        self.anchors.len() > 1 && self.max_pairwise_cosine() > CROWDED_COSINE
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws `C` unit anchors from stream 0 of the spec seed.
pub fn make_concepts(spec: &DatasetSpec) -> Result<ConceptTable> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let anchors = (0..spec.num_concepts)
        .map(|_| unit(&mut rng, spec.dim))
        .collect();
    let start_token = unit(&mut rng, spec.dim);
    Ok(ConceptTable {
        anchors,
        start_token,
    })
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn other_concept(rng: &mut ChaCha8Rng, c: usize, exclude: usize) -> usize {
    let k = rng.random_range(0..c - 1);
    if k >= exclude {
        k + 1
    } else {
        k
    }
}

/// Attention map over `len` tokens: distractors get at most `1 / (10 len)`,
/// the remaining mass is spread over the other tokens by `raw` weight.
fn attention_map(rng: &mut ChaCha8Rng, raw: &[f64], distractor: &[bool]) -> Vec<f64> {
    let len = raw.len() as f64;
    let mut att = vec![0.0; raw.len()];
    let mut used = 0.0;
    for (a, _) in att.iter_mut().zip(distractor).filter(|(_, &d)| d) {
        *a = rng.random_range(0.1..1.0) / (10.0 * len);
        used += *a;
    }
    let live: f64 = raw
        .iter()
        .zip(distractor)
        .filter(|(_, &d)| !d)
        .map(|(r, _)| r)
        .sum();
    for ((a, r), _) in att.iter_mut().zip(raw).zip(distractor).filter(|(_, &d)| !d) {
        *a = (1.0 - used) * r / live;
    }
    att
}

/// Builds a sequence of `body` informative/distractor rows around `center`,
/// with an extra leading or trailing global row holding the informative mean.
struct SequencePlan<'a> {
    center: &'a [f64],
    body: usize,
    distractors: usize,
    /// Extra non-global row placed first (text start token).
    lead: Option<&'a [f64]>,
    global_first: bool,
}

fn build_sequence(
    rng: &mut ChaCha8Rng,
    spec: &DatasetSpec,
    plan: SequencePlan<'_>,
) -> (Matrix, Vec<f64>, usize) {
    let d = spec.dim;
    let sigma = spec.noise_scale;
    let noisy_pos: Vec<usize> = sample_indices(rng, plan.body, plan.distractors).into_vec();
    let mut is_distractor = vec![false; plan.body];
    for p in noisy_pos {
        is_distractor[p] = true;
    }
    let mut body_rows = Vec::with_capacity(plan.body);
    let mut mean = vec![0.0; d];
    let informative = (plan.body - plan.distractors) as f64;
    for &dist in &is_distractor {
        let row = if dist {
            gaussian(rng, d, 1.0 / (d as f64).sqrt())
        } else {
            let r = add(plan.center, &gaussian(rng, d, sigma));
            for (m, v) in mean.iter_mut().zip(&r) {
                *m += v / informative;
            }
            r
        };
        body_rows.push(row);
    }
    let global = add(&mean, &gaussian(rng, d, sigma));

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw = Vec::new();
    let mut distractor = Vec::new();
    let mut push = |row: Vec<f64>, w: f64, dist: bool| {
        rows.push(row);
        raw.push(w);
        distractor.push(dist);
    };
    if plan.global_first {
        push(global.clone(), 1.0, false);
    }
    if let Some(lead) = plan.lead {
        let w = 0.5;
        push(add(lead, &gaussian(rng, d, sigma)), w, false);
    }
    for (row, dist) in body_rows.into_iter().zip(is_distractor) {
        let w = rng.random_range(0.5..1.5);
        push(row, w, dist);
    }
    if !plan.global_first {
        push(global, 1.0, false);
    }
    let att = attention_map(rng, &raw, &distractor);
    let global_index = if plan.global_first { 0 } else { rows.len() - 1 };
    let tokens = Matrix::from_rows(&rows).expect("rows share dim");
    (tokens, att, global_index)
}

fn image_bundle(rng: &mut ChaCha8Rng, spec: &DatasetSpec, center: &[f64]) -> TokenBundle {
    let (tokens, attention, global_index) = build_sequence(
        rng,
        spec,
        SequencePlan {
            center,
            body: spec.image_patches,
            distractors: spec.distractors(spec.image_patches),
            lead: None,
            global_first: true,
        },
    );
    TokenBundle {
        tokens,
        attention,
        global_index,
        modality: Modality::Image,
    }
}

fn text_bundle(
    rng: &mut ChaCha8Rng,
    spec: &DatasetSpec,
    concepts: &ConceptTable,
    edit: &[f64],
) -> TokenBundle {
    let (tokens, attention, global_index) = build_sequence(
        rng,
        spec,
        SequencePlan {
            center: edit,
            body: spec.text_tokens,
            distractors: spec.distractors(spec.text_tokens),
            lead: Some(&concepts.start_token),
            global_first: false,
        },
    );
    TokenBundle {
        tokens,
        attention,
        global_index,
        modality: Modality::Text,
    }
}

/// Generates triplet `index`. Pure in `(concepts, spec, index)`: each index
/// draws from its own ChaCha8 stream of the spec seed.
pub fn synth_triplet(
    concepts: &ConceptTable,
    spec: &DatasetSpec,
    index: usize,
) -> Result<TripletSample> {
    if index >= spec.count {
        return Err(Error::Config(format!(
            "index {index} >= count {}",
            spec.count
        )));
    }
    let c = concepts.anchors.len();
    if c < 2 {
        return Err(Error::Config("triplets need at least two concepts".into()));
    }
    let mut rng = stream_rng(spec.seed, index as u64 + 1);
    let d = spec.dim;
    let instance_std = spec.instance_scale / (d as f64).sqrt();

    let r = rng.random_range(0..c);
    let t = other_concept(&mut rng, c, r);
    let appearance = gaussian(&mut rng, d, instance_std);
    let anchor = |k: usize| concepts.anchors[k].as_slice();

    let edit: Vec<f64> = anchor(t)
        .iter()
        .zip(anchor(r))
        .map(|(a, b)| a - b)
        .collect();
    let mod_text = text_bundle(&mut rng, spec, concepts, &edit);
    let ref_image = image_bundle(&mut rng, spec, &add(anchor(r), &appearance));

    let u: f64 = rng.random();
    let corruptible = index < spec.train_count();
    let (truth, drawn, tar_center) = if corruptible && u < spec.mismatch_rate {
        let k = other_concept(&mut rng, c, t);
        let fresh = gaussian(&mut rng, d, instance_std);
        (Truth::Mismatched, k, add(anchor(k), &fresh))
    } else if corruptible && u < spec.mismatch_rate + spec.partial_rate {
        let k = other_concept(&mut rng, c, t);
        let blend: Vec<f64> = anchor(t)
            .iter()
            .zip(anchor(k))
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        (Truth::Partial, k, add(&blend, &appearance))
    } else {
        (Truth::Clean, t, add(anchor(t), &appearance))
    };
    let tar_image = image_bundle(&mut rng, spec, &tar_center);

    Ok(TripletSample {
        mod_text,
        ref_image,
        tar_image,
        truth,
        ref_concept: r,
        target_concept: t,
        drawn_concept: drawn,
    })
}

/// A generated benchmark: the leading [`DatasetSpec::train_count`] samples
/// form the (possibly corrupted) training split, the rest the clean holdout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<TripletSample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let concepts = make_concepts(spec)?;
        let samples = (0..spec.count)
            .map(|i| synth_triplet(&concepts, spec, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            samples,
        })
    }

    pub fn train(&self) -> &[TripletSample] {
        &self.samples[..self.spec.train_count().min(self.samples.len())]
    }

    pub fn holdout(&self) -> &[TripletSample] {
        &self.samples[self.spec.train_count().min(self.samples.len())..]
    }

    /// Counts of (clean, mismatched, partial) over `samples`.
    pub fn histogram(samples: &[TripletSample]) -> [usize; 3] {
        let mut h = [0; 3];
        for s in samples {
            h[match s.truth {
                Truth::Clean => 0,
                Truth::Mismatched => 1,
                Truth::Partial => 2,
            }] += 1;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            count: 50,
            mismatch_rate: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_concept_is_unit() {
        let spec = DatasetSpec {
            num_concepts: 1,
            ..Default::default()
        };
        let t = make_concepts(&spec).unwrap();
        assert_eq!(t.anchors.len(), 1);
        assert!((l2_norm(&t.anchors[0]) - 1.0).abs() < 1e-12);
        assert!(!t.is_crowded());
    }

    #[test]
    fn concepts_deterministic_and_spread() {
        let spec = DatasetSpec::default();
        let a = make_concepts(&spec).unwrap();
        let b = make_concepts(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.max_pairwise_cosine() < 0.95);
    }

    #[test]
    fn bundle_shapes_and_attention() {
        let spec = small();
        let ds = Dataset::generate(&spec).unwrap();
        for s in &ds.samples {
            assert_eq!(s.mod_text.len(), spec.text_tokens + 2);
            assert_eq!(s.mod_text.global_index, spec.text_tokens + 1);
            assert_eq!(s.ref_image.len(), spec.image_patches + 1);
            assert_eq!(s.tar_image.global_index, 0);
            for b in [&s.mod_text, &s.ref_image, &s.tar_image] {
                b.validate().unwrap();
                assert_eq!(b.dim(), spec.dim);
            }
            assert_ne!(s.ref_concept, s.target_concept);
        }
    }

    #[test]
    fn distractor_attention_is_small() {
        let spec = small();
        let concepts = make_concepts(&spec).unwrap();
        let s = synth_triplet(&concepts, &spec, 3).unwrap();
        let l = s.ref_image.len() as f64;
        let small = s
            .ref_image
            .attention
            .iter()
            .filter(|&&a| a <= 1.0 / (10.0 * l))
            .count();
        assert_eq!(
            small,
            (spec.distractor_fraction * spec.image_patches as f64).ceil() as usize
        );
    }

    #[test]
    fn zero_rates_all_clean() {
        let ds = Dataset::generate(&small()).unwrap();
        assert!(ds.samples.iter().all(|s| s.truth == Truth::Clean));
    }

    #[test]
    fn full_mismatch_rate() {
        let spec = DatasetSpec {
            count: 100,
            mismatch_rate: 1.0,
            ..Default::default()
        };
        let ds = Dataset::generate(&spec).unwrap();
        for s in ds.train() {
            assert_eq!(s.truth, Truth::Mismatched);
            assert_ne!(s.drawn_concept, s.target_concept);
        }
        assert!(ds.holdout().iter().all(|s| s.truth == Truth::Clean));
        assert_eq!(ds.train().len(), 80);
    }

    #[test]
    fn index_out_of_range() {
        let spec = small();
        let c = make_concepts(&spec).unwrap();
        assert!(synth_triplet(&c, &spec, spec.count).is_err());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let cases = [
            DatasetSpec {
                dim: 3,
                ..Default::default()
            },
            DatasetSpec {
                mismatch_rate: 0.7,
                partial_rate: 0.4,
                ..Default::default()
            },
            DatasetSpec {
                count: 0,
                ..Default::default()
            },
            DatasetSpec {
                distractor_fraction: 0.95,
                ..Default::default()
            },
        ];
        for spec in cases {
            assert!(matches!(spec.validate(), Err(Error::Config(_))), "{spec:?}");
        }
    }
}
