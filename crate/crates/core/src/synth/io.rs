use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Modality, TokenBundle, TripletSample, Truth};
use crate::container;
use crate::error::{FormatError, Result};
use crate::numerics::Matrix;

pub const DATASET_MAGIC: [u8; 4] = *b"NCLD";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub truth: Truth,
    pub ref_concept: usize,
    pub target_concept: usize,
    pub drawn_concept: usize,
}

/// JSON header of a dataset file. Payload offsets count `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: DatasetSpec,
    pub count: usize,
    pub dim: usize,
    pub text_tokens: usize,
    pub image_patches: usize,
    pub text_global_index: usize,
    pub image_global_index: usize,
    /// Values per sample: text tokens, text attention, reference tokens,
    /// reference attention, target tokens, target attention.
    pub sample_stride: usize,
    pub offsets: Vec<usize>,
    pub samples: Vec<SampleMeta>,
}

fn push_bundle(payload: &mut Vec<f64>, b: &TokenBundle) {
    payload.extend_from_slice(b.tokens.data());
    payload.extend_from_slice(&b.attention);
}

fn take_bundle(
    values: &[f64],
    pos: &mut usize,
    len: usize,
    dim: usize,
    global_index: usize,
    modality: Modality,
) -> Result<TokenBundle> {
    let tokens = Matrix::new(len, dim, values[*pos..*pos + len * dim].to_vec())?;
    *pos += len * dim;
    let attention = values[*pos..*pos + len].to_vec();
    *pos += len;
    TokenBundle::new(tokens, attention, global_index, modality)
        .map_err(|e| FormatError::Header(format!("invalid bundle: {e}")).into())
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let spec = &dataset.spec;
    let (lt, li, d) = (spec.text_len(), spec.image_len(), spec.dim);
    let stride = lt * (d + 1) + 2 * li * (d + 1);
    let mut payload = Vec::with_capacity(stride * dataset.samples.len());
    let mut offsets = Vec::with_capacity(dataset.samples.len());
    let mut metas = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        offsets.push(payload.len());
        push_bundle(&mut payload, &s.mod_text);
        push_bundle(&mut payload, &s.ref_image);
        push_bundle(&mut payload, &s.tar_image);
        metas.push(SampleMeta {
            truth: s.truth,
            ref_concept: s.ref_concept,
            target_concept: s.target_concept,
            drawn_concept: s.drawn_concept,
        });
    }
    let (text_global_index, image_global_index) =
        dataset.samples.first().map_or((lt - 1, 0), |s| {
            (s.mod_text.global_index, s.ref_image.global_index)
        });
    let header = DatasetHeader {
        spec: spec.clone(),
        count: dataset.samples.len(),
        dim: d,
        text_tokens: spec.text_tokens,
        image_patches: spec.image_patches,
        text_global_index,
        image_global_index,
        sample_stride: stride,
        offsets,
        samples: metas,
    };
    let bytes = container::encode(DATASET_MAGIC, &header, &payload)?;
    container::write_atomic(path, &bytes)
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    container::decode_header(&container::read_file(path)?, DATASET_MAGIC)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = container::read_file(path)?;
    let (header, payload): (DatasetHeader, Vec<f64>) = container::decode(&bytes, DATASET_MAGIC)?;
    let bad = |m: String| FormatError::Header(m);
    let spec = header.spec.clone();
    spec.validate().map_err(|e| bad(e.to_string()))?;
    let (lt, li, d) = (spec.text_len(), spec.image_len(), header.dim);
    if d != spec.dim
        || header.samples.len() != header.count
        || header.offsets.len() != header.count
        || header.sample_stride != lt * (d + 1) + 2 * li * (d + 1)
        || payload.len() != header.count * header.sample_stride
    {
        return Err(bad("header is inconsistent with payload".into()).into());
    }
    let mut samples = Vec::with_capacity(header.count);
    for (meta, &offset) in header.samples.iter().zip(&header.offsets) {
        if offset + header.sample_stride > payload.len() {
            return Err(bad(format!("offset {offset} out of range")).into());
        }
        let mut pos = offset;
        let mod_text = take_bundle(
            &payload,
            &mut pos,
            lt,
            d,
            header.text_global_index,
            Modality::Text,
        )?;
        let ref_image = take_bundle(
            &payload,
            &mut pos,
            li,
            d,
            header.image_global_index,
            Modality::Image,
        )?;
        let tar_image = take_bundle(
            &payload,
            &mut pos,
            li,
            d,
            header.image_global_index,
            Modality::Image,
        )?;
        samples.push(TripletSample {
            mod_text,
            ref_image,
            tar_image,
            truth: meta.truth,
            ref_concept: meta.ref_concept,
            target_concept: meta.target_concept,
            drawn_concept: meta.drawn_concept,
        });
    }
    Ok(Dataset { spec, samples })
}
