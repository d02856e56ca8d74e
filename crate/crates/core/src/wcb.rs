//! Weight Compensation Block.
//!
//! Token rows are rescaled by their attention weight, passed through a
//! modality-specific two-layer MLP, max-pooled over the non-global rows and
//! added to the bundle's global token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init_mlp, mlp_forward, Matrix, ParamGroup, ParamStore, Tape, Var};
use crate::synth::{Modality, TokenBundle, TripletSample};

pub const TEXT_MLP: &str = "wcb_text";
pub const IMAGE_MLP: &str = "wcb_image";

/// Which bundle of a triplet an embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BundleRole {
    ModText,
    RefImage,
    TarImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompensatedEmbedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub role: BundleRole,
}

pub fn mlp_name(modality: Modality) -> &'static str {
    match modality {
        Modality::Text => TEXT_MLP,
        Modality::Image => IMAGE_MLP,
    }
}

/// Registers the text and image compensation MLPs (`d -> d -> d`).
pub fn init_wcb<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) {
    init_mlp(store, TEXT_MLP, dim, dim, dim, ParamGroup::Wcb, rng);
    init_mlp(store, IMAGE_MLP, dim, dim, dim, ParamGroup::Wcb, rng);
}

/// Row `i` of the result is `attention[i] * tokens[i]`.
pub fn weight_relocate(bundle: &TokenBundle) -> Matrix {
    let mut out = bundle.tokens.clone();
    for (r, &a) in bundle.attention.iter().enumerate() {
        for v in out.row_mut(r) {
            *v *= a;
        }
    }
    out
}

/// Records the relocation of `bundle` on `tape`; the token matrix is a leaf.
pub fn relocate_on_tape(tape: &mut Tape, bundle: &TokenBundle) -> Result<(Var, Var)> {
    let tokens = tape.leaf(bundle.tokens.clone());
    let weighted = tape.scale_rows(tokens, bundle.attention.clone())?;
    Ok((tokens, weighted))
}

/// `maxpool(MLP(weighted)[rows != exclude]) + global`, a `1 x d` row.
pub fn wcb_fuse(
    tape: &mut Tape,
    weighted: Var,
    global: Var,
    exclude: Option<usize>,
    store: &ParamStore,
    name: &str,
) -> Result<Var> {
    let (rows, width) = tape.value(weighted).shape();
    let g = tape.value(global).shape();
    if g != (1, width) {
        return Err(Error::shape(
            "wcb_fuse",
            format!("global token {g:?} for tokens of width {width}"),
        ));
    }
    let transformed = mlp_forward(tape, weighted, store, name)?;
    let out_width = tape.value(transformed).cols();
    if out_width != width {
        return Err(Error::shape(
            "wcb_fuse",
            format!("MLP `{name}` maps width {width} to {out_width}"),
        ));
    }
    let pooled_input = match exclude {
        Some(skip) => {
            let keep: Vec<usize> = (0..rows).filter(|&r| r != skip).collect();
            tape.select_rows(transformed, keep)?
        }
        None => transformed,
    };
    let pooled = tape.maxpool_rows(pooled_input)?;
    tape.add(pooled, global)
}

/// Compensated embedding of one bundle, recorded on `tape`.
pub fn compensate(tape: &mut Tape, bundle: &TokenBundle, store: &ParamStore) -> Result<Var> {
    let (tokens, weighted) = relocate_on_tape(tape, bundle)?;
    let global = tape.select_rows(tokens, vec![bundle.global_index])?;
    wcb_fuse(
        tape,
        weighted,
        global,
        Some(bundle.global_index),
        store,
        mlp_name(bundle.modality),
    )
}

/// `(text, reference, target)` compensated rows of a triplet.
pub fn compensate_triplet(
    tape: &mut Tape,
    sample: &TripletSample,
    store: &ParamStore,
) -> Result<[Var; 3]> {
    Ok([
        compensate(tape, &sample.mod_text, store)?,
        compensate(tape, &sample.ref_image, store)?,
        compensate(tape, &sample.tar_image, store)?,
    ])
}

/// Inference-only variant of [`compensate_triplet`].
pub fn compensate_all(
    sample: &TripletSample,
    store: &ParamStore,
) -> Result<[CompensatedEmbedding; 3]> {
    let mut tape = Tape::new();
    let vars = compensate_triplet(&mut tape, sample, store)?;
    let roles = [
        (BundleRole::ModText, Modality::Text),
        (BundleRole::RefImage, Modality::Image),
        (BundleRole::TarImage, Modality::Image),
    ];
    Ok(std::array::from_fn(|i| CompensatedEmbedding {
        vector: tape.value(vars[i]).data().to_vec(),
        modality: roles[i].1,
        role: roles[i].0,
    }))
}
