//! Condition encoders, projections, the cross-global control mechanism,
//! count regression, and default-token construction.

mod count;
mod cross_global;
mod defaults;
mod image;
mod prompt;

pub use count::{clamp_count, count_forward, init_f_count, predict_counts, train_count_loss};
pub use cross_global::{
    cross_global_attention, cross_global_probe, cross_global_score_mults, init_cross_global_site,
};
pub use defaults::{build_default_tokens, cfg_dropout, default_tokens_graph, drop_dense, init_defaults, D_COND};
pub use image::{init_image_projection, project_image};
pub use prompt::{encode_prompt, init_prompt_encoder, project_prompt, D_PROMPT};

use ndarray::Array2;

use crate::corpus::{DenseImageTokens, PromptTokens, Vocab};
use crate::error::Result;
use crate::nn::{Graph, ParamStore, Real, Var};
use crate::scene::DomainTag;

/// Which dense control stream conditions the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Prompt,
    Image,
}

/// Conditioning request: optional dense control signal plus the always-present
/// defaults (counts, domain).
#[derive(Debug, Clone)]
pub struct ConditionSpec {
    pub dense: Option<DenseInput>,
    pub n_o: usize,
    pub n_l: usize,
    pub domain: DomainTag,
}

#[derive(Debug, Clone)]
pub enum DenseInput {
    Prompt(PromptTokens),
    Image(DenseImageTokens),
}

impl DenseInput {
    pub fn modality(&self) -> Modality {
        match self {
            DenseInput::Prompt(_) => Modality::Prompt,
            DenseInput::Image(_) => Modality::Image,
        }
    }
}

/// Graph-level condition bundle: projected dense tokens (when present) and
/// the ingredients of the default-token vector.
pub struct ConditionVars {
    pub dense: Option<Var>,
    pub modality: Option<Modality>,
    pub n_o: usize,
    pub n_l: usize,
    pub domain: DomainTag,
}

/// Encode and project the dense control signal inside the graph.
pub fn build_condition<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    vocab: &Vocab,
    spec: &ConditionSpec,
) -> Result<ConditionVars> {
    let (dense, modality) = match &spec.dense {
        None => (None, None),
        Some(DenseInput::Prompt(tokens)) => {
            let e_p = encode_prompt(g, store, vocab, tokens)?;
            let f_p = project_prompt(g, store, e_p)?;
            (Some(f_p), Some(Modality::Prompt))
        }
        Some(DenseInput::Image(tokens)) => {
            let f_i = project_image(g, store, tokens)?;
            (Some(f_i), Some(Modality::Image))
        }
    };
    Ok(ConditionVars {
        dense,
        modality,
        n_o: spec.n_o,
        n_l: spec.n_l,
        domain: spec.domain,
    })
}

/// Plain-array dense tokens for inference-time caching (same projections,
/// evaluated outside any training graph).
pub fn dense_tokens_array<T: Real>(
    store: &ParamStore<T>,
    vocab: &Vocab,
    input: &DenseInput,
) -> Result<Array2<T>> {
    let mut g = Graph::<T>::new();
    let spec = ConditionSpec {
        dense: Some(input.clone()),
        n_o: 1,
        n_l: 1,
        domain: DomainTag::Metro,
    };
    let vars = build_condition(&mut g, store, vocab, &spec)?;
    let v = vars.dense.expect("dense input given");
    Ok(g.value(v)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}
