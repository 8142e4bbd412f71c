//! Tokenization, input embeddings, value masking, structured attention and
//! the transformer encoder shared by student and teacher.
//!
//! Activations are kept 2-D: a batch of `b` cells with `w = l_max + 1`
//! slots is a `[b * w, d_model]` matrix whose row `r * w` is cell `r`'s cls
//! slot. There are no positional encodings; a cell is a set of genes.

mod forward;
mod params;
mod tokens;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use forward::{reborrow, EncoderOutput, Net, TrainRng};
pub use params::{EncoderParams, LayerIndex, MlpIndex, ParamIndex, ParamStore};
pub use tokens::{apply_value_mask, build_attention_mask, mask_count, tokenize, TokenBatch};

use crate::autodiff::AutodiffError;

pub const PAD_TOKEN: u32 = 0;
pub const CLS_TOKEN: u32 = 1;
/// Value fed to the value encoder at masked slots.
pub const MASK_VALUE: f64 = -1.0;
/// Perturbation token of genes that are not perturbed.
pub const NO_PERTURBATION: u32 = 0;
/// Perturbation token of perturbed genes.
pub const PERTURBED: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("unknown gene {0:?}")]
    UnknownGene(String),
    #[error("unknown perturbation token {id} (table has {n} entries)")]
    UnknownPerturbation { id: u32, n: usize },
    #[error("cell has {len} genes but l_max is {l_max}; subsample first")]
    TooLong { len: usize, l_max: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("parameter {name:?}: {msg}")]
    Param { name: String, msg: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of the feed-forward block inside each transformer layer.
    pub ff_hidden: usize,
    /// Hidden width of the scalar value encoder.
    pub value_hidden: usize,
    /// Hidden width of the GEPC gene-query MLP.
    pub gepc_hidden: usize,
    pub dropout: f64,
    pub n_bins: usize,
    pub l_max: usize,
    /// Standard deviation of the embedding-table initialization.
    pub init_scale: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ff_hidden: 64,
            value_hidden: 32,
            gepc_hidden: 32,
            dropout: 0.0,
            n_bins: 10,
            l_max: 64,
            init_scale: 0.5,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// The full-size configuration (512-wide, 12 layers, 8 heads).
    pub fn paper_scale() -> Self {
        Self {
            d_model: 512,
            n_layers: 12,
            n_heads: 8,
            ff_hidden: 512,
            value_hidden: 512,
            gepc_hidden: 512,
            dropout: 0.2,
            n_bins: 51,
            l_max: 600,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn width(&self) -> usize {
        self.l_max + 1
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("d_model, n_heads and n_layers must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if self.ff_hidden == 0 || self.value_hidden == 0 || self.gepc_hidden == 0 {
            return fail("hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.n_bins == 0 || self.l_max == 0 {
            return fail("n_bins and l_max must be positive");
        }
        if !(self.init_scale > 0.0 && self.layer_norm_eps > 0.0) {
            return fail("init_scale and layer_norm_eps must be positive");
        }
        Ok(())
    }
}

/// Gene vocabulary with reserved `<pad>` and `<cls>` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    genes: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    const RESERVED: u32 = 2;

    pub fn new(genes: &[String]) -> Self {
        let index = genes
            .iter()
            .enumerate()
            .map(|(i, g)| (g.clone(), i as u32 + Self::RESERVED))
            .collect();
        Self {
            genes: genes.to_vec(),
            index,
        }
    }

    /// Number of token ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.genes.len() + Self::RESERVED as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn token(&self, gene: &str) -> Result<u32, EncoderError> {
        self.index
            .get(gene)
            .copied()
            .ok_or_else(|| EncoderError::UnknownGene(gene.to_string()))
    }

    /// Token id for every name, in order.
    pub fn resolve(&self, genes: &[String]) -> Result<Vec<u32>, EncoderError> {
        genes.iter().map(|g| self.token(g)).collect()
    }
}

#[cfg(test)]
mod tests;
