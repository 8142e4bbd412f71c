use rand::Rng;

use super::{EncoderError, CLS_TOKEN, MASK_VALUE, PAD_TOKEN};
use crate::autodiff::{Tensor, MASKED_LOGIT};
use crate::corpus::BinnedCell;
use crate::scalar::Scalar;

/// Padded token grid for a batch of cells.
///
/// Slot 0 of every row is `<cls>`; real genes follow; `<pad>` fills the
/// tail. Values are 0 at cls and pad slots and [`MASK_VALUE`] at masked
/// slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    width: usize,
    pub gene_ids: Vec<u32>,
    pub values: Vec<f64>,
    /// Sorted masked slot positions per row.
    pub mask_sets: Vec<Vec<usize>>,
    pub pad_flags: Vec<bool>,
}

impl TokenBatch {
    /// Single-row batch from aligned token ids and values.
    pub fn from_tokens(tokens: &[u32], values: &[f64], l_max: usize) -> Result<Self, EncoderError> {
        if tokens.len() > l_max {
            return Err(EncoderError::TooLong {
                len: tokens.len(),
                l_max,
            });
        }
        assert_eq!(tokens.len(), values.len(), "tokens and values must align");
        let width = l_max + 1;
        let mut gene_ids = vec![PAD_TOKEN; width];
        let mut vals = vec![0.0; width];
        let mut pad_flags = vec![true; width];
        gene_ids[0] = CLS_TOKEN;
        pad_flags[0] = false;
        for (k, (&t, &v)) in tokens.iter().zip(values).enumerate() {
            gene_ids[k + 1] = t;
            vals[k + 1] = v;
            pad_flags[k + 1] = false;
        }
        Ok(Self {
            width,
            gene_ids,
            values: vals,
            mask_sets: vec![Vec::new()],
            pad_flags,
        })
    }

    /// Stack single- or multi-row batches of equal width.
    pub fn stack(parts: &[TokenBatch]) -> Self {
        let width = parts.first().map_or(1, |p| p.width);
        let mut out = Self {
            width,
            gene_ids: Vec::new(),
            values: Vec::new(),
            mask_sets: Vec::new(),
            pad_flags: Vec::new(),
        };
        for p in parts {
            assert_eq!(p.width, width, "batch widths differ");
            out.gene_ids.extend_from_slice(&p.gene_ids);
            out.values.extend_from_slice(&p.values);
            out.mask_sets.extend(p.mask_sets.iter().cloned());
            out.pad_flags.extend_from_slice(&p.pad_flags);
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_rows(&self) -> usize {
        self.mask_sets.len()
    }

    /// Total slot count, `n_rows * width`.
    pub fn n_slots(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn row_pads(&self, r: usize) -> &[bool] {
        &self.pad_flags[r * self.width..(r + 1) * self.width]
    }

    /// Number of real gene slots in row `r`.
    pub fn n_genes(&self, r: usize) -> usize {
        self.row_pads(r).iter().skip(1).filter(|p| !**p).count()
    }

    /// Whether flat slot `s` holds a real gene (not cls, not pad).
    pub fn is_gene_slot(&self, s: usize) -> bool {
        !s.is_multiple_of(self.width) && !self.pad_flags[s]
    }

    /// Flat indices of all real gene slots.
    pub fn gene_slots(&self) -> Vec<usize> {
        (0..self.n_slots()).filter(|&s| self.is_gene_slot(s)).collect()
    }

    /// Flat indices of all masked slots.
    pub fn masked_slots(&self) -> Vec<usize> {
        self.mask_sets
            .iter()
            .enumerate()
            .flat_map(|(r, m)| m.iter().map(move |&i| r * self.width + i))
            .collect()
    }

    /// Additive logit masks, one `[width, width]` tensor per row.
    pub fn attention_masks<T: Scalar>(&self) -> Vec<Tensor<T>> {
        (0..self.n_rows())
            .map(|r| build_attention_mask(&self.mask_sets[r], self.row_pads(r)))
            .collect()
    }
}

/// Lay out a binned cell as `[cls, genes.., pad..]`.
///
/// `token_of` maps corpus gene indices to vocabulary token ids (see
/// [`super::Vocab::resolve`]).
pub fn tokenize(cell: &BinnedCell, token_of: &[u32], l_max: usize) -> Result<TokenBatch, EncoderError> {
    let tokens: Vec<u32> = cell.genes.iter().map(|&g| token_of[g as usize]).collect();
    let values: Vec<f64> = cell.bins.iter().map(|&b| f64::from(b)).collect();
    TokenBatch::from_tokens(&tokens, &values, l_max)
}

/// Masked genes for a row of `n_genes` at `ratio`: `ceil(ratio * n_genes)`.
pub fn mask_count(ratio: f64, n_genes: usize) -> usize {
    // the tolerance absorbs representation error such as 0.15 * 20 = 3.0000000000000004
    let raw = ratio * n_genes as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n_genes)
}

/// Replace the values of a uniformly chosen subset of gene slots in each row
/// with [`MASK_VALUE`].
pub fn apply_value_mask<R: Rng + ?Sized>(batch: &TokenBatch, ratio: f64, rng: &mut R) -> TokenBatch {
    let mut out = batch.clone();
    let w = batch.width;
    for r in 0..batch.n_rows() {
        let slots: Vec<usize> = (1..w).filter(|&i| !batch.pad_flags[r * w + i]).collect();
        let k = mask_count(ratio, slots.len());
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, slots.len(), k)
            .into_iter()
            .map(|j| slots[j])
            .collect();
        chosen.sort_unstable();
        for &i in &chosen {
            out.values[r * w + i] = MASK_VALUE;
        }
        out.mask_sets[r] = chosen;
    }
    out
}

/// Additive attention mask for one row.
///
/// Entry `(i, j)` is 0 when column `j` is an unmasked real slot, or when
/// `i == j` and `j` is masked; every other entry, including every pad
/// column, is [`MASKED_LOGIT`].
pub fn build_attention_mask<T: Scalar>(mask_set: &[usize], pad_flags: &[bool]) -> Tensor<T> {
    let w = pad_flags.len();
    let mut masked = vec![false; w];
    for &i in mask_set {
        masked[i] = true;
    }
    let blocked = T::of(MASKED_LOGIT);
    let mut data = vec![blocked; w * w];
    for i in 0..w {
        for j in 0..w {
            let open = (!masked[j] && !pad_flags[j]) || (i == j && masked[j]);
            if open {
                data[i * w + j] = T::zero();
            }
        }
    }
    Tensor::new(vec![w, w], data).expect("square mask")
}
