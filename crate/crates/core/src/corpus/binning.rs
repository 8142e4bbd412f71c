use rand::Rng;

use super::{CorpusError, SparseCell};

/// A cell after per-cell quantile binning: gene indices with bin ids in
/// `1..=n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCell {
    pub genes: Vec<u32>,
    pub bins: Vec<u32>,
    pub n_bins: u32,
}

impl BinnedCell {
    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    /// Uniformly keep `l_max` genes (with their bins) when the cell is
    /// longer than that; order is preserved.
    pub fn subsample<R: Rng + ?Sized>(&self, l_max: usize, rng: &mut R) -> Self {
        match sample_positions(self.len(), l_max, rng) {
            None => self.clone(),
            Some(keep) => Self {
                genes: keep.iter().map(|&i| self.genes[i]).collect(),
                bins: keep.iter().map(|&i| self.bins[i]).collect(),
                n_bins: self.n_bins,
            },
        }
    }
}

/// Quantile-bin one cell's non-zero values into `1..=n_bins`.
///
/// Edges are the `n_bins - 1` interior quantiles at probabilities `k/n_bins`,
/// linearly interpolated between sorted values; a value equal to an edge
/// falls in the lower bin and the cell maximum always lands in the top bin.
/// For values drawn from the cell itself, `v > edge_k` holds exactly when
/// `v > sorted[floor((n-1)k/n_bins)]`, so the edges are resolved by rank
/// with integer arithmetic and the result depends only on value order.
pub fn bin_values(values: &[f64], n_bins: usize) -> Result<Vec<u32>, CorpusError> {
    if n_bins == 0 {
        return Err(CorpusError::ZeroBins);
    }
    if values.is_empty() {
        return Err(CorpusError::EmptyCell);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let max = sorted[n - 1];
    let lower: Vec<f64> = (1..n_bins).map(|k| sorted[(n - 1) * k / n_bins]).collect();
    Ok(values
        .iter()
        .map(|&v| {
            if v == max {
                n_bins as u32
            } else {
                1 + lower.partition_point(|&edge| edge < v) as u32
            }
        })
        .collect())
}

pub fn bin_cell(cell: &SparseCell, n_bins: usize) -> Result<BinnedCell, CorpusError> {
    Ok(BinnedCell {
        genes: cell.genes.clone(),
        bins: bin_values(&cell.values, n_bins)?,
        n_bins: n_bins as u32,
    })
}

/// Cap a cell at `l_max` expressed genes by uniform sampling without
/// replacement; cells at or below the cap are returned unchanged.
pub fn subsample_genes<R: Rng + ?Sized>(cell: &SparseCell, l_max: usize, rng: &mut R) -> SparseCell {
    match sample_positions(cell.len(), l_max, rng) {
        None => cell.clone(),
        Some(keep) => SparseCell {
            genes: keep.iter().map(|&i| cell.genes[i]).collect(),
            values: keep.iter().map(|&i| cell.values[i]).collect(),
        },
    }
}

fn sample_positions<R: Rng + ?Sized>(n: usize, l_max: usize, rng: &mut R) -> Option<Vec<usize>> {
    if n <= l_max {
        return None;
    }
    let mut keep = rand::seq::index::sample(rng, n, l_max).into_vec();
    keep.sort_unstable();
    Some(keep)
}
