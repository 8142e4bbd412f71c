//! Sparse single-cell expression corpora: validation, the matrix directory
//! format, per-cell quantile binning, gene subsampling and the synthetic
//! generator.

mod binning;
mod io;
mod synth;

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

pub use binning::{bin_cell, bin_values, subsample_genes, BinnedCell};
pub use io::{load_matrix, save_matrix, CELLS_FILE, GENES_FILE, MATRIX_FILE};
pub use synth::{synthesize_corpus, synthesize_with_truth, SynthSpec, SynthTruth};

/// Perturbation label carried by control cells.
pub const CONTROL_LABEL: &str = "ctrl";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("binning needs at least one value")]
    EmptyCell,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// One cell as aligned lists of gene indices and strictly positive values,
/// ordered by gene index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCell {
    pub genes: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseCell {
    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    /// Dense copy over `n_genes` (absent genes are zero).
    pub fn to_dense(&self, n_genes: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_genes];
        for (&g, &v) in self.genes.iter().zip(&self.values) {
            out[g as usize] = v;
        }
        out
    }
}

/// Validated sparse cell-by-gene matrix with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMatrix {
    n_genes: usize,
    cells: Vec<SparseCell>,
    gene_names: Vec<String>,
    cell_ids: Vec<String>,
    cell_types: Option<Vec<String>>,
    perturbations: Option<Vec<String>>,
}

impl CellMatrix {
    /// Build from per-cell triplets, dropping zero values and rejecting
    /// out-of-range, duplicate, negative or non-finite entries.
    pub fn from_triplets(
        n_cells: usize,
        gene_names: Vec<String>,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, CorpusError> {
        let n_genes = gene_names.len();
        let mut cells = vec![SparseCell::default(); n_cells];
        let mut seen = HashSet::new();
        for (c, g, v) in entries {
            if c >= n_cells || g >= n_genes {
                return Err(CorpusError::Invalid(format!(
                    "entry ({c}, {g}) outside {n_cells} x {n_genes}"
                )));
            }
            if !seen.insert((c, g)) {
                return Err(CorpusError::Invalid(format!("duplicate entry ({c}, {g})")));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(CorpusError::Invalid(format!("entry ({c}, {g}) has value {v}")));
            }
            if v == 0.0 {
                continue;
            }
            cells[c].genes.push(g as u32);
            cells[c].values.push(v);
        }
        for cell in &mut cells {
            sort_cell(cell);
        }
        let cell_ids = (0..n_cells).map(|i| format!("cell{i:05}")).collect();
        Self::new(cells, gene_names, cell_ids, None, None)
    }

    pub fn new(
        cells: Vec<SparseCell>,
        gene_names: Vec<String>,
        cell_ids: Vec<String>,
        cell_types: Option<Vec<String>>,
        perturbations: Option<Vec<String>>,
    ) -> Result<Self, CorpusError> {
        let n_genes = gene_names.len();
        if cell_ids.len() != cells.len() {
            return Err(CorpusError::Invalid(format!(
                "{} cell ids for {} cells",
                cell_ids.len(),
                cells.len()
            )));
        }
        for (name, col) in [("cell_type", &cell_types), ("perturbation", &perturbations)] {
            if let Some(col) = col {
                if col.len() != cells.len() {
                    return Err(CorpusError::Invalid(format!(
                        "{} {name} labels for {} cells",
                        col.len(),
                        cells.len()
                    )));
                }
            }
        }
        let unique: HashSet<&String> = gene_names.iter().collect();
        if unique.len() != gene_names.len() {
            return Err(CorpusError::Invalid("duplicate gene names".into()));
        }
        for (i, cell) in cells.iter().enumerate() {
            if cell.genes.len() != cell.values.len() {
                return Err(CorpusError::Invalid(format!("cell {i}: misaligned lists")));
            }
            for w in cell.genes.windows(2) {
                if w[0] >= w[1] {
                    return Err(CorpusError::Invalid(format!(
                        "cell {i}: genes not strictly increasing (duplicate or unsorted)"
                    )));
                }
            }
            if cell.genes.last().is_some_and(|&g| g as usize >= n_genes) {
                return Err(CorpusError::Invalid(format!("cell {i}: gene index out of range")));
            }
            if let Some(v) = cell.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(CorpusError::Invalid(format!(
                    "cell {i}: stored value {v} is not strictly positive"
                )));
            }
        }
        if let Some(p) = &perturbations {
            if !p.iter().any(|l| l == CONTROL_LABEL) {
                return Err(CorpusError::Invalid(
                    "perturbation labels present but no control cells".into(),
                ));
            }
        }
        Ok(Self {
            n_genes,
            cells,
            gene_names,
            cell_ids,
            cell_types,
            perturbations,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn n_entries(&self) -> usize {
        self.cells.iter().map(SparseCell::len).sum()
    }

    pub fn cells(&self) -> &[SparseCell] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &SparseCell {
        &self.cells[i]
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn cell_types(&self) -> Option<&[String]> {
        self.cell_types.as_deref()
    }

    pub fn perturbations(&self) -> Option<&[String]> {
        self.perturbations.as_deref()
    }

    /// `(cell, gene, value)` triplets in cell-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.cells.iter().enumerate().flat_map(|(c, cell)| {
            cell.genes
                .iter()
                .zip(&cell.values)
                .map(move |(&g, &v)| (c, g as usize, v))
        })
    }

    /// Per-cell control flags, when perturbation labels are present.
    pub fn control_flags(&self) -> Option<Vec<bool>> {
        self.perturbations
            .as_ref()
            .map(|p| p.iter().map(|l| l == CONTROL_LABEL).collect())
    }

    /// Cell-type category ids (sorted label order) and the label names.
    pub fn cell_type_ids(&self) -> Option<(Vec<usize>, Vec<String>)> {
        self.cell_types.as_deref().map(categorize)
    }

    /// Distinct non-control perturbation labels in sorted order.
    pub fn perturbation_names(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .perturbations
            .iter()
            .flatten()
            .filter(|l| *l != CONTROL_LABEL)
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn gene_index(&self, name: &str) -> Option<usize> {
        self.gene_names.iter().position(|g| g == name)
    }

    /// Gene indices targeted by a `+`-joined perturbation label.
    pub fn perturbation_targets(&self, label: &str) -> Result<Vec<usize>, CorpusError> {
        label
            .split('+')
            .map(|g| {
                self.gene_index(g).ok_or_else(|| {
                    CorpusError::Invalid(format!("perturbation target {g:?} is not a known gene"))
                })
            })
            .collect()
    }

    /// Copy of the selected cells, preserving order and annotations.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick = |col: &Option<Vec<String>>| {
            col.as_ref()
                .map(|c| rows.iter().map(|&i| c[i].clone()).collect::<Vec<_>>())
        };
        Self {
            n_genes: self.n_genes,
            cells: rows.iter().map(|&i| self.cells[i].clone()).collect(),
            gene_names: self.gene_names.clone(),
            cell_ids: rows.iter().map(|&i| self.cell_ids[i].clone()).collect(),
            cell_types: pick(&self.cell_types),
            perturbations: pick(&self.perturbations).filter(|p| p.iter().any(|l| l == CONTROL_LABEL)),
        }
    }

    /// The same matrix without cell-type labels.
    pub fn without_cell_types(&self) -> Self {
        Self {
            cell_types: None,
            ..self.clone()
        }
    }
}

/// Map string labels to dense ids in sorted-name order.
pub fn categorize(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let names: Vec<String> = labels
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .cloned()
        .collect();
    let ids = labels
        .iter()
        .map(|l| names.binary_search(l).expect("label present"))
        .collect();
    (ids, names)
}

fn sort_cell(cell: &mut SparseCell) {
    let mut pairs: Vec<(u32, f64)> = cell.genes.iter().copied().zip(cell.values.iter().copied()).collect();
    pairs.sort_by_key(|p| p.0);
    cell.genes = pairs.iter().map(|p| p.0).collect();
    cell.values = pairs.iter().map(|p| p.1).collect();
}
