use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{CellMatrix, CorpusError, SparseCell, CONTROL_LABEL};

/// Parameters of the synthetic expression generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_types: usize,
    pub cells_per_type: usize,
    pub n_genes: usize,
    /// Genes per cell-type signature; signatures are disjoint.
    pub signature_size: usize,
    /// Mean count of an unremarkable gene in a cell of average depth.
    pub expression_scale: f64,
    pub dropout_rate: f64,
    pub n_perturbations: usize,
    /// Log-fold shift applied to each perturbation's gene set.
    pub effect_size: f64,
    pub seed: u64,
    /// Fold elevation of a type's signature genes.
    pub signature_fold: f64,
    /// Genes shifted by one perturbation, its target first.
    pub perturbed_genes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_types: 6,
            cells_per_type: 200,
            n_genes: 500,
            signature_size: 50,
            expression_scale: 0.05,
            dropout_rate: 0.6,
            n_perturbations: 0,
            effect_size: 0.0,
            seed: 0,
            signature_fold: 120.0,
            perturbed_genes: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Spec(m));
        if self.n_types == 0 || self.cells_per_type == 0 || self.n_genes == 0 {
            return fail("n_types, cells_per_type and n_genes must be positive".into());
        }
        if self.signature_size * self.n_types > self.n_genes {
            return fail(format!(
                "signature_size x n_types = {} exceeds n_genes = {}",
                self.signature_size * self.n_types,
                self.n_genes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.expression_scale.is_finite() && self.expression_scale > 0.0) {
            return fail("expression_scale must be positive".into());
        }
        if !(self.signature_fold.is_finite() && self.signature_fold > 0.0) {
            return fail("signature_fold must be positive".into());
        }
        if !self.effect_size.is_finite() {
            return fail("effect_size must be finite".into());
        }
        if self.n_perturbations > 0 {
            if self.perturbed_genes == 0 {
                return fail("perturbed_genes must be positive".into());
            }
            if self.perturbed_genes * self.n_perturbations > self.n_genes {
                return fail("perturbation gene sets do not fit in n_genes".into());
            }
        }
        Ok(())
    }
}

/// Ground truth recorded by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Per-gene mean count before signature, perturbation and depth effects.
    pub base_means: Vec<f64>,
    /// Signature genes of each cell type (sorted).
    pub signatures: Vec<Vec<u32>>,
    /// Shifted genes of each perturbation, target gene first.
    pub perturbation_genes: Vec<Vec<u32>>,
    pub perturbation_labels: Vec<String>,
    /// Per-cell depth factors, drawn log2-uniform on `[1/2, 2]`.
    pub size_factors: Vec<f64>,
    /// Per-cell condition: 0 for control, `p + 1` for perturbation `p`.
    pub conditions: Vec<usize>,
}

impl SynthTruth {
    /// Poisson mean of `gene` for a cell of `cell_type` under `condition`,
    /// before the depth factor.
    pub fn mean(&self, spec: &SynthSpec, cell_type: usize, condition: usize, gene: usize) -> f64 {
        let mut lam = self.base_means[gene];
        if self.signatures[cell_type].binary_search(&(gene as u32)).is_ok() {
            lam *= spec.signature_fold;
        }
        if condition > 0 && self.perturbation_genes[condition - 1].contains(&(gene as u32)) {
            lam *= spec.effect_size.exp();
        }
        lam
    }
}

pub fn gene_name(g: usize) -> String {
    format!("G{g:04}")
}

pub fn synthesize_corpus(spec: &SynthSpec) -> Result<CellMatrix, CorpusError> {
    synthesize_with_truth(spec).map(|(m, _)| m)
}

/// Generate a labelled corpus and the parameters it was drawn from.
///
/// Cells are emitted type by type. With perturbations, cell `c` of each type
/// gets condition `c mod (n_perturbations + 1)`, condition 0 being control.
/// Each entry is a Poisson count whose mean is the gene's base mean, scaled
/// by the cell's depth factor, the signature fold and the perturbation
/// shift; dropout then zeroes it with probability `dropout_rate`.
pub fn synthesize_with_truth(spec: &SynthSpec) -> Result<(CellMatrix, SynthTruth), CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_genes = spec.n_genes;

    let base_means: Vec<f64> = (0..n_genes)
        .map(|_| spec.expression_scale * rng.random_range(0.5..1.5))
        .collect();

    let mut perm: Vec<u32> = (0..n_genes as u32).collect();
    perm.shuffle(&mut rng);
    let signatures: Vec<Vec<u32>> = (0..spec.n_types)
        .map(|t| {
            let mut s = perm[t * spec.signature_size..(t + 1) * spec.signature_size].to_vec();
            s.sort_unstable();
            s
        })
        .collect();

    perm.shuffle(&mut rng);
    let perturbation_genes: Vec<Vec<u32>> = (0..spec.n_perturbations)
        .map(|p| perm[p * spec.perturbed_genes..(p + 1) * spec.perturbed_genes].to_vec())
        .collect();
    let gene_names: Vec<String> = (0..n_genes).map(gene_name).collect();
    let perturbation_labels: Vec<String> = perturbation_genes
        .iter()
        .map(|set| gene_names[set[0] as usize].clone())
        .collect();

    let mut truth = SynthTruth {
        base_means,
        signatures,
        perturbation_genes,
        perturbation_labels,
        size_factors: Vec::new(),
        conditions: Vec::new(),
    };

    let n_cells = spec.n_types * spec.cells_per_type;
    let mut cells = Vec::with_capacity(n_cells);
    let mut cell_types = Vec::with_capacity(n_cells);
    let mut perturbations = Vec::with_capacity(n_cells);
    for t in 0..spec.n_types {
        for c in 0..spec.cells_per_type {
            let condition = if spec.n_perturbations > 0 {
                c % (spec.n_perturbations + 1)
            } else {
                0
            };
            let depth = 2f64.powf(rng.random_range(-1.0..1.0));
            let mut cell = SparseCell::default();
            for g in 0..n_genes {
                let lam = depth * truth.mean(spec, t, condition, g);
                let count = Poisson::new(lam).map_err(|e| CorpusError::Spec(e.to_string()))?.sample(&mut rng);
                let dropped = rng.random::<f64>() < spec.dropout_rate;
                if count > 0.0 && !dropped {
                    cell.genes.push(g as u32);
                    cell.values.push(count);
                }
            }
            cells.push(cell);
            cell_types.push(format!("type{t}"));
            perturbations.push(if condition == 0 {
                CONTROL_LABEL.to_string()
            } else {
                truth.perturbation_labels[condition - 1].clone()
            });
            truth.size_factors.push(depth);
            truth.conditions.push(condition);
        }
    }
    let cell_ids = (0..n_cells).map(|i| format!("cell{i:05}")).collect();
    let matrix = CellMatrix::new(
        cells,
        gene_names,
        cell_ids,
        Some(cell_types),
        (spec.n_perturbations > 0).then_some(perturbations),
    )?;
    Ok((matrix, truth))
}
