//! Evaluation: clustering quality of cell embeddings and correlation
//! metrics for perturbation predictions.

mod clustering;
mod perturbation;
mod table;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use clustering::{
    ari, asw, avg_bio, brute_force_modularity_optimum, cluster_report, encode_labels, knn_graph, louvain, modularity,
    nmi, refine, resolutions, CellGraph, ClusterReport, DEFAULT_K,
};
pub use perturbation::{de_gene_sets, perturbation_suite, DeOptions, PerturbationEval, SUITE_METRICS};
pub use table::{read_embedding_tsv, write_embedding_tsv, EmbeddingTable};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("{0}")]
    Invalid(String),
    #[error("k = {k} must be below the number of cells {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("silhouette needs at least two labels")]
    SingleCluster,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Flat metric name to value map; `None` marks an undefined metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricsReport(pub BTreeMap<String, Option<f64>>);

impl MetricsReport {
    pub fn insert(&mut self, key: impl Into<String>, value: Option<f64>) {
        self.0.insert(key.into(), value);
    }

    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.insert(key, Some(value));
    }

    /// The value under `key`, if present and defined.
    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied().flatten()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.0.extend(other.0);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Centered Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::Invalid("pearson needs at least two entries".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}
