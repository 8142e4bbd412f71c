use serde::{Deserialize, Serialize};

use super::{pearson, MetricsError, MetricsReport};

/// Metric names in report order.
pub const SUITE_METRICS: [&str; 6] = [
    "pearson",
    "pearson_de",
    "top20_de_non_dropout",
    "pearson_delta",
    "pearson_de_delta",
    "delta_top20_de_non_dropout",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeOptions {
    /// Size of the DE set.
    pub n_de: usize,
    /// Size of the filtered top set.
    pub n_top: usize,
    /// Minimum fraction of control cells expressing a top-set gene.
    pub min_detection: f64,
}

impl Default for DeOptions {
    fn default() -> Self {
        Self {
            n_de: 50,
            n_top: 20,
            min_detection: 0.05,
        }
    }
}

fn column_stats(rows: &[&[f64]], g: usize) -> (f64, f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[g]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r[g] - mean).powi(2)).sum::<f64>() / n;
    let detected = rows.iter().filter(|r| r[g] > 0.0).count() as f64 / n;
    (mean, var, detected)
}

/// DE genes ranked by absolute standardized mean difference between
/// perturbed and control cells, and the top of that ranking restricted to
/// genes detected in enough controls.
///
/// A gene with zero pooled variance and a nonzero shift ranks above every
/// finite score. Ties fall back to the raw shift, then the gene index.
pub fn de_gene_sets(perturbed: &[&[f64]], control: &[&[f64]], opts: &DeOptions) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
    if control.is_empty() {
        return Err(MetricsError::Invalid("no control cells".into()));
    }
    if perturbed.is_empty() {
        return Err(MetricsError::Invalid("no perturbed cells".into()));
    }
    let n_genes = control[0].len();
    if let Some(r) = perturbed.iter().chain(control).find(|r| r.len() != n_genes) {
        return Err(MetricsError::Length(r.len(), n_genes));
    }
    let mut scored: Vec<(f64, f64, usize)> = Vec::with_capacity(n_genes);
    let mut detection = vec![0.0; n_genes];
    for (g, det) in detection.iter_mut().enumerate() {
        let (mp, vp, _) = column_stats(perturbed, g);
        let (mc, vc, dc) = column_stats(control, g);
        *det = dc;
        let shift = (mp - mc).abs();
        let sd = ((vp + vc) / 2.0).sqrt();
        let score = if sd > 0.0 {
            shift / sd
        } else if shift > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        scored.push((score, shift, g));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let de: Vec<usize> = scored.iter().take(opts.n_de).map(|s| s.2).collect();
    let top: Vec<usize> = de
        .iter()
        .copied()
        .filter(|&g| detection[g] >= opts.min_detection)
        .take(opts.n_top)
        .collect();
    Ok((de, top))
}

/// Observed and predicted mean profiles per perturbation with the control
/// reference and gene sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationEval {
    pub names: Vec<String>,
    pub observed: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    pub control: Vec<f64>,
    pub de: Vec<Vec<usize>>,
    pub top: Vec<Vec<usize>>,
}

fn mean_profile(rows: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, &v) in m.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

impl PerturbationEval {
    /// Assemble from per-cell profiles (`values[cell][gene]`), the control
    /// cells, and for each perturbation its cells and predicted profile.
    pub fn assemble(
        values: &[Vec<f64>],
        controls: &[usize],
        perturbations: Vec<(String, Vec<usize>, Vec<f64>)>,
        opts: &DeOptions,
    ) -> Result<Self, MetricsError> {
        if controls.is_empty() {
            return Err(MetricsError::Invalid("no control cells".into()));
        }
        let ctrl: Vec<&[f64]> = controls.iter().map(|&c| values[c].as_slice()).collect();
        let control = mean_profile(&ctrl);
        let mut eval = Self {
            names: Vec::new(),
            observed: Vec::new(),
            predicted: Vec::new(),
            control,
            de: Vec::new(),
            top: Vec::new(),
        };
        for (name, cells, pred) in perturbations {
            let rows: Vec<&[f64]> = cells.iter().map(|&c| values[c].as_slice()).collect();
            if rows.is_empty() {
                return Err(MetricsError::Invalid(format!("perturbation {name} has no cells")));
            }
            let (de, top) = de_gene_sets(&rows, &ctrl, opts)?;
            eval.observed.push(mean_profile(&rows));
            eval.predicted.push(pred);
            eval.de.push(de);
            eval.top.push(top);
            eval.names.push(name);
        }
        eval.validate()?;
        Ok(eval)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let n = self.names.len();
        if n == 0 {
            return Err(MetricsError::Invalid("empty evaluation set".into()));
        }
        for len in [self.observed.len(), self.predicted.len(), self.de.len(), self.top.len()] {
            if len != n {
                return Err(MetricsError::Length(len, n));
            }
        }
        let g = self.control.len();
        for p in 0..n {
            for v in [&self.observed[p], &self.predicted[p]] {
                if v.len() != g {
                    return Err(MetricsError::Length(v.len(), g));
                }
            }
            if self.de[p].iter().any(|&i| i >= g) {
                return Err(MetricsError::Invalid(format!("DE gene out of range for {}", self.names[p])));
            }
            if self.top[p].iter().any(|i| !self.de[p].contains(i)) {
                return Err(MetricsError::Invalid(format!("top set of {} is not within its DE set", self.names[p])));
            }
        }
        Ok(())
    }
}

fn restrict(v: &[f64], idx: Option<&[usize]>) -> Vec<f64> {
    match idx {
        Some(idx) => idx.iter().map(|&i| v[i]).collect(),
        None => v.to_vec(),
    }
}

/// The six correlation metrics, each averaged over perturbations where it
/// is defined. `<metric>_n_excluded` counts the rest; a metric undefined
/// for every perturbation is reported as null.
pub fn perturbation_suite(eval: &PerturbationEval) -> Result<MetricsReport, MetricsError> {
    eval.validate()?;
    let mut report = MetricsReport::default();
    for (m, name) in SUITE_METRICS.iter().enumerate() {
        let delta = m >= 3;
        let mut defined = Vec::new();
        let mut excluded = 0usize;
        for p in 0..eval.names.len() {
            let idx = match m % 3 {
                0 => None,
                1 => Some(eval.de[p].as_slice()),
                _ => Some(eval.top[p].as_slice()),
            };
            let (mut x, mut y) = (eval.predicted[p].clone(), eval.observed[p].clone());
            if delta {
                for ((a, b), c) in x.iter_mut().zip(y.iter_mut()).zip(&eval.control) {
                    *a -= c;
                    *b -= c;
                }
            }
            match pearson(&restrict(&x, idx), &restrict(&y, idx)) {
                Ok(r) => defined.push(r),
                Err(MetricsError::ZeroVariance | MetricsError::Invalid(_)) => excluded += 1,
                Err(e) => return Err(e),
            }
        }
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        report.insert(*name, mean);
        report.set(format!("{name}_n_excluded"), excluded as f64);
    }
    report.set("n_perturbations", eval.names.len() as f64);
    Ok(report)
}
