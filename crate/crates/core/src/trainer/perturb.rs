use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loops::{ecs_term, optimize, run_epochs, EpochHook, EpochLog, Objective};
use super::{EcsVariant, TrainConfig, TrainError, TrainState};
use crate::autodiff::{Graph, Var};
use crate::corpus::CellMatrix;
use crate::encoder::{reborrow, EncoderParams, Net, TokenBatch, TrainRng, NO_PERTURBATION, PERTURBED};
use crate::objectives::{jepa_loss, pert_reconstruction_loss, pert_total, pert_total_scgpt, LossWeights};
use crate::scalar::Scalar;

/// Dense `log1p` expression on a fixed gene panel, with perturbation
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct PerturbationData {
    /// Corpus gene indices of the panel, ascending.
    pub panel: Vec<usize>,
    pub panel_tokens: Vec<u32>,
    /// Per cell, `log1p` counts on the panel.
    pub values: Vec<Vec<f64>>,
    pub controls: Vec<usize>,
    /// Sorted perturbation labels.
    pub names: Vec<String>,
    /// Perturbation index of each cell; `None` for controls.
    pub cell_perturbation: Vec<Option<usize>>,
    /// Panel positions of each perturbation's targets.
    pub targets: Vec<Vec<usize>>,
    pub l_max: usize,
}

impl PerturbationData {
    /// Choose the panel and tabulate values.
    ///
    /// With at most `l_max` genes the panel is every gene. Otherwise every
    /// perturbation target is kept and the rest of the panel is filled with
    /// the genes of highest mean control `log1p` expression. A given
    /// `panel` (gene names, e.g. from a checkpoint) overrides the choice.
    pub fn new(corpus: &CellMatrix, token_of: &[u32], l_max: usize, panel: Option<&[String]>) -> Result<Self, TrainError> {
        let flags = corpus
            .control_flags()
            .ok_or_else(|| TrainError::Data("corpus has no perturbation labels".into()))?;
        let labels = corpus.perturbations().expect("flags imply labels");
        let controls: Vec<usize> = (0..corpus.n_cells()).filter(|&c| flags[c]).collect();
        if controls.is_empty() {
            return Err(TrainError::Data("corpus has no control cells".into()));
        }
        let names = corpus.perturbation_names();
        let gene_targets = names
            .iter()
            .map(|n| corpus.perturbation_targets(n))
            .collect::<Result<Vec<_>, _>>()?;

        let panel: Vec<usize> = match panel {
            Some(genes) => {
                let mut p = genes
                    .iter()
                    .map(|g| {
                        corpus
                            .gene_index(g)
                            .ok_or_else(|| TrainError::Data(format!("panel gene {g} not in corpus")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                p.sort_unstable();
                p
            }
            None if corpus.n_genes() <= l_max => (0..corpus.n_genes()).collect(),
            None => {
                let mut forced: Vec<usize> = gene_targets.iter().flatten().copied().collect();
                forced.sort_unstable();
                forced.dedup();
                if forced.len() > l_max {
                    return Err(TrainError::Data(format!(
                        "{} perturbation targets exceed l_max = {l_max}",
                        forced.len()
                    )));
                }
                let mut mean = vec![0.0; corpus.n_genes()];
                for &c in &controls {
                    let cell = corpus.cell(c);
                    for (&g, &v) in cell.genes.iter().zip(&cell.values) {
                        mean[g as usize] += v.ln_1p();
                    }
                }
                let mut order: Vec<usize> = (0..corpus.n_genes()).filter(|g| forced.binary_search(g).is_err()).collect();
                order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
                let mut p = forced;
                p.extend(order.into_iter().take(l_max - p.len()));
                p.sort_unstable();
                p
            }
        };
        if panel.len() > l_max {
            return Err(TrainError::Data(format!("panel of {} genes exceeds l_max = {l_max}", panel.len())));
        }

        let targets = gene_targets
            .iter()
            .zip(&names)
            .map(|(genes, name)| {
                genes
                    .iter()
                    .map(|g| {
                        panel.binary_search(g).map_err(|_| {
                            TrainError::Data(format!("target of perturbation {name} is outside the gene panel"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let values = corpus
            .cells()
            .iter()
            .map(|cell| {
                let dense = cell.to_dense(corpus.n_genes());
                panel.iter().map(|&g| dense[g].ln_1p()).collect()
            })
            .collect();
        let cell_perturbation = labels
            .iter()
            .zip(&flags)
            .map(|(l, &ctrl)| if ctrl { None } else { names.binary_search(l).ok() })
            .collect();
        Ok(Self {
            panel_tokens: panel.iter().map(|&g| token_of[g]).collect(),
            panel,
            values,
            controls,
            names,
            cell_perturbation,
            targets,
            l_max,
        })
    }

    pub fn panel_names(&self, corpus: &CellMatrix) -> Vec<String> {
        self.panel.iter().map(|&g| corpus.gene_names()[g].clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, TrainError> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map_err(|_| TrainError::Data(format!("unknown perturbation {name}")))
    }

    /// Cells carrying perturbation `p`.
    pub fn cells_of(&self, p: usize) -> Vec<usize> {
        (0..self.cell_perturbation.len())
            .filter(|&c| self.cell_perturbation[c] == Some(p))
            .collect()
    }

    /// One row with `values` on the panel and its perturbation tokens.
    pub fn row(&self, values: &[f64], perturbation: Option<usize>) -> Result<(TokenBatch, Vec<u32>), TrainError> {
        let batch = TokenBatch::from_tokens(&self.panel_tokens, values, self.l_max)?;
        let mut tokens = vec![NO_PERTURBATION; batch.n_slots()];
        if let Some(p) = perturbation {
            for &k in &self.targets[p] {
                tokens[k + 1] = PERTURBED;
            }
        }
        Ok((batch, tokens))
    }

    fn stack(&self, rows: &[(&[f64], Option<usize>)]) -> Result<(TokenBatch, Vec<u32>), TrainError> {
        let mut batches = Vec::with_capacity(rows.len());
        let mut tokens = Vec::new();
        for &(v, p) in rows {
            let (b, t) = self.row(v, p)?;
            batches.push(b);
            tokens.extend(t);
        }
        Ok((TokenBatch::stack(&batches), tokens))
    }
}

/// Hold out `round(fraction * n)` perturbations (at least one when there
/// are two or more and `fraction > 0`). Returns `(train, held_out)` indices.
pub fn split_perturbations(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut k = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut held = idx[..k.min(n)].to_vec();
    let mut train = idx[k.min(n)..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// Perturbation objective on one batch: control inputs with perturbation
/// tokens are mapped to the perturbed cells' expression; the JEPA target
/// is the teacher's encoding of the perturbed cells themselves.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_objective<T: Scalar>(
    g: &mut Graph<T>,
    student: &Net<T>,
    teacher: Option<&Net<T>>,
    input: &TokenBatch,
    target: &TokenBatch,
    pert_tokens: &[u32],
    labels: &[usize],
    variant: EcsVariant,
    w: &LossWeights,
    mut rng: TrainRng<'_>,
) -> Result<Objective, TrainError> {
    let x = student.embed_perturbed(g, input, pert_tokens)?;
    let out = student.encode(g, x, input, reborrow(&mut rng))?;
    let every: Vec<usize> = (0..input.n_slots()).collect();
    let v_hat = student.predict_perturbed_values(g, out.hidden, &every)?;
    let rec = pert_reconstruction_loss(g, v_hat, &target.values, &target.gene_slots())?;
    let ecs = ecs_term(g, out.cls, Some(labels), variant, w)?;
    match teacher {
        Some(t) => {
            let xt = t.embed_perturbed(g, target, pert_tokens)?;
            let e = t.encode(g, xt, target, None)?.cls;
            let pred = student.predict_perturbed_embedding(g, out.cls, rng)?;
            let jepa = jepa_loss(g, pred, e)?;
            Ok(Objective {
                total: pert_total(g, w, rec, jepa, ecs)?,
                terms: vec![("pert_rec", rec), ("jepa", jepa), ("ecs", ecs)],
            })
        }
        None => Ok(Objective {
            total: pert_total_scgpt(g, w, rec, ecs)?,
            terms: vec![("pert_rec", rec), ("ecs", ecs)],
        }),
    }
}

/// Train on the cells of perturbations `train_perts`, pairing each with a
/// control cell drawn afresh every epoch.
pub fn train_perturbation<T: Scalar>(
    data: &PerturbationData,
    train_perts: &[usize],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = train_perts
        .iter()
        .flat_map(|&p| data.cells_of(p).into_iter().map(move |c| (c, p)))
        .collect();
    if cells.is_empty() {
        return Err(TrainError::Data("no perturbed cells to train on".into()));
    }
    run_epochs(state, cfg, cells.len(), on_epoch, |state, chunk, lr| {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (c, p) = cells[i];
            let ctrl = data.controls[state.rng.random_range(0..data.controls.len())];
            inputs.push((data.values[ctrl].as_slice(), Some(p)));
            targets.push((data.values[c].as_slice(), Some(p)));
            labels.push(p);
        }
        let (input, tokens) = data.stack(&inputs)?;
        let (target, _) = data.stack(&targets)?;
        optimize(state, cfg, lr, |g, s, t, rng| {
            perturbation_objective(g, s, t, &input, &target, &tokens, &labels, cfg.ecs_variant, &cfg.weights, Some(rng))
        })
    })
}

/// Mean predicted panel profile of perturbation `p` over the given control
/// inputs, in evaluation mode.
pub fn predict_perturbation<T: Scalar>(
    params: &EncoderParams<T>,
    data: &PerturbationData,
    p: usize,
    controls: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>, TrainError> {
    if controls.is_empty() {
        return Err(TrainError::Data("no control cells to predict from".into()));
    }
    let n = data.panel.len();
    let mut sum = vec![0.0; n];
    for chunk in controls.chunks(batch_size.max(1)) {
        let rows: Vec<(&[f64], Option<usize>)> = chunk.iter().map(|&c| (data.values[c].as_slice(), Some(p))).collect();
        let (batch, tokens) = data.stack(&rows)?;
        let mut g = Graph::new();
        let net = Net::bind(&mut g, params, false);
        let x = net.embed_perturbed(&mut g, &batch, &tokens)?;
        let out = net.encode(&mut g, x, &batch, None)?;
        let w = batch.width();
        let slots: Vec<usize> = (0..batch.n_rows())
            .flat_map(|r| (1..=n).map(move |k| r * w + k))
            .collect();
        let v: Var = net.predict_perturbed_values(&mut g, out.hidden, &slots)?;
        for (i, x) in g.value(v).data().iter().enumerate() {
            sum[i % n] += x.as_f64();
        }
    }
    Ok(sum.into_iter().map(|s| s / controls.len() as f64).collect())
}
