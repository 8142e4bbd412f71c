use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{adamw_step, check_gradients, clip_gradients, ema_update, EcsVariant, Mode, TeacherUpdate, TrainConfig, TrainError, TrainState};
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{bin_cell, BinnedCell, CellMatrix};
use crate::encoder::{apply_value_mask, reborrow, tokenize, EncoderParams, Net, TokenBatch, TrainRng};
use crate::objectives::{
    ecs_loss, ecs_scgpt_variant, finetune_total, finetune_total_scgpt, gepc_loss, jepa_loss, pretrain_total,
    pretrain_total_scgpt, reconstruction_loss, LossWeights,
};
use crate::scalar::Scalar;

/// Per-epoch training record.
/// Callback run after every epoch.
pub type EpochHook<'a, T> = dyn FnMut(&EpochLog, &TrainState<T>) -> Result<(), TrainError> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub step: u64,
    pub batches: usize,
    /// Mean weighted total over the epoch's batches.
    pub loss: f64,
    /// Mean of each unweighted component.
    pub terms: BTreeMap<String, f64>,
}

/// A scalar objective and its named unweighted components.
pub struct Objective {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

/// Shuffle `0..n` with the fixed split seed; the first
/// `round(fraction * n)` indices form the validation set. Returns
/// `(train, validation)`, each sorted.
pub fn split_train_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut val = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub(super) fn binned_cells(corpus: &CellMatrix, cells: &[usize], n_bins: usize) -> Result<Vec<(usize, BinnedCell)>, TrainError> {
    let mut out = Vec::with_capacity(cells.len());
    for &c in cells {
        if corpus.cell(c).is_empty() {
            continue;
        }
        out.push((c, bin_cell(corpus.cell(c), n_bins)?));
    }
    if out.is_empty() {
        return Err(TrainError::Data("no non-empty cells to train on".into()));
    }
    Ok(out)
}

fn token_batch<R: Rng + ?Sized>(cells: &[&BinnedCell], token_of: &[u32], l_max: usize, rng: &mut R) -> Result<TokenBatch, TrainError> {
    let rows = cells
        .iter()
        .map(|c| Ok(tokenize(&c.subsample(l_max, rng), token_of, l_max)?))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(TokenBatch::stack(&rows))
}

fn all_slots(batch: &TokenBatch) -> Vec<usize> {
    (0..batch.n_slots()).collect()
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

pub(super) fn ecs_term<T: Scalar>(
    g: &mut Graph<T>,
    cls: Var,
    labels: Option<&[usize]>,
    variant: EcsVariant,
    w: &LossWeights,
) -> Result<Var, TrainError> {
    match labels {
        Some(l) if l.len() >= 2 => Ok(match variant {
            EcsVariant::Contrastive => ecs_loss(g, cls, l, w.tau)?,
            EcsVariant::Thresholded => ecs_scgpt_variant(g, cls, w.beta)?,
        }),
        _ => Ok(zero(g)),
    }
}

fn masked_or_skip(masked: &TokenBatch) -> Result<Vec<usize>, TrainError> {
    let slots = masked.masked_slots();
    if slots.is_empty() {
        return Err(TrainError::Data("batch has no masked genes; raise mask_ratio".into()));
    }
    Ok(slots)
}

/// Teacher target on the clean batch: eval-mode forward, full attention.
fn teacher_cls<T: Scalar>(g: &mut Graph<T>, teacher: &Net<T>, clean: &TokenBatch) -> Result<Var, TrainError> {
    Ok(teacher.forward(g, clean, None)?.cls)
}

/// Pre-training objective on one batch. `teacher = None` selects the
/// baseline (reconstruction only).
pub fn pretrain_objective<T: Scalar>(
    g: &mut Graph<T>,
    student: &Net<T>,
    teacher: Option<&Net<T>>,
    clean: &TokenBatch,
    masked: &TokenBatch,
    w: &LossWeights,
    mut rng: TrainRng<'_>,
) -> Result<Objective, TrainError> {
    let slots = masked_or_skip(masked)?;
    let x = student.embed(g, masked)?;
    let out = student.encode(g, x, masked, reborrow(&mut rng))?;
    let v_hat = student.predict_values(g, out.hidden, &all_slots(masked))?;
    let rec = reconstruction_loss(g, v_hat, &clean.values, &slots)?;
    match teacher {
        Some(t) => {
            let target = teacher_cls(g, t, clean)?;
            let pred = student.predict_embedding(g, out.cls, rng)?;
            let jepa = jepa_loss(g, pred, target)?;
            Ok(Objective {
                total: pretrain_total(g, w, rec, jepa)?,
                terms: vec![("rec", rec), ("jepa", jepa)],
            })
        }
        None => Ok(Objective {
            total: pretrain_total_scgpt(g, w, rec)?,
            terms: vec![("rec", rec)],
        }),
    }
}

/// Finetuning objective: GEP, GEPC, ECS on student cls states of the
/// masked view, and JEPA unless `teacher` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_objective<T: Scalar>(
    g: &mut Graph<T>,
    student: &Net<T>,
    teacher: Option<&Net<T>>,
    clean: &TokenBatch,
    masked: &TokenBatch,
    labels: Option<&[usize]>,
    variant: EcsVariant,
    w: &LossWeights,
    mut rng: TrainRng<'_>,
) -> Result<Objective, TrainError> {
    let slots = masked_or_skip(masked)?;
    let x = student.embed(g, masked)?;
    let out = student.encode(g, x, masked, reborrow(&mut rng))?;
    let every = all_slots(masked);
    let v_hat = student.predict_values(g, out.hidden, &every)?;
    let gep = reconstruction_loss(g, v_hat, &clean.values, &slots)?;
    let v_tilde = student.gepc_predict(g, masked, out.cls, &every)?;
    let gepc = gepc_loss(g, v_tilde, &clean.values, &slots)?;
    let ecs = ecs_term(g, out.cls, labels, variant, w)?;
    match teacher {
        Some(t) => {
            let target = teacher_cls(g, t, clean)?;
            let pred = student.predict_embedding(g, out.cls, rng)?;
            let jepa = jepa_loss(g, pred, target)?;
            Ok(Objective {
                total: finetune_total(g, w, gep, gepc, ecs, jepa)?,
                terms: vec![("gep", gep), ("gepc", gepc), ("ecs", ecs), ("jepa", jepa)],
            })
        }
        None => Ok(Objective {
            total: finetune_total_scgpt(g, w, gep, gepc, ecs)?,
            terms: vec![("gep", gep), ("gepc", gepc), ("ecs", ecs)],
        }),
    }
}

/// Build the objective on a fresh graph, backpropagate, clip, and apply
/// AdamW to the student; then update the teacher.
pub(super) fn optimize<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    lr: f64,
    build: impl FnOnce(&mut Graph<T>, &Net<T>, Option<&Net<T>>, &mut ChaCha8Rng) -> Result<Objective, TrainError>,
) -> Result<Vec<(&'static str, f64)>, TrainError> {
    let use_teacher = cfg.mode == Mode::Jepa;
    let mut g = Graph::new();
    let (terms, grads) = {
        let student = Net::bind(&mut g, &state.student, true);
        let teacher = use_teacher.then(|| Net::bind(&mut g, &state.teacher, false));
        if use_teacher {
            state.teacher_calls += 1;
        }
        let obj = build(&mut g, &student, teacher.as_ref(), &mut state.rng)?;
        let total = g.value(obj.total).item().as_f64();
        let mut terms = vec![("total", total)];
        terms.extend(obj.terms.iter().map(|&(n, v)| (n, g.value(v).item().as_f64())));
        for &(name, v) in &terms {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: state.step + 1,
                    term: name.to_string(),
                    value: v,
                });
            }
        }
        let mut grads = g.backward(obj.total)?;
        let grads: Vec<Vec<T>> = student
            .vars()
            .iter()
            .zip(state.student.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
            .collect();
        (terms, grads)
    };
    let mut grads = grads;
    check_gradients(&state.student.store, &grads)?;
    clip_gradients(&mut grads, cfg.grad_clip);
    state.step += 1;
    adamw_step(&mut state.student.store, &mut state.moments, &grads, lr, cfg.weight_decay, state.step)?;
    if use_teacher && cfg.teacher_update == TeacherUpdate::Ema {
        ema_update(&mut state.teacher.store, &state.student.store, cfg.ema_momentum)?;
    }
    Ok(terms)
}

/// Drive `epochs` passes over `n_items` items in seeded random order;
/// `step` consumes one batch of item indices.
pub(super) fn run_epochs<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    n_items: usize,
    on_epoch: &mut EpochHook<'_, T>,
    mut step: impl FnMut(&mut TrainState<T>, &[usize], f64) -> Result<Vec<(&'static str, f64)>, TrainError>,
) -> Result<Vec<EpochLog>, TrainError> {
    let mut logs = Vec::new();
    for _ in 0..cfg.epochs {
        let lr = cfg.lr_at(state.epoch);
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut state.rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            for (name, v) in step(state, chunk, lr)? {
                *sums.entry(name.to_string()).or_default() += v;
            }
            batches += 1;
        }
        state.epoch += 1;
        let loss = sums.remove("total").unwrap_or(0.0) / batches as f64;
        let log = EpochLog {
            epoch: state.epoch,
            lr,
            step: state.step,
            batches,
            loss,
            terms: sums.into_iter().map(|(k, v)| (k, v / batches as f64)).collect(),
        };
        on_epoch(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Masked-value pre-training over `cells`. `token_of` maps corpus gene
/// indices to vocabulary tokens.
pub fn pretrain<T: Scalar>(
    corpus: &CellMatrix,
    token_of: &[u32],
    cells: &[usize],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    let data = binned_cells(corpus, cells, cfg.encoder.n_bins)?;
    let l_max = cfg.encoder.l_max;
    run_epochs(state, cfg, data.len(), on_epoch, |state, chunk, lr| {
        let rows: Vec<&BinnedCell> = chunk.iter().map(|&i| &data[i].1).collect();
        let clean = token_batch(&rows, token_of, l_max, &mut state.rng)?;
        let masked = apply_value_mask(&clean, cfg.mask_ratio, &mut state.rng);
        optimize(state, cfg, lr, |g, s, t, rng| {
            pretrain_objective(g, s, t, &clean, &masked, &cfg.weights, Some(rng))
        })
    })
}

/// Finetuning with GEP, GEPC, ECS (on cell-type labels when present) and
/// JEPA.
pub fn finetune<T: Scalar>(
    corpus: &CellMatrix,
    token_of: &[u32],
    cells: &[usize],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    let data = binned_cells(corpus, cells, cfg.encoder.n_bins)?;
    let types = corpus.cell_type_ids().map(|(ids, _)| ids);
    let l_max = cfg.encoder.l_max;
    run_epochs(state, cfg, data.len(), on_epoch, |state, chunk, lr| {
        let rows: Vec<&BinnedCell> = chunk.iter().map(|&i| &data[i].1).collect();
        let labels: Option<Vec<usize>> = types.as_ref().map(|t| chunk.iter().map(|&i| t[data[i].0]).collect());
        let clean = token_batch(&rows, token_of, l_max, &mut state.rng)?;
        let masked = apply_value_mask(&clean, cfg.mask_ratio, &mut state.rng);
        optimize(state, cfg, lr, |g, s, t, rng| {
            finetune_objective(g, s, t, &clean, &masked, labels.as_deref(), cfg.ecs_variant, &cfg.weights, Some(rng))
        })
    })
}

/// Eval-mode cls embeddings of `cells`, as `f64` rows.
///
/// Cells longer than `l_max` are subsampled with a generator seeded by
/// `seed` and the cell index, so results do not depend on batching.
pub fn embed_cells<T: Scalar>(
    params: &EncoderParams<T>,
    corpus: &CellMatrix,
    token_of: &[u32],
    cells: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let cfg = &params.config;
    let chunks: Vec<&[usize]> = cells.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| -> Result<Vec<Vec<f64>>, TrainError> {
            let rows = chunk
                .iter()
                .map(|&c| {
                    let cell = corpus.cell(c);
                    let binned = if cell.is_empty() {
                        BinnedCell {
                            genes: Vec::new(),
                            bins: Vec::new(),
                            n_bins: cfg.n_bins as u32,
                        }
                    } else {
                        bin_cell(cell, cfg.n_bins)?
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(c as u64);
                    Ok(tokenize(&binned.subsample(cfg.l_max, &mut rng), token_of, cfg.l_max)?)
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let batch = TokenBatch::stack(&rows);
            let mut g = Graph::new();
            let net = Net::bind(&mut g, params, false);
            let out = net.forward(&mut g, &batch, None)?;
            let v = g.value(out.cls);
            Ok((0..v.n_rows()).map(|r| v.row(r).iter().map(|x| x.as_f64()).collect()).collect())
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(parts.into_iter().flatten().collect())
}
