//! End-to-end runs shared by the command line and the acceptance suite.

use crate::corpus::CellMatrix;
use crate::encoder::Vocab;
use crate::metrics::{
    cluster_report, perturbation_suite, ClusterReport, DeOptions, MetricsError, MetricsReport, PerturbationEval,
};
use crate::scalar::Scalar;
use crate::trainer::{
    embed_cells, predict_perturbation, pretrain, split_perturbations, split_train_validation, train_perturbation,
    EpochLog, PerturbationData, TrainConfig, TrainError, TrainState, SPLIT_SEED,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Vocabulary tokens of every corpus gene, in corpus order.
pub fn corpus_tokens(corpus: &CellMatrix) -> Vec<u32> {
    let vocab = Vocab::new(corpus.gene_names());
    vocab.resolve(corpus.gene_names()).expect("the vocabulary is built from these genes")
}

pub struct ZeroShot<T> {
    pub state: TrainState<T>,
    pub logs: Vec<EpochLog>,
    pub held_out: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub report: ClusterReport,
}

/// Pre-train on the training split, embed the held-out cells with the
/// student and score their clustering against cell-type labels.
pub fn zero_shot<T: Scalar>(corpus: &CellMatrix, cfg: &TrainConfig, k: usize) -> Result<ZeroShot<T>, ExperimentError> {
    let (types, _) = corpus
        .cell_type_ids()
        .ok_or_else(|| TrainError::Data("corpus has no cell-type labels".into()))?;
    let tokens = corpus_tokens(corpus);
    let (train, held_out) = split_train_validation(corpus.n_cells(), cfg.holdout_fraction, SPLIT_SEED);
    let mut state = TrainState::init(cfg, corpus.n_genes() + 2)?;
    let logs = pretrain(corpus, &tokens, &train, cfg, &mut state, &mut |_, _| Ok(()))?;
    let embeddings = embed_cells(&state.student, corpus, &tokens, &held_out, cfg.batch_size, cfg.seed)?;
    let labels: Vec<usize> = held_out.iter().map(|&c| types[c]).collect();
    let report = cluster_report(&embeddings, &labels, k, cfg.seed)?;
    Ok(ZeroShot {
        state,
        logs,
        held_out,
        embeddings,
        report,
    })
}

/// Score predicted against observed mean profiles of perturbations
/// `perts`, predicting each from every control cell.
pub fn evaluate_perturbations<T: Scalar>(
    state: &TrainState<T>,
    data: &PerturbationData,
    perts: &[usize],
    batch_size: usize,
    opts: &DeOptions,
) -> Result<MetricsReport, ExperimentError> {
    let groups = perts
        .iter()
        .map(|&p| {
            let pred = predict_perturbation(&state.student, data, p, &data.controls, batch_size)?;
            Ok((data.names[p].clone(), data.cells_of(p), pred))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let eval = PerturbationEval::assemble(&data.values, &data.controls, groups, opts)?;
    Ok(perturbation_suite(&eval)?)
}

pub struct PerturbationRun<T> {
    pub state: TrainState<T>,
    pub data: PerturbationData,
    pub logs: Vec<EpochLog>,
    pub held_out: Vec<usize>,
    pub report: MetricsReport,
}

/// Train on the training perturbations and evaluate on the held-out ones.
pub fn perturbation_run<T: Scalar>(
    corpus: &CellMatrix,
    cfg: &TrainConfig,
    opts: &DeOptions,
) -> Result<PerturbationRun<T>, ExperimentError> {
    let tokens = corpus_tokens(corpus);
    let data = PerturbationData::new(corpus, &tokens, cfg.encoder.l_max, None)?;
    let (train, held_out) = split_perturbations(data.names.len(), cfg.holdout_fraction, SPLIT_SEED);
    let mut state = TrainState::init(cfg, corpus.n_genes() + 2)?;
    let logs = train_perturbation(&data, &train, cfg, &mut state, &mut |_, _| Ok(()))?;
    let report = evaluate_perturbations(&state, &data, &held_out, cfg.batch_size, opts)?;
    Ok(PerturbationRun {
        state,
        data,
        logs,
        held_out,
        report,
    })
}
