//! Student/teacher lifecycle: initialization, EMA, AdamW and the three
//! training loops, plus checkpoints and embedding extraction.

mod checkpoint;
mod loops;
mod perturb;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamEntry, PARAMS_FILE, MANIFEST_FILE};
pub use loops::{
    embed_cells, finetune, finetune_objective, pretrain, pretrain_objective, split_train_validation, EpochHook, EpochLog, Objective,
};
pub use perturb::{
    perturbation_objective, predict_perturbation, split_perturbations, train_perturbation, PerturbationData,
};

use crate::corpus::CorpusError;
use crate::encoder::{EncoderConfig, EncoderError, EncoderParams, ParamStore};
use crate::objectives::{LossWeights, ObjectiveError};
use crate::scalar::Scalar;

/// Seed of the train/validation split.
pub const SPLIT_SEED: u64 = 42;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}: {term} = {value}")]
    NonFiniteLoss { step: u64, term: String, value: f64 },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Encoder(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Jepa,
    ScgptBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Jepa => "jepa",
            Mode::ScgptBaseline => "scgpt-baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherUpdate {
    Ema,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EcsVariant {
    Contrastive,
    Thresholded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub weights: LossWeights,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub ema_momentum: f64,
    pub seed: u64,
    pub mode: Mode,
    pub teacher_update: TeacherUpdate,
    pub ecs_variant: EcsVariant,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Fraction of cells (or perturbations) held out from training.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            weights: LossWeights::default(),
            mask_ratio: 0.15,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 2e-4,
            lr_decay_per_epoch: 0.9,
            epochs: 4,
            ema_momentum: 0.99,
            seed: 0,
            mode: Mode::Jepa,
            teacher_update: TeacherUpdate::Ema,
            ecs_variant: EcsVariant::Contrastive,
            grad_clip: 1.0,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self::default()
    }

    pub fn finetune() -> Self {
        Self {
            mask_ratio: 0.4,
            ..Self::default()
        }
    }

    pub fn perturbation() -> Self {
        Self {
            mask_ratio: 0.0,
            teacher_update: TeacherUpdate::Frozen,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.encoder.validate()?;
        self.weights.validate()?;
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return fail("ema_momentum must be in [0, 1)");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail("mask_ratio must be in [0, 1]");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return fail("lr_decay_per_epoch must be in (0, 1]");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return fail("grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail("holdout_fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate during epoch `k` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        learning_rate(self.learning_rate, self.lr_decay_per_epoch, epoch)
    }
}

/// `lr0 * decay^k`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// AdamW first and second moments, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        let z: Vec<Vec<T>> = store.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            first: z.clone(),
            second: z,
        }
    }
}

pub struct TrainState<T> {
    pub student: EncoderParams<T>,
    pub teacher: EncoderParams<T>,
    pub moments: Moments<T>,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    /// Teacher forward passes so far.
    pub teacher_calls: u64,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh student; the teacher is a copy of it.
    pub fn init(config: &TrainConfig, vocab_len: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student = EncoderParams::init(&config.encoder, vocab_len, &mut rng)?;
        Ok(Self::from_params(student.clone(), student, rng))
    }

    /// Resume from existing networks with zeroed moments.
    pub fn from_params(student: EncoderParams<T>, teacher: EncoderParams<T>, rng: ChaCha8Rng) -> Self {
        let moments = Moments::zeros(&student.store);
        Self {
            student,
            teacher,
            moments,
            step: 0,
            epoch: 0,
            rng,
            teacher_calls: 0,
        }
    }
}

fn congruent<T: Scalar>(a: &ParamStore<T>, b: &ParamStore<T>) -> Result<(), TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::Config(format!("{} vs {} parameters", a.len(), b.len())));
    }
    for i in 0..a.len() {
        if a.name(i) != b.name(i) || a.get(i).shape() != b.get(i).shape() {
            return Err(TrainError::Config(format!(
                "parameter {} {:?} does not match {} {:?}",
                a.name(i),
                a.get(i).shape(),
                b.name(i),
                b.get(i).shape()
            )));
        }
    }
    Ok(())
}

/// `t <- m t + (1 - m) s` for every scalar.
pub fn ema_update<T: Scalar>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<(), TrainError> {
    congruent(teacher, student)?;
    let keep = T::of(m);
    let take = T::of(1.0 - m);
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

/// Fail on the first parameter with a non-finite gradient entry.
pub fn check_gradients<T: Scalar>(store: &ParamStore<T>, grads: &[Vec<T>]) -> Result<(), TrainError> {
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(store.name(i).to_string()));
        }
    }
    Ok(())
}

/// Rescale all gradients so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = T::of(max_norm / norm);
        for v in grads.iter_mut().flatten() {
            *v *= c;
        }
    }
    norm
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay; `t` is the 1-based step.
///
/// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    moments: &mut Moments<T>,
    grads: &[Vec<T>],
    lr: f64,
    weight_decay: f64,
    t: u64,
) -> Result<(), TrainError> {
    check_gradients(params, grads)?;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let one = T::one();
    let c1 = T::of(1.0 - ADAM_BETA1.powi(t as i32));
    let c2 = T::of(1.0 - ADAM_BETA2.powi(t as i32));
    let decay = T::of(1.0 - lr * weight_decay);
    let lr = T::of(lr);
    let eps = T::of(ADAM_EPS);
    for (i, g) in grads.iter().enumerate() {
        let theta = params.get_mut(i).data_mut();
        let m = &mut moments.first[i];
        let v = &mut moments.second[i];
        for k in 0..g.len() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] = theta[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
