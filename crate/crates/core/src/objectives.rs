//! Losses and their weighted compositions.
//!
//! Every function adds nodes to a [`Graph`] and returns a scalar [`Var`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var, MASKED_LOGIT};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("{0}: empty support")]
    Empty(&'static str),
    #[error("{op}: need at least 2 embeddings, got {n}")]
    TooFew { op: &'static str, n: usize },
    #[error("{op}: {len} labels for {n} embeddings")]
    Labels { op: &'static str, len: usize, n: usize },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    /// JEPA weight of pre-training, inherited by finetuning.
    pub jepa: f64,
    pub gep: f64,
    pub gepc: f64,
    pub ecs: f64,
    pub pert_rec: f64,
    pub jepa_pert: f64,
    pub ecs_pert: f64,
    pub tau: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            jepa: 1000.0,
            gep: 1.0,
            gepc: 1.0,
            ecs: 1.0,
            pert_rec: 1.0,
            jepa_pert: 1.0,
            ecs_pert: 0.8,
            tau: 0.1,
            beta: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ws = [
            ("rec", self.rec),
            ("jepa", self.jepa),
            ("gep", self.gep),
            ("gepc", self.gepc),
            ("ecs", self.ecs),
            ("pert_rec", self.pert_rec),
            ("jepa_pert", self.jepa_pert),
            ("ecs_pert", self.ecs_pert),
            ("beta", self.beta),
        ];
        if let Some((name, w)) = ws.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(ObjectiveError::Weights(format!("{name} = {w} must be finite and >= 0")));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ObjectiveError::Weights(format!("tau = {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// `1 - cos(pred, sg(target))`, averaged over rows.
pub fn jepa_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var, ObjectiveError> {
    let t = g.stop_gradient(target);
    let c = g.cosine_similarity(pred, t)?;
    let m = g.mean(c)?;
    let neg = g.scale(m, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

fn flat<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var, AutodiffError> {
    let n = g.value(x).len();
    g.reshape(x, vec![n, 1])
}

/// Mean squared error between `pred` and `target` restricted to `slots`.
pub fn masked_mse<T: Scalar>(
    g: &mut Graph<T>,
    op: &'static str,
    pred: Var,
    target: &[f64],
    slots: &[usize],
) -> Result<Var, ObjectiveError> {
    if slots.is_empty() {
        return Err(ObjectiveError::Empty(op));
    }
    let p = flat(g, pred)?;
    let p = g.gather_rows(p, slots)?;
    let t: Vec<T> = slots.iter().map(|&s| T::of(target[s])).collect();
    let t = g.constant(Tensor::new(vec![slots.len(), 1], t)?);
    Ok(g.mse(p, t)?)
}

/// Masked value reconstruction; the same loss serves as GEP.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[f64], mask: &[usize]) -> Result<Var, ObjectiveError> {
    masked_mse(g, "reconstruction_loss", pred, target, mask)
}

/// MSE of the cell-embedding-conditioned predictions on masked slots.
pub fn gepc_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[f64], mask: &[usize]) -> Result<Var, ObjectiveError> {
    masked_mse(g, "gepc_loss", pred, target, mask)
}

/// MSE over all real gene slots of the perturbation prediction.
pub fn pert_reconstruction_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[f64], genes: &[usize]) -> Result<Var, ObjectiveError> {
    masked_mse(g, "pert_reconstruction_loss", pred, target, genes)
}

fn cosine_matrix<T: Scalar>(g: &mut Graph<T>, emb: Var) -> Result<Var, ObjectiveError> {
    let z = g.normalize_rows(emb)?;
    let zt = g.transpose(z)?;
    Ok(g.matmul(z, zt)?)
}

/// Supervised contrastive loss over a batch with temperature `tau`.
///
/// Each cell is an anchor whose positives are the other cells sharing its
/// label; the anchor itself is excluded from both positives and the
/// denominator. Anchors without positives contribute 0 to the mean over
/// all `N` anchors.
pub fn ecs_loss<T: Scalar>(g: &mut Graph<T>, emb: Var, labels: &[usize], tau: f64) -> Result<Var, ObjectiveError> {
    let n = g.value(emb).n_rows();
    if n < 2 {
        return Err(ObjectiveError::TooFew { op: "ecs_loss", n });
    }
    if labels.len() != n {
        return Err(ObjectiveError::Labels {
            op: "ecs_loss",
            len: labels.len(),
            n,
        });
    }
    let s = cosine_matrix(g, emb)?;
    let s = g.scale(s, T::of(1.0 / tau));
    let mut diag = vec![T::zero(); n * n];
    let mut weights = vec![T::zero(); n * n];
    for i in 0..n {
        diag[i * n + i] = T::of(MASKED_LOGIT);
        let peers: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        for &j in &peers {
            weights[i * n + j] = T::of(1.0 / peers.len() as f64);
        }
    }
    let diag = g.constant(Tensor::new(vec![n, n], diag)?);
    let s = g.add(s, diag)?;
    let ls = g.log_softmax_lastdim(s);
    let w = g.constant(Tensor::new(vec![n, n], weights)?);
    let prod = g.mul(ls, w)?;
    let total = g.sum(prod);
    Ok(g.scale(total, T::of(-1.0 / n as f64)))
}

/// Thresholded similarity penalty: mean over pairs `i < j` of
/// `(cos(e_i, e_j) - beta)^2`.
pub fn ecs_scgpt_variant<T: Scalar>(g: &mut Graph<T>, emb: Var, beta: f64) -> Result<Var, ObjectiveError> {
    let n = g.value(emb).n_rows();
    if n < 2 {
        return Err(ObjectiveError::TooFew { op: "ecs_scgpt_variant", n });
    }
    let s = cosine_matrix(g, emb)?;
    let d = g.add_scalar(s, T::of(-beta));
    let sq = g.mul(d, d)?;
    let pairs = n * (n - 1) / 2;
    let mut upper = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            upper[i * n + j] = T::of(1.0 / pairs as f64);
        }
    }
    let upper = g.constant(Tensor::new(vec![n, n], upper)?);
    let prod = g.mul(sq, upper)?;
    Ok(g.sum(prod))
}

/// `sum_k w_k * term_k`.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var, ObjectiveError> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let t = g.scale(v, T::of(w));
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    acc.ok_or(ObjectiveError::Empty("weighted_sum"))
}

pub fn pretrain_total<T: Scalar>(g: &mut Graph<T>, w: &LossWeights, rec: Var, jepa: Var) -> Result<Var, ObjectiveError> {
    weighted_sum(g, &[(w.rec, rec), (w.jepa, jepa)])
}

pub fn pretrain_total_scgpt<T: Scalar>(g: &mut Graph<T>, w: &LossWeights, rec: Var) -> Result<Var, ObjectiveError> {
    weighted_sum(g, &[(w.rec, rec)])
}

pub fn finetune_total<T: Scalar>(
    g: &mut Graph<T>,
    w: &LossWeights,
    gep: Var,
    gepc: Var,
    ecs: Var,
    jepa: Var,
) -> Result<Var, ObjectiveError> {
    weighted_sum(g, &[(w.gep, gep), (w.gepc, gepc), (w.ecs, ecs), (w.jepa, jepa)])
}

pub fn finetune_total_scgpt<T: Scalar>(g: &mut Graph<T>, w: &LossWeights, gep: Var, gepc: Var, ecs: Var) -> Result<Var, ObjectiveError> {
    weighted_sum(g, &[(w.gep, gep), (w.gepc, gepc), (w.ecs, ecs)])
}

pub fn pert_total<T: Scalar>(g: &mut Graph<T>, w: &LossWeights, rec: Var, jepa: Var, ecs: Var) -> Result<Var, ObjectiveError> {
    weighted_sum(g, &[(w.pert_rec, rec), (w.jepa_pert, jepa), (w.ecs_pert, ecs)])
}

pub fn pert_total_scgpt<T: Scalar>(g: &mut Graph<T>, w: &LossWeights, rec: Var, ecs: Var) -> Result<Var, ObjectiveError> {
    weighted_sum(g, &[(w.pert_rec, rec), (w.ecs_pert, ecs)])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::max_gradient_error;

    type G = Graph<f64>;
    type Check<'a> = Box<dyn Fn(&mut G, &[Var]) -> Var + 'a>;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn value(build: impl FnOnce(&mut G) -> Var) -> f64 {
        let mut g = G::new();
        let v = build(&mut g);
        g.value(v).item()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn jepa_examples() {
        let a = t(&[&[1.0, 2.0, -1.0]]);
        let neg = t(&[&[-1.0, -2.0, 1.0]]);
        let ortho = t(&[&[2.0, -1.0, 0.0]]);
        let l = |x: &Tensor<f64>, y: &Tensor<f64>| {
            value(|g| {
                let x = g.param(x.clone());
                let y = g.param(y.clone());
                jepa_loss(g, x, y).unwrap()
            })
        };
        assert!(l(&a, &a).abs() < 1e-15);
        assert!((l(&neg, &a) - 2.0).abs() < 1e-15);
        assert!((l(&ortho, &a) - 1.0).abs() < 1e-15);
        let scaled = t(&[&[4.0, -2.0, 0.0]]);
        assert_eq!(l(&ortho, &a), l(&scaled, &a));
    }

    #[test]
    fn jepa_zero_norm_is_error() {
        let mut g = G::new();
        let x = g.param(t(&[&[0.0, 0.0]]));
        let y = g.param(t(&[&[1.0, 0.0]]));
        assert!(jepa_loss(&mut g, x, y).is_err());
    }

    #[test]
    fn jepa_gradient_reaches_prediction_only() {
        let mut g = G::new();
        let x = g.param(t(&[&[1.0, 2.0], &[0.5, -1.0]]));
        let y = g.param(t(&[&[-1.0, 3.0], &[2.0, 2.0]]));
        let l = jepa_loss(&mut g, x, y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(y).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
        assert!(grads.get(x).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn reconstruction_examples() {
        let target = [0.0, 1.0, 5.0, 7.0];
        let l = |pred: [f64; 4], mask: &[usize]| {
            value(|g| {
                let p = g.param(Tensor::new(vec![4], pred.to_vec()).unwrap());
                reconstruction_loss(g, p, &target, mask).unwrap()
            })
        };
        assert_eq!(l([9.0, 1.0, 5.0, 0.0], &[1, 2]), 0.0);
        assert_eq!(l([0.0, 3.0, 0.0, 0.0], &[1]), 4.0);
        assert_eq!(l([0.0, 3.0, 8.0, 0.0], &[1]), l([0.0, 3.0, -2.0, 4.0], &[1]));
        let mut g = G::new();
        let p = g.param(Tensor::zeros(&[4]));
        assert!(matches!(reconstruction_loss(&mut g, p, &target, &[]), Err(ObjectiveError::Empty(_))));
    }

    #[test]
    fn pert_reconstruction_ignores_pads() {
        let l = |pred: Vec<f64>, target: Vec<f64>, genes: &[usize]| {
            value(|g| {
                let p = g.param(Tensor::new(vec![pred.len()], pred).unwrap());
                pert_reconstruction_loss(g, p, &target, genes).unwrap()
            })
        };
        assert_eq!(l(vec![0.0, 2.0, 0.0], vec![0.0, 1.0, 1.0], &[1, 2]), 1.0);
        assert_eq!(l(vec![0.0, 2.0, 0.0, 9.0, 9.0], vec![0.0, 1.0, 1.0, 0.0, 0.0], &[1, 2]), 1.0);
    }

    fn ecs_value(emb: &Tensor<f64>, labels: &[usize], tau: f64) -> f64 {
        value(|g| {
            let e = g.param(emb.clone());
            ecs_loss(g, e, labels, tau).unwrap()
        })
    }

    /// Direct evaluation of the contrastive objective.
    fn ecs_oracle(emb: &Tensor<f64>, labels: &[usize], tau: f64) -> f64 {
        let n = emb.n_rows();
        let cos = |i: usize, j: usize| {
            let (a, b) = (emb.row(i), emb.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..n {
            let peers: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if peers.is_empty() {
                continue;
            }
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (cos(i, k) / tau).exp()).sum();
            for &p in &peers {
                total -= ((cos(i, p) / tau).exp() / denom).ln() / peers.len() as f64;
            }
        }
        total / n as f64
    }

    #[test]
    fn ecs_examples() {
        let same = t(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert!(ecs_value(&same, &[0, 0], 1.0).abs() < 1e-12);
        assert_eq!(ecs_value(&same, &[0, 1], 1.0), 0.0);
        let pairs = t(&[&[1.0, 0.01], &[1.0, -0.01], &[0.01, 1.0], &[-0.01, 1.0]]);
        let good = ecs_value(&pairs, &[0, 0, 1, 1], 0.1);
        let shuffled = ecs_value(&pairs, &[0, 1, 0, 1], 0.1);
        assert!((good - ecs_oracle(&pairs, &[0, 0, 1, 1], 0.1)).abs() < 1e-9);
        assert!((shuffled - ecs_oracle(&pairs, &[0, 1, 0, 1], 0.1)).abs() < 1e-9);
        assert!(good < shuffled);
        let mut g = G::new();
        let e = g.param(t(&[&[1.0, 0.0]]));
        assert!(matches!(ecs_loss(&mut g, e, &[0], 0.1), Err(ObjectiveError::TooFew { .. })));
    }

    #[test]
    fn ecs_matches_oracle_and_symmetries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(2..9);
            let emb = rand_t(&mut rng, &[n, 4]);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let tau = rng.random_range(0.05..1.0);
            let v = ecs_value(&emb, &labels, tau);
            assert!((v - ecs_oracle(&emb, &labels, tau)).abs() < 1e-9 * v.abs().max(1.0));
            let relabeled: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3 + 10).collect();
            assert_eq!(v, ecs_value(&emb, &relabeled, tau));
            // powers of two rescale without rounding
            for c in [2.0, 0.25] {
                let s = Tensor::new(emb.shape().to_vec(), emb.data().iter().map(|x| x * c).collect()).unwrap();
                assert_eq!(v, ecs_value(&s, &labels, tau));
            }
            let s = Tensor::new(emb.shape().to_vec(), emb.data().iter().map(|x| x * 3.7).collect()).unwrap();
            assert!((v - ecs_value(&s, &labels, tau)).abs() < 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn scgpt_variant_examples() {
        let l = |emb: Tensor<f64>, beta: f64| {
            value(|g| {
                let e = g.param(emb);
                ecs_scgpt_variant(g, e, beta).unwrap()
            })
        };
        assert!((l(t(&[&[1.0, 2.0], &[2.0, 4.0]]), 0.3) - 0.49).abs() < 1e-12);
        let c: f64 = 0.3;
        let at_beta = t(&[&[1.0, 0.0], &[c, (1.0 - c * c).sqrt()]]);
        assert!(l(at_beta, c).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb = rand_t(&mut rng, &[3, 5]);
        let cos = |i: usize, j: usize| {
            let (a, b) = (emb.row(i), emb.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt()
        };
        let expect = ((cos(0, 1) - 0.3).powi(2) + (cos(0, 2) - 0.3).powi(2) + (cos(1, 2) - 0.3).powi(2)) / 3.0;
        assert!((l(emb, 0.3) - expect).abs() < 1e-12);
    }

    #[test]
    fn gepc_with_zero_w_is_mean_square_target() {
        // f(y)ᵀ W e with W = 0 predicts 0 everywhere
        let target = [0.0, 3.0, 1.0, 4.0];
        let v = value(|g| {
            let p = g.param(Tensor::zeros(&[4]));
            gepc_loss(g, p, &target, &[1, 3]).unwrap()
        });
        assert_eq!(v, (9.0 + 16.0) / 2.0);
    }

    #[test]
    fn composite_weights() {
        let w = LossWeights::default();
        assert_eq!((w.rec, w.jepa), (1.0, 1000.0));
        assert_eq!((w.gep, w.gepc, w.ecs, w.jepa), (1.0, 1.0, 1.0, 1000.0));
        assert_eq!((w.pert_rec, w.jepa_pert, w.ecs_pert), (1.0, 1.0, 0.8));
        let mut g = G::new();
        let a = g.param(Tensor::scalar(0.7));
        let b = g.param(Tensor::scalar(0.2));
        let c = g.param(Tensor::scalar(1.5));
        let d = g.param(Tensor::scalar(0.05));
        let p = pretrain_total(&mut g, &w, a, b).unwrap();
        assert_eq!(g.value(p).item(), 0.7 + 1000.0 * 0.2);
        let zero = LossWeights { jepa: 0.0, ..w.clone() };
        let p0 = pretrain_total(&mut g, &zero, a, b).unwrap();
        let ps = pretrain_total_scgpt(&mut g, &w, a).unwrap();
        assert_eq!(g.value(p0).item(), g.value(ps).item());
        let pt = pert_total(&mut g, &w, a, b, c).unwrap();
        assert_eq!(g.value(pt).item(), 0.7 + 0.2 + 0.8 * 1.5);
        let ptb = pert_total_scgpt(&mut g, &w, a, c).unwrap();
        assert_eq!(g.value(ptb).item(), 0.7 + 0.8 * 1.5);
        let f = finetune_total(&mut g, &w, a, b, c, d).unwrap();
        let fs = finetune_total_scgpt(&mut g, &w, a, b, c).unwrap();
        assert_eq!(g.value(f).item() - g.value(fs).item(), 1000.0 * 0.05);

        let double = LossWeights {
            gep: 2.0 * w.gep,
            gepc: 2.0 * w.gepc,
            ecs: 2.0 * w.ecs,
            jepa: 2.0 * w.jepa,
            ..w.clone()
        };
        let f2 = finetune_total(&mut g, &double, a, b, c, d).unwrap();
        assert_eq!(g.value(f2).item(), 2.0 * g.value(f).item());
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { ecs: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn every_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = LossWeights::default();
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let n = rng.random_range(2..6);
            let inputs = vec![rand_t(&mut rng, &[n, 3]), rand_t(&mut rng, &[n, 3]), rand_t(&mut rng, &[n * 3])];
            let target: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..5.0)).collect();
            let mask: Vec<usize> = (0..n * 3).filter(|_| rng.random_bool(0.5)).chain([0]).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            // the target sits behind a stop-gradient, so it is not a checked input
            let teacher = rand_t(&mut rng, &[n, 3]);
            let jepa = |g: &mut G, pred: Var| {
                let t = g.constant(teacher.clone());
                jepa_loss(g, pred, t).unwrap()
            };
            let checks: Vec<Check> = vec![
                Box::new(|g, v| jepa(g, v[0])),
                Box::new(|g, v| reconstruction_loss(g, v[2], &target, &mask).unwrap()),
                Box::new(|g, v| gepc_loss(g, v[2], &target, &mask).unwrap()),
                Box::new(|g, v| pert_reconstruction_loss(g, v[2], &target, &mask).unwrap()),
                Box::new(|g, v| ecs_loss(g, v[0], &labels, 0.5).unwrap()),
                Box::new(|g, v| ecs_scgpt_variant(g, v[0], 0.3).unwrap()),
                Box::new(|g, v| {
                    let r = reconstruction_loss(g, v[2], &target, &mask).unwrap();
                    let j = jepa(g, v[0]);
                    let e = ecs_loss(g, v[1], &labels, 0.5).unwrap();
                    let a = pretrain_total(g, &w, r, j).unwrap();
                    let b = pert_total(g, &w, r, j, e).unwrap();
                    let c = finetune_total(g, &w, r, r, e, j).unwrap();
                    let ab = g.add(a, b).unwrap();
                    g.add(ab, c).unwrap()
                }),
            ];
            for check in &checks {
                worst = worst.max(max_gradient_error(&inputs, 1e-5, 1e-3, check.as_ref()));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
