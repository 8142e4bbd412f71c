use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, Tensor, MASKED_LOGIT};
use crate::scalar::Scalar;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ff_hidden: 12,
        value_hidden: 6,
        gepc_hidden: 6,
        l_max: 6,
        ..EncoderConfig::default()
    }
}

fn params<T: Scalar>(cfg: &EncoderConfig, vocab: usize, seed: u64) -> EncoderParams<T> {
    EncoderParams::init(cfg, vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn row(tokens: &[u32], values: &[f64], l_max: usize) -> TokenBatch {
    TokenBatch::from_tokens(tokens, values, l_max).unwrap()
}

fn hidden<T: Scalar>(p: &EncoderParams<T>, batch: &TokenBatch) -> (Vec<T>, Vec<T>) {
    let mut g = Graph::new();
    let net = Net::bind(&mut g, p, false);
    let out = net.forward(&mut g, batch, None).unwrap();
    (g.value(out.hidden).data().to_vec(), g.value(out.cls).data().to_vec())
}

fn slot_rows<T: Copy>(h: &[T], d: usize, slots: &[usize]) -> Vec<T> {
    slots.iter().flat_map(|&s| h[s * d..(s + 1) * d].to_vec()).collect()
}

#[test]
fn attention_mask_example() {
    let m: Tensor<f64> = build_attention_mask(&[2], &[false, false, false]);
    let z = 0.0;
    let b = MASKED_LOGIT;
    assert_eq!(m.data(), &[z, z, b, z, z, b, z, z, z]);
}

#[test]
fn pad_columns_blocked_everywhere() {
    let m: Tensor<f32> = build_attention_mask(&[1], &[false, false, false, true, true]);
    for i in 0..5 {
        assert_eq!(m.row(i)[3], MASKED_LOGIT as f32);
        assert_eq!(m.row(i)[4], MASKED_LOGIT as f32);
    }
}

#[test]
fn mask_counts() {
    assert_eq!(mask_count(0.15, 10), 2);
    assert_eq!(mask_count(0.15, 20), 3);
    assert_eq!(mask_count(0.4, 5), 2);
    assert_eq!(mask_count(1.0, 7), 7);
    assert_eq!(mask_count(0.0, 7), 0);
    assert_eq!(mask_count(0.15, 0), 0);
}

#[test]
fn value_mask_touches_only_gene_slots() {
    let b = TokenBatch::stack(&[
        row(&[5, 6, 7, 8, 9, 10, 11], &[1.0; 7], 8),
        row(&[5, 6, 7], &[2.0; 3], 8),
    ]);
    let m = apply_value_mask(&b, 0.4, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(m.mask_sets[0].len(), 3);
    assert_eq!(m.mask_sets[1].len(), 2);
    for (r, set) in m.mask_sets.iter().enumerate() {
        for &i in set {
            assert!(i >= 1 && !b.pad_flags[r * 9 + i]);
            assert_eq!(m.values[r * 9 + i], MASK_VALUE);
        }
    }
    let changed = (0..b.n_slots()).filter(|&s| b.values[s] != m.values[s]).count();
    assert_eq!(changed, 5);
    assert_eq!(m.gene_ids, b.gene_ids);
}

#[test]
fn too_long_rejected() {
    assert!(matches!(
        TokenBatch::from_tokens(&[2, 3, 4], &[1.0; 3], 2),
        Err(EncoderError::TooLong { len: 3, l_max: 2 })
    ));
}

#[test]
fn vocab_names_unknown_gene() {
    let v = Vocab::new(&["A".to_string(), "B".to_string()]);
    assert_eq!(v.len(), 4);
    assert_eq!(v.resolve(&["B".into(), "A".into()]).unwrap(), vec![3, 2]);
    let err = v.resolve(&["A".into(), "ZZ".into()]).unwrap_err();
    assert!(err.to_string().contains("ZZ"));
}

#[test]
fn config_validation() {
    assert!(EncoderConfig { n_heads: 3, ..tiny() }.validate().is_err());
    assert!(EncoderConfig { dropout: 1.0, ..tiny() }.validate().is_err());
    assert!(EncoderConfig::paper_scale().validate().is_ok());
}

fn masked_case(seed: u64) -> (TokenBatch, TokenBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = TokenBatch::stack(&[
        row(&[2, 3, 4, 5, 6, 7], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 6),
        row(&[8, 3, 9, 4], &[3.0, 1.0, 2.0, 9.0], 6),
    ]);
    let m = apply_value_mask(&b, 0.5, &mut rng);
    (b, m)
}

fn check_masked_invariance<T: Scalar>(seed: u64) {
    let cfg = tiny();
    let p = params::<T>(&cfg, 12, seed);
    let (_, m) = masked_case(seed);
    let masked = m.masked_slots();
    let unmasked: Vec<usize> = (0..m.n_slots()).filter(|s| !masked.contains(s)).collect();
    let (h0, c0) = hidden(&p, &m);
    // perturb the embeddings of every masked slot through its gene id
    let mut swapped = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for &s in &masked {
        swapped.gene_ids[s] = rng.random_range(2..12);
    }
    let (h1, c1) = hidden(&p, &swapped);
    let d = cfg.d_model;
    assert_eq!(slot_rows(&h0, d, &unmasked), slot_rows(&h1, d, &unmasked));
    assert_eq!(c0, c1);
    // each masked slot depends only on itself and the unmasked context
    for &s in &masked {
        let mut one = m.clone();
        one.gene_ids[s] = if m.gene_ids[s] == 2 { 3 } else { 2 };
        let (h2, _) = hidden(&p, &one);
        let others: Vec<usize> = (0..m.n_slots()).filter(|&t| t != s).collect();
        assert_eq!(slot_rows(&h0, d, &others), slot_rows(&h2, d, &others));
    }
}

#[test]
fn masked_slots_do_not_leak_f64() {
    check_masked_invariance::<f64>(3);
}

#[test]
fn masked_slots_do_not_leak_f32() {
    check_masked_invariance::<f32>(4);
}

#[test]
fn pad_invariance_is_exact() {
    let short = EncoderConfig { l_max: 4, ..tiny() };
    let long = EncoderConfig { l_max: 9, ..tiny() };
    let ps = params::<f32>(&short, 12, 5);
    let mut pl = ps.clone();
    pl.config = long.clone();
    let tokens = [2, 7, 4];
    let values = [3.0, 1.0, 5.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bs = apply_value_mask(&row(&tokens, &values, 4), 0.34, &mut rng);
    let mut bl = row(&tokens, &values, 9);
    bl.mask_sets = bs.mask_sets.clone();
    for &i in &bs.mask_sets[0] {
        bl.values[i] = MASK_VALUE;
    }
    let (hs, cs) = hidden(&ps, &bs);
    let (hl, cl) = hidden(&pl, &bl);
    let d = short.d_model;
    assert_eq!(cs, cl);
    assert_eq!(slot_rows(&hs, d, &[0, 1, 2, 3]), slot_rows(&hl, d, &[0, 1, 2, 3]));
}

#[test]
fn eval_is_deterministic() {
    let cfg = EncoderConfig { dropout: 0.3, ..tiny() };
    let p = params::<f64>(&cfg, 12, 6);
    let (_, m) = masked_case(6);
    assert_eq!(hidden(&p, &m), hidden(&p, &m));
}

#[test]
fn train_mode_dropout_is_seeded() {
    let cfg = EncoderConfig { dropout: 0.3, ..tiny() };
    let p = params::<f64>(&cfg, 12, 6);
    let (_, m) = masked_case(6);
    let run = |seed: u64| {
        let mut g = Graph::new();
        let net = Net::bind(&mut g, &p, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = net.forward(&mut g, &m, Some(&mut rng)).unwrap();
        g.value(out.cls).data().to_vec()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    assert_ne!(run(1), hidden(&p, &m).1);
}

#[test]
fn cls_is_permutation_invariant() {
    let cfg = tiny();
    let p = params::<f64>(&cfg, 12, 7);
    let a = row(&[2, 3, 4, 5, 6], &[1.0, 4.0, 2.0, 8.0, 3.0], 6);
    let b = row(&[6, 4, 2, 5, 3], &[3.0, 2.0, 1.0, 8.0, 4.0], 6);
    let (_, ca) = hidden(&p, &a);
    let (_, cb) = hidden(&p, &b);
    for (x, y) in ca.iter().zip(&cb) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn zero_perturbation_tokens_match_plain_embedding() {
    let cfg = tiny();
    let p = params::<f32>(&cfg, 12, 8);
    let (b, _) = masked_case(8);
    let mut g = Graph::new();
    let net = Net::bind(&mut g, &p, false);
    let plain = net.embed(&mut g, &b).unwrap();
    let zeros = vec![NO_PERTURBATION; b.n_slots()];
    let pert = net.embed_perturbed(&mut g, &b, &zeros).unwrap();
    assert_eq!(g.value(plain).data(), g.value(pert).data());
    let mut ones = zeros.clone();
    ones[2] = PERTURBED;
    let pert = net.embed_perturbed(&mut g, &b, &ones).unwrap();
    assert_ne!(g.value(plain).row(2), g.value(pert).row(2));
    assert_eq!(g.value(plain).row(3), g.value(pert).row(3));
    ones[4] = 7;
    assert!(matches!(
        net.embed_perturbed(&mut g, &b, &ones),
        Err(EncoderError::UnknownPerturbation { id: 7, n: 2 })
    ));
}

#[test]
fn cls_only_reduces_to_norm_and_mlp_stack() {
    let cfg = EncoderConfig { n_layers: 1, ..tiny() };
    let mut p = params::<f64>(&cfg, 12, 9);
    let layer = p.index.layers[0];
    for v in p.tensor_mut(layer.wo).data_mut() {
        *v = 0.0;
    }
    let b = row(&[], &[], cfg.l_max);
    let (_, cls) = hidden(&p, &b);

    let d = cfg.d_model;
    let x0 = p.tensor(p.index.gene_embedding).row(CLS_TOKEN as usize).to_vec();
    let norm = |x: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
        let mu = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let s = (var + cfg.layer_norm_eps).sqrt();
        (0..d).map(|i| (x[i] - mu) / s * gain[i] + bias[i]).collect()
    };
    let linear = |x: &[f64], w: &Tensor<f64>, b: &[f64]| -> Vec<f64> {
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        (0..n_out)
            .map(|j| b[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
            .collect()
    };
    let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
    let t = |i: usize| p.tensor(i);
    let x1 = norm(&x0, t(layer.ln1_gain).data(), t(layer.ln1_bias).data());
    let h: Vec<f64> = linear(&x1, t(layer.ff.w1), t(layer.ff.b1).data()).into_iter().map(gelu).collect();
    let f = linear(&h, t(layer.ff.w2), t(layer.ff.b2).data());
    let r: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
    let x2 = norm(&r, t(layer.ln2_gain).data(), t(layer.ln2_bias).data());
    for (a, b) in cls.iter().zip(&x2) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

/// Largest relative finite-difference error of `loss` w.r.t. a sample of
/// parameter entries.
fn encoder_fd_error(p: &EncoderParams<f64>, loss: &dyn Fn(&mut Graph<f64>, &Net<f64>) -> crate::autodiff::Var) -> f64 {
    let eval = |p: &EncoderParams<f64>| {
        let mut g = Graph::new();
        let net = Net::bind(&mut g, p, true);
        let l = loss(&mut g, &net);
        let v = g.value(l).item();
        let grads = g.backward(l).unwrap();
        let per: Vec<Vec<f64>> = net
            .vars()
            .iter()
            .zip(p.store.tensors())
            .map(|(&v, t)| grads.get(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        (v, per)
    };
    let (_, analytic) = eval(p);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for _ in 0..3 {
            let i = rng.random_range(0..grad.len());
            let mut plus = p.clone();
            plus.tensor_mut(k).data_mut()[i] += h;
            let mut minus = p.clone();
            minus.tensor_mut(k).data_mut()[i] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig { d_model: 4, ff_hidden: 5, value_hidden: 3, gepc_hidden: 3, l_max: 4, ..tiny() };
    let p = params::<f64>(&cfg, 8, 10);
    let b = TokenBatch::stack(&[row(&[2, 3, 4], &[1.0, 2.0, 3.0], 4), row(&[5, 6, 7, 2], &[2.0, 1.0, 4.0, 1.0], 4)]);
    let m = apply_value_mask(&b, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    let slots = m.masked_slots();
    let err = encoder_fd_error(&p, &|g, net| {
        let out = net.forward(g, &m, None).unwrap();
        let v = net.predict_values(g, out.hidden, &slots).unwrap();
        let gp = net.gepc_predict(g, &m, out.cls, &slots).unwrap();
        let e = net.predict_embedding(g, out.cls, None).unwrap();
        let pv = net.predict_perturbed_values(g, out.hidden, &slots).unwrap();
        let a = g.mul(v, gp).unwrap();
        let a = g.sum(a);
        let e2 = g.mul(e, e).unwrap();
        let e2 = g.sum(e2);
        let c = g.sum(pv);
        let t = g.add(a, e2).unwrap();
        g.add(t, c).unwrap()
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn identity_like_predictor_gradients() {
    let cfg = EncoderConfig { d_model: 4, ff_hidden: 5, value_hidden: 3, gepc_hidden: 3, l_max: 4, ..tiny() };
    let mut p = params::<f64>(&cfg, 8, 11);
    for v in p.tensor_mut(p.index.predictor.w2).data_mut() {
        *v = 0.0;
    }
    // a non-zero output bias keeps the cosine defined
    for (i, v) in p.tensor_mut(p.index.predictor.b2).data_mut().iter_mut().enumerate() {
        *v = 0.1 * (i as f64 + 1.0);
    }
    let b = row(&[2, 3, 4], &[1.0, 2.0, 3.0], 4);
    let err = encoder_fd_error(&p, &|g, net| {
        let out = net.forward(g, &b, None).unwrap();
        let e = net.predict_embedding(g, out.cls, None).unwrap();
        let c = g.cosine_similarity(e, out.cls).unwrap();
        g.sum(c)
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn init_is_seeded_and_named() {
    let cfg = tiny();
    let a = params::<f32>(&cfg, 12, 1);
    assert_eq!(a, params::<f32>(&cfg, 12, 1));
    assert_ne!(a, params::<f32>(&cfg, 12, 2));
    let names = a.store.names();
    let mut uniq = names.to_vec();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), names.len());
    let pe = a.tensor(a.index.perturbation_embedding);
    assert!(pe.row(0).iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unmasked_outputs_ignore_masked_values(seed in 0u64..10_000, ratio in 0.1f64..0.9) {
        let cfg = tiny();
        let p = params::<f32>(&cfg, 12, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=cfg.l_max);
        let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(2..12)).collect();
        let values: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..=10u32))).collect();
        let m = apply_value_mask(&row(&tokens, &values, cfg.l_max), ratio, &mut rng);
        let mut other = m.clone();
        for &i in &m.mask_sets[0] {
            other.gene_ids[i] = rng.random_range(2..12);
        }
        let (h0, c0) = hidden(&p, &m);
        let (h1, c1) = hidden(&p, &other);
        let keep: Vec<usize> = (0..m.n_slots()).filter(|s| !m.mask_sets[0].contains(s)).collect();
        prop_assert_eq!(c0, c1);
        prop_assert_eq!(slot_rows(&h0, cfg.d_model, &keep), slot_rows(&h1, cfg.d_model, &keep));
    }
}
