use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type G = Graph<f64>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reverse-mode gradients of `build` against central differences (step
/// 1e-5). Returns the max relative error, with magnitudes floored at 1e-3.
fn fd_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut G, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = G::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(inputs);
    let grads = g.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (gp, _, op) = eval(&plus);
            let (gm, _, om) = eval(&minus);
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Weighted sum to reduce any tensor to a scalar with a nontrivial upstream
/// gradient.
fn probe(g: &mut G, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn cosine_of_self_is_one() {
    let mut g = G::new();
    let x = g.param(Tensor::new(vec![1, 4], vec![0.3, -2.0, 5.0, 1e-3]).unwrap());
    let c = g.cosine_similarity(x, x).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-12);
}

#[test]
fn stop_gradient_blocks() {
    let mut g = G::new();
    let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let w = g.param(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
    let sx = g.stop_gradient(x);
    let p = g.mul(sx, w).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, 3.0]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = G::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 5]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 5]"));
    assert!(g.add(a, b).is_err());
}

#[test]
fn softmax_rows_and_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = G::new();
    let mut t = rand_tensor(&mut rng, &[5, 7]);
    for r in 0..5 {
        t.data_mut()[r * 7 + 2] += MASKED_LOGIT;
    }
    let x = g.constant(t);
    let y = g.softmax_lastdim(x);
    for r in 0..5 {
        let row = g.value(y).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(row[2], 0.0);
    }
    let mut g32 = Graph::<f32>::new();
    let x32 = g32.constant(Tensor::new(vec![1, 3], vec![0.5, -0.25 + MASKED_LOGIT as f32, 2.0]).unwrap());
    let y32 = g32.softmax_lastdim(x32);
    assert_eq!(g32.value(y32).data()[1], 0.0);
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = G::new();
    let mut t = rand_tensor(&mut rng, &[6, 16]);
    for v in t.data_mut() {
        *v = *v * 30.0 + 7.0;
    }
    let x = g.constant(t);
    let y = g.layer_norm(x, 1e-12);
    for r in 0..6 {
        let row = g.value(y).row(r);
        let mu = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn dropout_is_inverted_and_seeded() {
    let mut g = G::new();
    let x = g.constant(Tensor::filled(&[1000], 1.0));
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let y = g.dropout(x, 0.25, &mut r1);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    let kept = vals.iter().filter(|&&v| v > 0.0).count();
    assert!((650..850).contains(&kept), "{kept}");
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let z = g.dropout(x, 0.25, &mut r2);
    assert_eq!(g.value(y), g.value(z));
    let mut r3 = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(g.dropout(x, 0.0, &mut r3), x);
}

#[test]
fn gather_and_lookup_bounds() {
    let mut g = G::new();
    let t = g.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let r = g.embedding_lookup(t, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(r).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    assert!(g.gather_rows(t, &[3]).is_err());
    let l = g.sum(r);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn zero_norm_cosine_errors() {
    let mut g = G::new();
    let a = g.constant(Tensor::zeros(&[1, 3]));
    let b = g.constant(Tensor::filled(&[1, 3], 1.0));
    assert!(matches!(g.cosine_similarity(a, b), Err(AutodiffError::ZeroNorm { .. })));
}

type Builder = Box<dyn Fn(&mut G, &[Var]) -> Var>;

/// Small graphs covering every differentiable op.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(Vec<Tensor<f64>>, Builder)> {
    let m = rng.random_range(1..4);
    let k = rng.random_range(1..5);
    let n = rng.random_range(2..5);
    let s = rng.random::<u64>();
    vec![
        (
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                probe(g, y, s)
            }),
        ),
        (
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])],
            Box::new(move |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let b = g.mul(a, v[1]).unwrap();
                let c = g.sub(b, v[0]).unwrap();
                let d = g.add_bias(c, v[2]).unwrap();
                let e = g.mul_bias(d, v[2]).unwrap();
                let f = g.scale(e, 0.7);
                let h = g.add_scalar(f, 0.3);
                probe(g, h, s)
            }),
        ),
        (
            vec![rand_tensor(rng, &[m, n])],
            Box::new(move |g, v| {
                let t = g.transpose(v[0]).unwrap();
                let r = g.reshape(t, vec![1, m * n]).unwrap();
                let q = g.mean(r).unwrap();
                let rs = g.row_sum(v[0]);
                let p = probe(g, rs, s);
                let sum = g.add(q, p).unwrap();
                let tot = g.sum(v[0]);
                g.add(sum, tot).unwrap()
            }),
        ),
        (
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, 2]), rand_tensor(rng, &[2, n])],
            Box::new(move |g, v| {
                let c1 = g.concat(&[v[0], v[1]], 1).unwrap();
                let sl = g.slice(c1, 1, 1, n + 1).unwrap();
                let c0 = g.concat(&[sl, v[2]], 0).unwrap();
                let sr = g.slice(c0, 0, 1, m + 2).unwrap();
                let gr = g.gather_rows(sr, &[0, m, 0]).unwrap();
                probe(g, gr, s)
            }),
        ),
        (
            vec![rand_tensor(rng, &[m, n])],
            Box::new(move |g, v| {
                let a = g.softmax_lastdim(v[0]);
                let b = g.log_softmax_lastdim(v[0]);
                let c = g.add(a, b).unwrap();
                probe(g, c, s)
            }),
        ),
        (
            vec![rand_tensor(rng, &[m, n + 1])],
            Box::new(move |g, v| {
                let a = g.layer_norm(v[0], 1e-5);
                let b = g.gelu(a);
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let c = g.dropout(b, 0.3, &mut r);
                probe(g, c, s)
            }),
        ),
        (
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
            Box::new(move |g, v| {
                let a = g.mse(v[0], v[1]).unwrap();
                let c = g.cosine_similarity(v[0], v[1]).unwrap();
                let p = probe(g, c, s);
                let nr = g.normalize_rows(v[1]).unwrap();
                let q = probe(g, nr, s ^ 1);
                let t = g.add(a, p).unwrap();
                g.add(t, q).unwrap()
            }),
        ),
        (
            vec![rand_tensor(rng, &[4, n]), rand_tensor(rng, &[n, 3])],
            Box::new(move |g, v| {
                let e = g.embedding_lookup(v[0], &[3, 1, 3]).unwrap();
                let h = g.matmul(e, v[1]).unwrap();
                let z = g.mul(h, h).unwrap();
                probe(g, z, s)
            }),
        ),
    ]
}

#[test]
fn reverse_mode_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut graphs = 0;
    for _ in 0..3 {
        for (inputs, build) in op_cases(&mut rng) {
            worst = worst.max(fd_check(&inputs, build.as_ref()));
            graphs += 1;
        }
    }
    assert!(graphs >= 20);
    assert!(worst < 1e-4, "max relative error {worst}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = G::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = g.softmax_lastdim(x);
        for r in 0..3 {
            prop_assert!((g.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
