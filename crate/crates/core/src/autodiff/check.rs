use super::{Graph, Tensor, Var};

/// Largest relative discrepancy between reverse-mode gradients and central
/// finite differences of `build` over every entry of every input.
///
/// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
pub fn max_gradient_error(
    inputs: &[Tensor<f64>],
    step: f64,
    floor: f64,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(inputs);
    let grads = g.backward(out).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
        for (i, &a) in analytic.iter().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += step;
            let (gp, _, op) = eval(&shifted);
            shifted[k].data_mut()[i] -= 2.0 * step;
            let (gm, _, om) = eval(&shifted);
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * step);
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
