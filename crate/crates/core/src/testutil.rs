//! Central finite-difference oracle shared by unit tests.

use crate::{Rng, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every entry of
/// every input. `f` must build a scalar from the given leaves.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |probe: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[k], input.numel());
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}
