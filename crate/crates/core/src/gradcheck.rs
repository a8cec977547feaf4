//! Central finite differences, used as an independent oracle for the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::model::ModelGraph;
use crate::tape::{GradTape, Var};
use crate::tensor::{relative_error, Tensor};

pub const DEFAULT_EPS: f32 = 1e-3;

/// Elementwise `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad<F>(mut f: F, at: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = at.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is non-finite around element {i}"
            )));
        }
        // The actual step is the f32-rounded distance, not 2·eps.
        let step = (orig + eps) as f64 - (orig - eps) as f64;
        out.push(((up - down) / step) as f32);
    }
    Ok(Tensor::from_parts(at.shape().to_vec(), out))
}

/// Checks the tape gradients of an expression against finite differences.
///
/// `build` is recorded twice: once on trainable leaves `p0..pn` holding
/// `inputs`, and once per probe on constants. A non-scalar output is reduced
/// with fixed uniform weights drawn from `seed`, and the finite-difference
/// objective is summed in f64. Returns the relative error for each input.
pub fn op_gradient_errors<F>(inputs: &[Tensor], build: F, eps: f32, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(format!("p{i}"), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out)?.shape().to_vec();
    let weights = (shape.iter().product::<usize>() > 1).then(|| {
        let mut rng = init::rng(seed);
        Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
    });
    let loss = match &weights {
        Some(w) => tape.weighted_sum(out, w.clone())?,
        None => out,
    };
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, at) in inputs.iter().enumerate() {
        let objective = |probe: &Tensor| -> Result<f64> {
            let mut t = GradTape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == i { probe.clone() } else { v.clone() }))
                .collect();
            let y = build(&mut t, &vs)?;
            let y = t.value(y)?;
            Ok(match &weights {
                Some(w) => y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum(),
                None => y.item()? as f64,
            })
        };
        let numeric = finite_diff_grad(objective, at, eps)?;
        errors.push(relative_error(&grads[&format!("p{i}")], &numeric)?);
    }
    Ok(errors)
}

/// Mean softmax cross-entropy of a graph, evaluated in f64 from its logits.
pub fn mean_cross_entropy(g: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = g.forward(x)?;
    let k = logits.shape()[1];
    let mut total = 0f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        total += lse - row[label] as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Relative error of the tape gradient of the mean cross-entropy for every
/// trainable parameter of `g`.
pub fn model_gradient_errors(g: &ModelGraph, x: &Tensor, labels: &[usize], eps: f32) -> Result<Vec<(String, f64)>> {
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let logits = g.forward_tape(&mut tape, xv)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::new();
    for name in g.trainable_names() {
        let Some(at) = g.param(&name) else { continue };
        let objective = |probe: &Tensor| {
            let mut h = g.clone();
            if let Some((_, slot)) = h.params_mut().into_iter().find(|(n, _)| *n == name) {
                *slot = probe.clone();
            }
            mean_cross_entropy(&h, x, labels)
        };
        let numeric = finite_diff_grad(objective, at, eps)?;
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::Tape(format!("no gradient for trainable '{name}'")))?;
        out.push((name, relative_error(analytic, &numeric)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5);
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, DEFAULT_EPS).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &Tensor| Ok(t.data().iter().map(|&v| (v as f64).powi(2)).sum());
        let g = finite_diff_grad(f, &x, DEFAULT_EPS).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-4);
        assert!((g.data()[1] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::full(&[4], 0.3);
        let g = finite_diff_grad(|_| Ok(7.0), &x, DEFAULT_EPS).unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn rejects_bad_eps_and_non_finite_objective() {
        let x = Tensor::full(&[2], 1.0);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, -1.0).is_err());
        let err = finite_diff_grad(|_| Ok(f64::NAN), &x, DEFAULT_EPS).unwrap_err();
        assert!(err.is_numeric());
    }
}
