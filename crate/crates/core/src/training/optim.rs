//! Softmax loss and Nesterov momentum.

use crate::error::{Error, Result};
use crate::network::{NetworkGrads, NetworkSpec};

/// `log sum_r exp(s_r) - s_label` and its gradient `softmax(s) - onehot(label)`.
pub fn softmax_loss(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= scores.len() {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    let top = crate::network::argmax(scores);
    let max = scores[top];
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    // sum of the non-maximal terms, so tiny margins survive in ln_1p
    let rest: f64 = grad.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, g)| g).sum();
    let total = 1.0 + rest;
    let loss = (max - scores[label]) + rest.ln_1p();
    for g in &mut grad {
        *g /= total;
    }
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// One Nesterov update on a flat parameter block:
/// `v <- mu v - lr (g + wd theta)`, `theta <- theta + mu v - lr (g + wd theta)`.
pub fn nesterov_update(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let step = lr * (g + weight_decay * *t);
        *v = momentum * *v - step;
        *t += momentum * *v - step;
    }
}

/// Velocity buffers mirroring [`NetworkSpec::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub step: usize,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(spec: &NetworkSpec, lr: f64) -> Self {
        Self {
            velocity: spec.params().iter().map(|(_, _, v)| vec![0.0; v.len()]).collect(),
            step: 0,
            lr,
        }
    }
}

/// Applies one Nesterov step to every trainable block of `spec`, with weight
/// decay on filters, templates and weights only, then projects back onto
/// the feasible set.
pub fn nesterov_step(
    spec: &mut NetworkSpec,
    grads: &NetworkGrads,
    state: &mut OptimizerState,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let blocks = grads.blocks();
    let lr = state.lr;
    let mut params = spec.params_mut();
    if params.len() != blocks.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameter blocks, {} gradient blocks, {} velocity buffers",
            params.len(),
            blocks.len(),
            state.velocity.len()
        )));
    }
    for (((id, trainable, theta), (gid, g)), v) in params.iter_mut().zip(&blocks).zip(&mut state.velocity) {
        if *id != *gid || theta.len() != g.len() || theta.len() != v.len() {
            return Err(Error::Shape(format!("gradient block {gid} does not match parameter {id}")));
        }
        if !*trainable {
            continue;
        }
        let wd = if id.group.decays() { weight_decay } else { 0.0 };
        nesterov_update(theta, g, v, lr, momentum, wd);
    }
    drop(params);
    spec.project_constraints();
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_scores() {
        let (loss, grad) = softmax_loss(&[0.3; 10], 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        assert!((grad[4] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn large_margin() {
        let (loss, _) = softmax_loss(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-20);
        assert!(softmax_loss(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = [0.4, -1.3, 2.2, 0.05];
        let (_, g) = softmax_loss(&s, 2).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut a = s;
            let mut b = s;
            a[i] += h;
            b[i] -= h;
            let fd = (softmax_loss(&a, 2).unwrap().0 - softmax_loss(&b, 2).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() / fd.abs().max(g[i].abs()) < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut theta = [1.0];
        let mut v = [0.0];
        for _ in 0..200 {
            let g = [theta[0]];
            nesterov_update(&mut theta, &g, &mut v, 0.1, 0.9, 0.0);
        }
        assert!(theta[0].abs() < 1e-6, "{}", theta[0]);
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut theta = [0.7, -2.0];
        let mut v = [0.0, 0.0];
        nesterov_update(&mut theta, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(theta, [0.7, -2.0]);
        let mut prev = theta;
        for _ in 0..5 {
            nesterov_update(&mut theta, &[0.0, 0.0], &mut v, 0.1, 0.0, 0.5);
            // without momentum the decay is exactly geometric: theta *= 1 - lr wd
            assert!((theta[0] - prev[0] * 0.95).abs() < 1e-15);
            assert!(theta[1].abs() < prev[1].abs());
            prev = theta;
        }
    }
}
