//! SGD with momentum, classic Adam, and the cosine learning-rate schedule.
//!
//! Both optimizers key their state by parameter name so it can be carried
//! through checkpoints; steps reject non-finite gradients before touching
//! any value, leaving the parameters untouched on failure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::scalar::Scalar;
use crate::tensor::Param;

/// `v ← momentum·v + g + weight_decay·p`, then `p ← p − lr·v`.
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<F>>,
}

/// Serializable optimizer state: momentum buffers in 64-bit form.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &[Param<F>], lr: f64) -> Result<(), NumericError> {
        check_finite(params)?;
        let m = F::from_f64(self.momentum);
        let wd = F::from_f64(self.weight_decay);
        let lr = F::from_f64(lr);
        for p in params {
            let v = self
                .velocity
                .entry(p.name())
                .or_insert_with(|| vec![F::zero(); p.numel()]);
            p.update_value(|value, grad| {
                for ((v, &g), x) in v.iter_mut().zip(grad).zip(value) {
                    *v = m * *v + g + wd * *x;
                    *x -= lr * *v;
                }
            });
        }
        Ok(())
    }

    pub fn state(&self) -> SgdState {
        SgdState {
            velocity: self
                .velocity
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|&x| Scalar::to_f64(x)).collect()))
                .collect(),
        }
    }

    pub fn load_state(&mut self, state: &SgdState) {
        self.velocity = state
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|&x| F::from_f64(x)).collect()))
            .collect();
    }
}

/// Bias-corrected Adam with the weight-decay term added to the gradient
/// (plain L2 regularization, not the decoupled variant).
pub struct Adam<F> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: BTreeMap<String, Vec<F>>,
    second: BTreeMap<String, Vec<F>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Param<F>]) -> Result<(), NumericError> {
        check_finite(params)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let nb1 = F::from_f64(1.0 - self.beta1);
        let nb2 = F::from_f64(1.0 - self.beta2);
        let wd = F::from_f64(self.weight_decay);
        let scale = F::from_f64(self.lr / c1);
        let root = F::from_f64(1.0 / c2.sqrt());
        let eps = F::from_f64(self.eps);
        for p in params {
            let m = self.first.entry(p.name()).or_insert_with(|| vec![F::zero(); p.numel()]);
            let v = self.second.entry(p.name()).or_insert_with(|| vec![F::zero(); p.numel()]);
            p.update_value(|value, grad| {
                for (((m, v), &g), x) in m.iter_mut().zip(v.iter_mut()).zip(grad).zip(value) {
                    let g = g + wd * *x;
                    *m = b1 * *m + nb1 * g;
                    *v = b2 * *v + nb2 * g * g;
                    *x -= scale * *m / ((*v).sqrt() * root + eps);
                }
            });
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState {
        let dump = |map: &BTreeMap<String, Vec<F>>| {
            map.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|&x| Scalar::to_f64(x)).collect()))
                .collect()
        };
        AdamState { t: self.t, first: dump(&self.first), second: dump(&self.second) }
    }

    pub fn load_state(&mut self, state: &AdamState) {
        let load = |map: &BTreeMap<String, Vec<f64>>| {
            map.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|&x| F::from_f64(x)).collect()))
                .collect()
        };
        self.t = state.t;
        self.first = load(&state.first);
        self.second = load(&state.second);
    }
}

fn check_finite<F: Scalar>(params: &[Param<F>]) -> Result<(), NumericError> {
    for p in params {
        if !p.with_grad(|g| g.iter().all(|v| v.is_finite())) {
            return Err(NumericError::NonFiniteGrad { name: p.name() });
        }
    }
    Ok(())
}

/// Rescales the gradients of `params` in place so their joint L2 norm is at
/// most `max_norm`, and returns the norm measured before clipping. Gradients
/// already within the budget are left untouched, so clipping never changes a
/// well-behaved step.
pub fn clip_grad_norm<F: Scalar>(params: &[Param<F>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let mut sum_sq = 0.0f64;
    for p in params {
        sum_sq += p.with_grad(|g| {
            g.iter()
                .map(|&v| {
                    let x = Scalar::to_f64(v);
                    x * x
                })
                .sum::<f64>()
        });
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for p in params {
            p.scale_grad(scale);
        }
    }
    norm
}

/// Half-cosine decay from `lr_max` at epoch 0 to `lr_min` at `epochs_max`.
pub fn cosine_lr(epoch: usize, epochs_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(epochs_max > 0 && epoch <= epochs_max, "epoch {epoch} outside 0..={epochs_max}");
    let phase = std::f64::consts::PI * epoch as f64 / epochs_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{mul, sum_all};
    use crate::tensor::{Shape, Tape};

    /// Accumulates `sum(p · c)` so the parameter's gradient equals `c`.
    fn push_grad(p: &Param<f64>, c: &[f64]) {
        let mut tape = Tape::new();
        let x = p.leaf(&mut tape);
        let weights = tape.constant(c.to_vec(), x.shape());
        let weighted = mul(&mut tape, &x, &weights);
        let loss = sum_all(&mut tape, &weighted);
        tape.backward(&loss).unwrap();
    }

    fn shape4() -> Shape {
        Shape::new(1, 1, 1, 4)
    }

    #[test]
    fn plain_sgd_subtracts_the_gradient() {
        let p = Param::new("p", shape4(), vec![1.0, 2.0, 3.0, 4.0]);
        let g = [0.5, -0.25, 0.0, 1.0];
        push_grad(&p, &g);
        Sgd::new(0.0, 0.0).step(&[p.clone()], 1.0).unwrap();
        assert_eq!(p.value(), vec![0.5, 2.25, 3.0, 3.0]);
    }

    #[test]
    fn two_momentum_steps_accumulate_2_9_gradients() {
        let p = Param::new("p", shape4(), vec![0.0; 4]);
        let g = [1.0, -2.0, 0.5, 3.0];
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            p.zero_grad();
            push_grad(&p, &g);
            opt.step(&[p.clone()], 0.1).unwrap();
        }
        for (x, gi) in p.value().iter().zip(g) {
            assert!((x - (-0.1 * gi * 2.9)).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_rescales_only_oversized_gradients() {
        let p = Param::new("p", shape4(), vec![0.0; 4]);
        let q = Param::new("q", shape4(), vec![0.0; 4]);
        push_grad(&p, &[3.0, 0.0, 0.0, 0.0]);
        push_grad(&q, &[0.0, 4.0, 0.0, 0.0]);
        let both = [p.clone(), q.clone()];

        // Joint norm 5 is inside a budget of 10: values untouched.
        assert!((clip_grad_norm(&both, 10.0) - 5.0).abs() < 1e-12);
        assert_eq!(p.grad(), vec![3.0, 0.0, 0.0, 0.0]);
        assert_eq!(q.grad(), vec![0.0, 4.0, 0.0, 0.0]);

        // A budget of 1 shrinks every gradient by the same 1/5 factor.
        assert!((clip_grad_norm(&both, 1.0) - 5.0).abs() < 1e-12);
        assert!((p.grad()[0] - 0.6).abs() < 1e-12);
        assert!((q.grad()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_follows_the_scalar_reference() {
        // Quadratic pull toward a target: grad = p − target at every step.
        let target = [0.3, -1.2, 2.0, 0.7];
        let p = Param::new("p", shape4(), vec![1.0, 1.0, -1.0, 0.0]);
        let mut opt = Sgd::new(0.9, 3e-4);
        let mut reference = [1.0, 1.0, -1.0, 0.0f64];
        let mut vel = [0.0f64; 4];
        for _ in 0..100 {
            p.zero_grad();
            let g: Vec<f64> = p.value().iter().zip(target).map(|(x, t)| x - t).collect();
            push_grad(&p, &g);
            opt.step(&[p.clone()], 0.05).unwrap();
            for i in 0..4 {
                let grad = reference[i] - target[i];
                vel[i] = 0.9 * vel[i] + grad + 3e-4 * reference[i];
                reference[i] -= 0.05 * vel[i];
            }
        }
        for (x, r) in p.value().iter().zip(reference) {
            assert!((x - r).abs() < 1e-10, "{x} vs {r}");
        }
    }

    #[test]
    fn adam_leaves_params_alone_without_gradients() {
        let p = Param::new("p", shape4(), vec![1.0, -2.0, 3.0, 0.5]);
        push_grad(&p, &[0.0; 4]);
        let before = p.value();
        Adam::new(1e-3, 0.0).step(&[p.clone()]).unwrap();
        assert_eq!(p.value(), before);
    }

    #[test]
    fn first_adam_step_is_a_bounded_signed_move() {
        let p = Param::new("p", shape4(), vec![0.0; 4]);
        let g = [5.0, -0.01, 2.0, -7.0];
        push_grad(&p, &g);
        Adam::new(1e-3, 0.0).step(&[p.clone()]).unwrap();
        for (x, gi) in p.value().iter().zip(g) {
            let delta = -x; // started from zero
            assert!(delta.abs() <= 1e-3 + 1e-12, "step {delta} exceeds lr");
            assert!(delta.abs() > 0.9e-3, "step {delta} should be near lr");
            assert_eq!(delta.signum(), gi.signum());
        }
    }

    #[test]
    fn adam_follows_the_scalar_reference() {
        let target = [0.3, -1.2, 2.0, 0.7];
        let p = Param::new("p", shape4(), vec![1.0, 1.0, -1.0, 0.0]);
        let mut opt = Adam::new(1e-2, 1e-3);
        let mut reference = [1.0, 1.0, -1.0, 0.0f64];
        let (mut m, mut v) = ([0.0f64; 4], [0.0f64; 4]);
        for t in 1..=100 {
            p.zero_grad();
            let g: Vec<f64> = p.value().iter().zip(target).map(|(x, t)| x - t).collect();
            push_grad(&p, &g);
            opt.step(&[p.clone()]).unwrap();
            for i in 0..4 {
                let grad = (reference[i] - target[i]) + 1e-3 * reference[i];
                m[i] = 0.9 * m[i] + 0.1 * grad;
                v[i] = 0.999 * v[i] + 0.001 * grad * grad;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                reference[i] -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (x, r) in p.value().iter().zip(reference) {
            assert!((x - r).abs() < 1e-10, "{x} vs {r}");
        }
    }

    #[test]
    fn non_finite_gradients_abort_without_touching_values() {
        let p = Param::new("spoiled", shape4(), vec![1.0; 4]);
        push_grad(&p, &[1.0, f64::INFINITY, 0.0, 0.0]);
        let before = p.value();
        let err = Sgd::new(0.9, 0.0).step(&[p.clone()], 0.1);
        assert!(matches!(err, Err(NumericError::NonFiniteGrad { ref name }) if name == "spoiled"));
        assert_eq!(p.value(), before);
        let err = Adam::new(1e-3, 0.0).step(&[p.clone()]);
        assert!(matches!(err, Err(NumericError::NonFiniteGrad { .. })));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let run = |resume: bool| {
            let p = Param::new("p", shape4(), vec![1.0, -1.0, 0.5, 2.0]);
            let mut opt = Sgd::new(0.9, 1e-4);
            let mut snapshot = None;
            for t in 0..5 {
                if t == 3 {
                    if resume {
                        // Swap in a freshly loaded optimizer mid-run.
                        let mut fresh = Sgd::new(0.9, 1e-4);
                        fresh.load_state(&opt.state());
                        opt = fresh;
                    }
                    snapshot = Some(p.value());
                }
                p.zero_grad();
                let g: Vec<f64> = p.value().iter().map(|x| x * 0.5 - 0.1).collect();
                push_grad(&p, &g);
                opt.step(&[p.clone()], 0.05).unwrap();
            }
            (snapshot.unwrap(), p.value())
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn cosine_schedule_hits_the_published_endpoints() {
        assert!((cosine_lr(0, 100, 0.025, 0.001) - 0.025).abs() < 1e-15);
        assert!((cosine_lr(100, 100, 0.025, 0.001) - 0.001).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.025, 0.001) - 0.013).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for e in 0..=30 {
            let lr = cosine_lr(e, 30, 0.05, 0.0);
            assert!(lr <= last && lr >= 0.0);
            last = lr;
        }
    }
}
