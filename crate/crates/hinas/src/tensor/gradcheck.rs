//! Central-difference gradient verification.
//!
//! The numeric oracle for every differentiable operation: re-evaluates the
//! loss at `x ± h` per checked element and compares `(f(x+h) - f(x-h)) / 2h`
//! against the analytic gradient recorded by one backward pass. Meant to run
//! at f64, where the truncation error of the central difference sits far
//! below the tolerances asserted by the tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Param, Tape, Tensor};
use crate::scalar::Scalar;

/// Outcome of a gradient check over a set of parameters.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error seen, with `max(|analytic|, |numeric|, 1)` as
    /// the denominator (absolute comparison below unit scale).
    pub max_rel_err: f64,
    /// Number of elements compared.
    pub checked: usize,
    /// `(param name, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max rel err {:.3e} >= {:.1e} at {:?} ({} checked)",
            self.max_rel_err,
            tol,
            self.worst,
            self.checked
        );
    }
}

/// Checks the gradients of `params` under `loss_fn`.
///
/// `loss_fn` must rebuild the scalar loss from the current parameter values on
/// the given tape; it is called once recording (for the analytic gradients)
/// and twice per checked element without recording. `samples_per_param`
/// limits how many elements of each parameter are probed (seeded choice);
/// `None` checks all of them.
pub fn grad_check<F: Scalar>(
    params: &[Param<F>],
    step: f64,
    samples_per_param: Option<usize>,
    seed: u64,
    mut loss_fn: impl FnMut(&mut Tape<F>) -> Tensor<F>,
) -> GradCheck {
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape);
    tape.backward(&loss).expect("grad_check loss must be tracked");
    let analytic: Vec<Vec<F>> = params.iter().map(|p| p.grad()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = F::from_f64(step);
    let mut result = GradCheck { max_rel_err: 0.0, checked: 0, worst: None };
    for (p, grads) in params.iter().zip(&analytic) {
        let n = p.numel();
        let indices: Vec<usize> = match samples_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let original = p.value()[idx];
            let mut eval_at = |v: F| -> f64 {
                p.update_value(|value, _| value[idx] = v);
                let mut t = Tape::inference();
                loss_fn(&mut t).item().to_f64()
            };
            let plus = eval_at(original + h);
            let minus = eval_at(original - h);
            p.update_value(|value, _| value[idx] = original);
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[idx].to_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            result.checked += 1;
            if err > result.max_rel_err {
                result.max_rel_err = err;
                result.worst = Some((p.name(), idx, a, numeric));
            }
        }
    }
    result
}
