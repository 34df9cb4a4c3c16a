use rand::seq::index::sample;

use crate::error::{Error, Result};

use super::seeded;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: Adam,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            config: Adam::default(),
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing was changed.
    SkippedNonFinite,
}

/// One Adam update of `params` in place.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::domain(format!(
            "optimizer shape mismatch: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let Adam { beta1, beta2, eps } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(StepOutcome::Applied)
}

/// Worst relative error between analytic and central-difference gradients.
///
/// `f` returns `(loss, gradient)`. Up to `coords` coordinates are drawn
/// without replacement (all of them when the vector is shorter). The error for
/// one coordinate is `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64, coords: usize, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    let mut rng = seeded(seed);
    let picks = sample(&mut rng, params.len(), coords.min(params.len()));
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in picks {
        work[i] = params[i] + eps;
        let up = f(&work).0;
        work[i] = params[i] - eps;
        let down = f(&work).0;
        work[i] = params[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3);
        sgd_step(&mut p, &[0.0; 3], &mut st, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        let out = sgd_step(&mut p, &[f64::NAN, 1.0], &mut st, 0.1).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.t, 0);
        assert!(sgd_step(&mut p, &[1.0], &mut st, 0.1).is_err());
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut w = vec![1.0];
        let mut st = AdamState::new(1);
        let mut prev = 1.0;
        for _ in 0..100 {
            let g = vec![2.0 * w[0]];
            sgd_step(&mut w, &g, &mut st, 0.001).unwrap();
            let f = w[0] * w[0];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn linear_loss_checks_exactly() {
        let c: Vec<f64> = (0..80).map(|i| i as f64 * 0.3 - 7.0).collect();
        let f = |p: &[f64]| (p.iter().zip(&c).map(|(a, b)| a * b).sum(), c.clone());
        let p = vec![0.5; 80];
        assert!(grad_check(f, &p, 1e-5, 60, 1) < 1e-8);
    }
}
