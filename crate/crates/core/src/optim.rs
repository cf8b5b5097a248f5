//! Adam with bias correction, and polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<E> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Scalar> OptimState<E> {
    pub fn new(params: &ParamSet<E>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Checks that the moments line up with `params` and are finite.
    pub fn validate(&self, params: &ParamSet<E>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((m, v), p) in self.m.iter().zip(&self.v).zip(params.tensors()) {
            p.expect_same_shape(m, "optimizer moment")?;
            p.expect_same_shape(v, "optimizer moment")?;
            m.check_finite("optimizer moment")?;
            v.check_finite("optimizer moment")?;
        }
        Ok(())
    }
}

impl Adam {
    /// One bias-corrected update `θ ← θ − lr·m̂/(√v̂ + ε)`. Nothing is
    /// modified when a gradient is non-finite or misshapen.
    pub fn step<E: Scalar>(
        &self,
        params: &mut ParamSet<E>,
        grads: &[Tensor<E>],
        state: &mut OptimState<E>,
        lr: f64,
    ) -> Result<()> {
        state.validate(params)?;
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (id, g) in params.ids().zip(grads) {
            params.get(id).expect_same_shape(g, "adam")?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", params.name(id))));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (E::of(self.beta1), E::of(self.beta2));
        let (one, eps) = (E::one(), E::of(self.eps));
        let correction1 = E::of(1.0 - self.beta1.powi(t));
        let correction2 = E::of(1.0 - self.beta2.powi(t));
        let lr = E::of(lr);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut state.m)
            .zip(&mut state.v)
        {
            let slices = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((theta, &g), m), v) in slices {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr0 · (1 − iter/total)^power`.
pub fn poly_decay(iter: u64, total: u64, lr0: f64, power: f64) -> Result<f64> {
    if total == 0 || iter > total {
        return Err(Error::config(format!(
            "decay step {iter} is outside 0..={total}"
        )));
    }
    Ok(lr0 * (1.0 - iter as f64 / total as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.register("theta", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut s = OptimState::new(&p);
        Adam::default().step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        assert_eq!(p.tensors()[0].item(), 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut s = OptimState::new(&p);
        Adam::default().step(&mut p, &[Tensor::scalar(1.0)], &mut s, 1e-3).unwrap();
        let moved = -p.tensors()[0].item();
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn three_steps_on_a_quadratic() {
        // f(θ) = θ², gradient 2θ, lr 0.1
        let (b1, b2, eps, lr) = (0.9f64, 0.99f64, 1e-8f64, 0.1f64);
        let mut theta = 1.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
            expected.push(theta);
        }

        let mut p = single(1.5);
        let mut s = OptimState::new(&p);
        for want in expected {
            let g = Tensor::scalar(2.0 * p.tensors()[0].item());
            Adam::default().step(&mut p, &[g], &mut s, lr).unwrap();
            assert!((p.tensors()[0].item() - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_gradients_without_mutation() {
        let mut p = single(1.0);
        let mut s = OptimState::new(&p);
        let adam = Adam::default();
        assert!(matches!(
            adam.step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(adam.step(&mut p, &[Tensor::zeros([2])], &mut s, 0.1).is_err());
        assert!(adam.step(&mut p, &[], &mut s, 0.1).is_err());
        assert_eq!(p.tensors()[0].item(), 1.0);
        assert_eq!(s, OptimState::new(&p));
    }

    proptest! {
        #[test]
        fn first_step_is_scale_free_without_eps(g in -5.0f64..5.0, c in 0.01f64..100.0) {
            prop_assume!(g.abs() > 1e-3);
            let adam = Adam { eps: 0.0, ..Adam::default() };
            let run = |grad: f64| {
                let mut p = single(0.0);
                let mut s = OptimState::new(&p);
                adam.step(&mut p, &[Tensor::scalar(grad)], &mut s, 0.01).unwrap();
                p.tensors()[0].item()
            };
            prop_assert!((run(g) - run(c * g)).abs() <= 1e-15);
        }

        #[test]
        fn decay_is_strictly_decreasing(total in 2u64..10_000, power in 0.1f64..4.0) {
            let mut prev = f64::INFINITY;
            let step = (total / 50).max(1);
            for i in (0..=total).step_by(step as usize) {
                let lr = poly_decay(i, total, 1e-4, power).unwrap();
                prop_assert!(lr < prev);
                prev = lr;
            }
        }
    }

    #[test]
    fn decay_examples() {
        assert_eq!(poly_decay(0, 100, 1e-4, 1.5).unwrap(), 1e-4);
        assert_eq!(poly_decay(100, 100, 1e-4, 1.5).unwrap(), 0.0);
        let mid = poly_decay(50, 100, 1e-4, 1.5).unwrap();
        assert!((mid - 1e-4 * 0.5f64.powf(1.5)).abs() <= 1e-12);
        assert!(poly_decay(101, 100, 1e-4, 1.5).is_err());
    }
}
