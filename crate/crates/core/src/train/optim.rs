//! Adam with L2 weight decay and step-decay learning-rate schedules.

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePolicy {
    pub initial_lr: f64,
    pub decay_fraction: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
}

impl SchedulePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction < 1.0) {
            return Err(Error::Config(format!(
                "lr decay fraction must be in (0, 1), got {}",
                self.decay_fraction
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `initial_lr * (1 - decay_fraction)^floor(epoch / decay_every)`.
pub fn schedule_lr(policy: &SchedulePolicy, epoch: usize) -> f64 {
    let k = (epoch / policy.decay_every) as i32;
    policy.initial_lr * (1.0 - policy.decay_fraction).powi(k)
}

/// First and second moments for every parameter of a list of stores.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<Tensor<T>>>,
    pub v: Vec<Vec<Tensor<T>>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(stores: &[&ParamStore<T>]) -> Self {
        let zeros = |s: &&ParamStore<T>| s.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: stores.iter().map(zeros).collect(),
            v: stores.iter().map(zeros).collect(),
            step: 0,
        }
    }

    fn check_shapes(&self, stores: &[&mut ParamStore<T>]) -> Result<()> {
        let ok = self.m.len() == stores.len()
            && self.v.len() == stores.len()
            && stores.iter().zip(self.m.iter().zip(&self.v)).all(|(s, (m, v))| {
                m.len() == s.len()
                    && v.len() == s.len()
                    && s.iter()
                        .zip(m.iter().zip(v))
                        .all(|((_, p), (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("optimizer moments do not match the parameters".into()))
        }
    }
}

/// One Adam step over every parameter: `g += weight_decay * theta`, then the
/// bias-corrected update. Gradients are zeroed afterwards. A non-finite
/// gradient aborts before any parameter is touched.
pub fn adam_step<T: Real>(
    stores: &mut [&mut ParamStore<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.check_shapes(stores)?;
    for s in stores.iter() {
        s.check_grads()?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let c1 = T::lit(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::lit(1.0 - ADAM_BETA2.powi(t));
    let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(ADAM_EPS));
    let one = T::one();
    for ((store, ms), vs) in stores.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for ((p, m), v) in store.iter_mut().zip(ms).zip(vs) {
            let theta = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..theta.len() {
                let g = grad[i] + wd * theta[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (one - b1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.value.all_finite() {
                return Err(Error::Numeric(format!("parameter `{}` became non-finite", p.name)));
            }
        }
        store.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::from_f64(&[vals.len()], vals));
        s.get_mut(id).grad = Tensor::from_f64(&[grads.len()], grads);
        s
    }

    /// Textbook scalar Adam with L2 added to the gradient.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
            let g = g + wd * theta;
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mh = self.m / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v / (1.0 - 0.999f64.powi(self.t));
            theta - lr * mh / (vh.sqrt() + 1e-8)
        }
    }

    #[test]
    fn schedules() {
        let q = SchedulePolicy {
            initial_lr: 0.001,
            decay_fraction: 0.05,
            decay_every: 5,
            total_epochs: 300,
        };
        assert_eq!(schedule_lr(&q, 0), 0.001);
        assert!((schedule_lr(&q, 10) - 0.0009025).abs() < 1e-15);
        assert_eq!(schedule_lr(&q, 4), 0.001);
        let h = SchedulePolicy {
            decay_fraction: 0.25,
            decay_every: 16,
            ..q.clone()
        };
        assert!((schedule_lr(&h, 16) - 0.00075).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..400 {
            let lr = schedule_lr(&h, e);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = store(&[0.3, -1.5, 2.0], &[0.0, 0.0, 0.0]);
        let mut st = OptimizerState::new(&[&s]);
        for _ in 0..3 {
            adam_step(&mut [&mut s], &mut st, 0.001, 0.0).unwrap();
        }
        assert_eq!(s.get(crate::nn::ParamId(0)).value.data(), &[0.3, -1.5, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0], &[0.5]);
        let mut st = OptimizerState::new(&[&s]);
        adam_step(&mut [&mut s], &mut st, 0.001, 0.0).unwrap();
        let theta = s.get(crate::nn::ParamId(0)).value.data()[0];
        // m_hat = 0.5, v_hat = 0.25, so the step is lr * 0.5 / (0.5 + 1e-8).
        assert!((theta - (1.0 - 0.001 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!(s.get(crate::nn::ParamId(0)).grad.data()[0] == 0.0);
    }

    #[test]
    fn matches_scalar_reference() {
        let init = [0.7, -0.2, 1.3];
        let grads = [[0.4, -1.1, 0.02], [0.35, 0.9, -0.3]];
        let mut s = store(&init, &[0.0; 3]);
        let mut st = OptimizerState::new(&[&s]);
        let mut refs: Vec<ScalarAdam> = (0..3).map(|_| ScalarAdam { m: 0.0, v: 0.0, t: 0 }).collect();
        let mut expect = init.to_vec();
        for g in grads {
            s.get_mut(crate::nn::ParamId(0)).grad = Tensor::from_f64(&[3], &g);
            adam_step(&mut [&mut s], &mut st, 0.001, 5e-5).unwrap();
            for i in 0..3 {
                expect[i] = refs[i].step(expect[i], g[i], 0.001, 5e-5);
            }
        }
        for (a, b) in s.get(crate::nn::ParamId(0)).value.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(&[1.0, 2.0], &[0.1, f64::NAN]);
        let mut st = OptimizerState::new(&[&s]);
        let e = adam_step(&mut [&mut s], &mut st, 0.001, 0.0).unwrap_err();
        assert!(e.to_string().contains("theta"), "{e}");
        assert!(e.is_numeric());
        assert_eq!(s.get(crate::nn::ParamId(0)).value.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn quadratic_loss_decreases() {
        // loss = (theta - 3)^2
        let mut s = store(&[0.0], &[0.0]);
        let mut st = OptimizerState::new(&[&s]);
        let loss = |t: f64| (t - 3.0) * (t - 3.0);
        let t0 = s.get(crate::nn::ParamId(0)).value.data()[0];
        s.get_mut(crate::nn::ParamId(0)).grad = Tensor::from_f64(&[1], &[2.0 * (t0 - 3.0)]);
        adam_step(&mut [&mut s], &mut st, 0.001, 0.0).unwrap();
        assert!(loss(s.get(crate::nn::ParamId(0)).value.data()[0]) < loss(t0));
    }

    #[test]
    fn moment_shape_mismatch_is_rejected() {
        let mut a = store(&[1.0, 2.0], &[0.0, 0.0]);
        let b = store(&[1.0], &[0.0]);
        let mut st = OptimizerState::new(&[&b]);
        assert!(matches!(
            adam_step(&mut [&mut a], &mut st, 0.001, 0.0),
            Err(Error::Shape(_))
        ));
    }
}
