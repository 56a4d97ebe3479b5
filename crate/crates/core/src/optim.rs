//! Adam with inverse-time learning-rate decay.

use crate::error::{Error, Result};
use crate::params::{named, ParamTree};
use crate::tensor::Tensor;

/// What the decay counter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayUnit {
    /// One tick per optimizer step.
    Step,
    /// One tick per completed epoch.
    Epoch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
    pub decay_unit: DecayUnit,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay: 0.0,
            decay_unit: DecayUnit::Step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("learning rate {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} {b} not in [0, 1)"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            problems.push(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            problems.push(format!("decay {} must be non-negative", self.decay));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Moments are stored per parameter in the model's traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Completed updates; the bias corrections use `t` after increment.
    pub t: u64,
    /// Decay counter, in units of `config.decay_unit`.
    pub iterations: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            iterations: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        })
    }

    pub fn for_params<P: ParamTree<Tensor>>(config: AdamConfig, params: &P) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = named(params).iter().map(|(_, t)| t.shape().to_vec()).collect();
        Self::new(config, &shapes)
    }

    /// `η / (1 + decay · iterations)`.
    pub fn decayed_lr(&self) -> f64 {
        self.config.lr / (1.0 + self.config.decay * self.iterations as f64)
    }

    /// One update of every parameter. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} moments, {} parameters, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("adam: non-finite gradient for parameter {i}")));
            }
        }
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let t = self.t + 1;
        let lr = self.decayed_lr() * (1.0 - beta2.powf(t as f64)).sqrt() / (1.0 - beta1.powf(t as f64));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * *m / (v.sqrt() + epsilon);
            }
        }
        self.t = t;
        if self.config.decay_unit == DecayUnit::Step {
            self.iterations += 1;
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        if self.config.decay_unit == DecayUnit::Epoch {
            self.iterations += 1;
        }
    }

    /// Rounds the moments to single precision, matching checkpoint storage.
    pub fn quantize(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            *t = t.to_f32_precision();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adam(lr: f64) -> Adam {
        Adam::new(AdamConfig::new(lr), &[vec![1]]).unwrap()
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::new(1e-4);
        assert_eq!((c.beta1, c.beta2, c.epsilon), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn first_step_is_about_lr() {
        let mut adam = scalar_adam(1e-4);
        let mut w = Tensor::new([1], vec![0.0]).unwrap();
        adam.step(&mut [&mut w], &[Tensor::new([1], vec![1.0]).unwrap()]).unwrap();
        // m̂ = 1 and √v̂ = 1, so the step is η·1/(1 + ε̂/√(1-β₂)) in closed form.
        let root = (1.0f64 - 0.999).sqrt();
        let exact = 1e-4 * root / (root + 1e-8);
        assert!((-w.data()[0] - exact).abs() < 1e-18);
        assert!((-w.data()[0] - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = scalar_adam(1e-3);
        let mut w = Tensor::new([1], vec![0.25]).unwrap();
        for _ in 0..50 {
            adam.step(&mut [&mut w], &[Tensor::zeros([1])]).unwrap();
        }
        assert_eq!(w.data()[0], 0.25);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut adam = scalar_adam(1e-3);
        let mut w = Tensor::new([1], vec![0.25]).unwrap();
        let err = adam.step(&mut [&mut w], &[Tensor::new([1], vec![f64::NAN]).unwrap()]);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!((adam.t, adam.iterations, w.data()[0]), (0, 0, 0.25));
    }

    #[test]
    fn decay_reference() {
        let mut adam = scalar_adam(1e-4);
        assert_eq!(adam.decayed_lr(), 1e-4);
        adam.config.decay = 1e-4 / 40.0;
        adam.iterations = 40;
        assert!((adam.decayed_lr() - 1e-4 / (1.0 + 1e-4)).abs() < 1e-18);
        assert!((adam.decayed_lr() - 9.99900e-5).abs() < 1e-10);
    }

    #[test]
    fn epoch_unit_ticks_on_end_epoch() {
        let mut cfg = AdamConfig::new(1e-3);
        cfg.decay_unit = DecayUnit::Epoch;
        let mut adam = Adam::new(cfg, &[vec![1]]).unwrap();
        let mut w = Tensor::zeros([1]);
        adam.step(&mut [&mut w], &[Tensor::ones([1])]).unwrap();
        assert_eq!(adam.iterations, 0);
        adam.end_epoch();
        assert_eq!(adam.iterations, 1);
    }

    #[test]
    fn config_errors_are_listed_together() {
        let mut cfg = AdamConfig::new(-1.0);
        cfg.beta1 = 1.5;
        let Err(Error::Config(msg)) = cfg.validate() else { panic!() };
        assert!(msg.contains("learning rate") && msg.contains("beta1"));
    }
}
