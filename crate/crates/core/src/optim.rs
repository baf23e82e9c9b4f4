//! RMSProp and step learning-rate schedules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layer::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<S> {
    /// Mean-square gradient accumulators keyed by parameter name.
    pub accumulators: BTreeMap<String, Vec<S>>,
    pub decay: f64,
    pub eps: f64,
    pub lr: f64,
    pub steps: u64,
}

impl<S: Scalar> RmsProp<S> {
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        Self::with(lr, Self::DEFAULT_DECAY, Self::DEFAULT_EPS)
    }

    pub fn with(lr: f64, decay: f64, eps: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "decay must lie in (0,1)");
        assert!(eps > 0.0 && lr > 0.0);
        RmsProp {
            accumulators: BTreeMap::new(),
            decay,
            eps,
            lr,
            steps: 0,
        }
    }

    /// One update over every parameter of `params`, then clears gradients.
    ///
    /// Fails without touching anything if some parameter lacks a gradient.
    pub fn step<P: Parameters<S> + ?Sized>(&mut self, params: &mut P) -> Result<()> {
        let mut missing = None;
        params.visit_params(&mut |name, t| {
            if missing.is_none() && t.grad().is_none() {
                missing = Some(name);
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient(name));
        }
        let (decay, eps, lr) = (S::of(self.decay), S::of(self.eps), S::of(self.lr));
        let one = S::one();
        let accs = &mut self.accumulators;
        params.visit_params_mut(&mut |name, t| {
            let g = t.take_grad().expect("checked above");
            let acc = accs.entry(name).or_insert_with(|| vec![S::zero(); g.len()]);
            for ((p, a), &gi) in t.values_mut().iter_mut().zip(acc.iter_mut()).zip(&g) {
                *a = decay * *a + (one - decay) * gi * gi;
                *p -= lr * gi / (a.sqrt() + eps);
            }
        });
        self.steps += 1;
        Ok(())
    }
}

/// Several parameter owners stepped as one set; names must not collide.
pub struct ParamGroup<'p, S>(pub Vec<&'p mut dyn Parameters<S>>);

impl<S: Scalar> Parameters<S> for ParamGroup<'_, S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for p in &self.0 {
            p.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for p in &mut self.0 {
            p.visit_params_mut(f);
        }
    }
}

/// Learning rate multiplied by `gamma` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub gamma: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            gamma: 1.0,
            milestones: Vec::new(),
        }
    }

    /// Decay by `gamma` every `every` epochs, up to `epochs`.
    pub fn every(base: f64, gamma: f64, every: usize, epochs: usize) -> Self {
        let milestones = if every == 0 {
            Vec::new()
        } else {
            (1..).map(|k| k * every).take_while(|&e| e < epochs).collect()
        };
        LrSchedule { base, gamma, milestones }
    }

    /// Single decay at two thirds of a phase of `epochs` epochs.
    pub fn two_thirds(base: f64, gamma: f64, epochs: usize) -> Self {
        let m = (2 * epochs) / 3;
        LrSchedule {
            base,
            gamma,
            milestones: if m > 0 && m < epochs { vec![m] } else { Vec::new() },
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor<f64>);

    impl Parameters<f64> for One {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<f64>)) {
            f("p".into(), &self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
            f("p".into(), &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_accumulator() {
        let mut p = One(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut opt = RmsProp::new(0.01);
        p.0.set_grad(vec![1.0, 1.0]);
        opt.step(&mut p).unwrap();
        let before = p.0.values().to_vec();
        let acc_before = opt.accumulators["p"].clone();
        p.0.set_grad(vec![0.0, 0.0]);
        opt.step(&mut p).unwrap();
        assert_eq!(p.0.values(), &before[..]);
        for (a, b) in opt.accumulators["p"].iter().zip(&acc_before) {
            assert!((a - 0.99 * b).abs() < 1e-15);
        }
        assert!(p.0.grad().is_none());
        assert_eq!(opt.steps, 2);
    }

    #[test]
    fn constant_gradient_step_approaches_lr_sign() {
        // Accumulator converges to g^2, so the step tends to lr * g / (|g| + eps).
        let g = -0.37;
        let lr = 0.01;
        let mut p = One(Tensor::scalar(0.0));
        let mut opt = RmsProp::new(lr);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.0.values()[0];
            p.0.set_grad(vec![g]);
            opt.step(&mut p).unwrap();
            last = p.0.values()[0] - before;
        }
        let fixed = lr * 0.37 / (0.37 + 1e-8);
        assert!((last - fixed).abs() < 1e-12, "{last} vs {fixed}");
    }

    #[test]
    fn missing_gradient_rejected_without_side_effects() {
        let mut p = One(Tensor::scalar(3.0));
        let mut opt = RmsProp::new(0.1);
        let err = opt.step(&mut p).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "p"));
        assert_eq!(opt.steps, 0);
        assert_eq!(p.0.values(), &[3.0]);
    }

    #[test]
    fn step_schedule_matches_every_thirty() {
        let s = LrSchedule::every(0.01, 0.1, 30, 90);
        assert_eq!(s.milestones, vec![30, 60]);
        assert!((s.lr(0) - 0.01).abs() < 1e-15);
        assert!((s.lr(29) - 0.01).abs() < 1e-15);
        assert!((s.lr(30) - 0.001).abs() < 1e-15);
        assert!((s.lr(89) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn two_thirds_schedule() {
        let s = LrSchedule::two_thirds(0.01, 0.1, 10);
        assert_eq!(s.milestones, vec![6]);
        assert!((s.lr(6) - 0.001).abs() < 1e-15);
    }
}
