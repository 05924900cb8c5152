//! Decoupled-weight-decay Adam, an optional Lookahead wrapper and the poly schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Module, Scalar, Tensor};
use crate::registry::Registry;

/// `base_lr * (1 - step / max_iter)^power`.
pub fn poly_lr(step: u64, max_iter: u64, base_lr: f64, power: f64) -> f64 {
    if max_iter == 0 || step >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / max_iter as f64).powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn kind_known(&self) -> Result<()> {
        optimizer_registry::<f32>().get(&self.kind).map(|_| ())
    }
}

pub trait Optimizer<T: Scalar>: Send {
    fn name(&self) -> &'static str;
    /// Apply one update using the gradients currently stored in `model`.
    fn step(&mut self, model: &mut dyn Module<T>, lr: f64) -> Result<()>;
    /// Number of completed updates.
    fn steps(&self) -> u64;
    fn set_steps(&mut self, steps: u64);
    /// Named state tensors in a fixed order (moments, slow weights).
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub type OptimizerFactory<T> = fn(&dyn Module<T>, &OptimizerConfig) -> Box<dyn Optimizer<T>>;

pub fn optimizer_registry<T: Scalar>() -> Registry<OptimizerFactory<T>> {
    fn adam<T: Scalar>(model: &dyn Module<T>, cfg: &OptimizerConfig) -> Box<dyn Optimizer<T>> {
        Box::new(Adam::new(model, cfg))
    }
    fn lookahead<T: Scalar>(model: &dyn Module<T>, cfg: &OptimizerConfig) -> Box<dyn Optimizer<T>> {
        Box::new(Lookahead::new(Adam::new(model, cfg), model, cfg))
    }
    Registry::new("optimizer")
        .with("adam", adam::<T> as OptimizerFactory<T>)
        .with("adam_lookahead", lookahead::<T>)
}

pub fn build_optimizer<T: Scalar>(
    model: &dyn Module<T>,
    cfg: &OptimizerConfig,
) -> Result<Box<dyn Optimizer<T>>> {
    if !(0.0..1.0).contains(&cfg.beta1)
        || !(0.0..1.0).contains(&cfg.beta2)
        || cfg.eps <= 0.0
        || cfg.weight_decay < 0.0
    {
        return Err(Error::config("optimizer hyperparameters out of range"));
    }
    if cfg.lookahead_k == 0 || !(0.0..=1.0).contains(&cfg.lookahead_alpha) {
        return Err(Error::config("lookahead needs k >= 1 and alpha in [0, 1]"));
    }
    Ok((*optimizer_registry::<T>().get(&cfg.kind)?)(model, cfg))
}

pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    names: Vec<String>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &dyn Module<T>, cfg: &OptimizerConfig) -> Self {
        let (mut m, mut names) = (Vec::new(), Vec::new());
        model.visit_params(&mut |p| {
            m.push(Tensor::zeros(p.value.shape()));
            names.push(p.name.clone());
        });
        Self {
            v: m.clone(),
            m,
            names,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, model: &mut dyn Module<T>, lr: f64) -> Result<()> {
        // reject before touching any parameter
        let mut bad = None;
        let mut count = 0;
        model.visit_params(&mut |p| {
            count += 1;
            if bad.is_none() && !p.grad.all_finite() {
                bad = Some(p.name.clone());
            }
        });
        if let Some(param) = bad {
            return Err(Error::NonFiniteGradient {
                step: self.t,
                param,
            });
        }
        if count != self.m.len() {
            return Err(Error::dim("optimizer state", &[self.m.len()], &[count]));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        let decay = T::one() - T::from_f64_lossy(lr * self.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |p| {
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (((w, &g), mj), vj) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m)
                .zip(v)
            {
                *mj = b1 * *mj + one_b1 * g;
                *vj = b2 * *vj + one_b2 * g * g;
                *w = *w * decay - step_size * *mj / (vj.sqrt() * inv_bc2_sqrt + eps);
            }
            i += 1;
        });
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn set_steps(&mut self, steps: u64) {
        self.t = steps;
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, n) in self.names.iter().enumerate() {
            f(&format!("adam.m.{n}"), &self.m[i]);
            f(&format!("adam.v.{n}"), &self.v[i]);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, n) in self.names.iter().enumerate() {
            f(&format!("adam.m.{n}"), &mut self.m[i]);
            f(&format!("adam.v.{n}"), &mut self.v[i]);
        }
    }
}

/// Keeps slow weights and every `k` inner steps moves them `alpha` of the way
/// toward the fast weights, then resets the fast weights onto them.
pub struct Lookahead<T> {
    inner: Adam<T>,
    slow: Vec<Tensor<T>>,
    k: u64,
    alpha: f64,
}

impl<T: Scalar> Lookahead<T> {
    pub fn new(inner: Adam<T>, model: &dyn Module<T>, cfg: &OptimizerConfig) -> Self {
        let mut slow = Vec::new();
        model.visit_params(&mut |p| slow.push(p.value.clone()));
        Self {
            inner,
            slow,
            k: cfg.lookahead_k,
            alpha: cfg.lookahead_alpha,
        }
    }
}

impl<T: Scalar> Optimizer<T> for Lookahead<T> {
    fn name(&self) -> &'static str {
        "adam_lookahead"
    }

    fn step(&mut self, model: &mut dyn Module<T>, lr: f64) -> Result<()> {
        self.inner.step(model, lr)?;
        if self.inner.t.is_multiple_of(self.k) {
            let a = T::from_f64_lossy(self.alpha);
            let mut i = 0;
            let slow = &mut self.slow;
            model.visit_params_mut(&mut |p| {
                for (s, w) in slow[i].data_mut().iter_mut().zip(p.value.data_mut()) {
                    *s = *s + a * (*w - *s);
                    *w = *s;
                }
                i += 1;
            });
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.inner.t
    }

    fn set_steps(&mut self, steps: u64) {
        self.inner.t = steps;
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.inner.visit_state(f);
        for (n, s) in self.inner.names.iter().zip(&self.slow) {
            f(&format!("lookahead.slow.{n}"), s);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.inner.visit_state_mut(f);
        for (n, s) in self.inner.names.iter().zip(&mut self.slow) {
            f(&format!("lookahead.slow.{n}"), s);
        }
    }
}
