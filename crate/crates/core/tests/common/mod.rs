//! Finite-difference harness for modules that own their parameters, plus shared fixtures.
#![allow(dead_code)]

pub mod fixtures;

use cmscan::numerics::gradcheck::{grad_check, GradCheckReport, DEFAULT_DELTA};
use cmscan::numerics::{Module, Rng, Tensor};

pub fn param_values<M: Module<f64> + ?Sized>(m: &M) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p.value.clone()));
    out
}

pub fn param_grads<M: Module<f64> + ?Sized>(m: &M) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p.grad.clone()));
    out
}

pub fn set_params<M: Module<f64> + ?Sized>(m: &mut M, values: &[Tensor<f64>]) {
    let mut i = 0;
    m.visit_params_mut(&mut |p| {
        p.value = values[i].clone();
        i += 1;
    });
}

pub fn zero_grads<M: Module<f64> + ?Sized>(m: &mut M) {
    m.visit_params_mut(&mut |p| p.zero_grad());
}

/// Check input and parameter gradients of `m` together.
///
/// `loss` runs a forward pass and returns the scalar objective; `analytic`
/// runs forward and backward and returns the input gradients, leaving
/// parameter gradients accumulated on `m`.
pub fn check_module<M, L, A>(
    m: &mut M,
    inputs: &[Tensor<f64>],
    mut loss: L,
    analytic: A,
) -> GradCheckReport
where
    M: Module<f64> + ?Sized,
    L: FnMut(&mut M, &[Tensor<f64>]) -> f64,
    A: FnOnce(&mut M, &[Tensor<f64>]) -> Vec<Tensor<f64>>,
{
    zero_grads(m);
    let mut grads = analytic(m, inputs);
    grads.extend(param_grads(m));
    let base = param_values(m);
    let mut all = inputs.to_vec();
    all.extend(base.iter().cloned());
    let n_in = inputs.len();
    let report = grad_check(
        |xs| {
            set_params(m, &xs[n_in..]);
            loss(m, &xs[..n_in])
        },
        &all,
        &grads,
        DEFAULT_DELTA,
    )
    .unwrap();
    set_params(m, &base);
    report
}

/// Like [`grad_check`], but visits at most `per_tensor` random coordinates of each tensor.
pub fn sampled_grad_check<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    per_tensor: usize,
    rng: &mut Rng,
) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let delta = DEFAULT_DELTA;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[ti].shape());
        let len = inputs[ti].len();
        let mut idx: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut idx);
        for &j in idx.iter().take(per_tensor) {
            let x0 = inputs[ti].data()[j];
            work[ti].data_mut()[j] = x0 + delta;
            let up = f(&work);
            work[ti].data_mut()[j] = x0 - delta;
            let down = f(&work);
            work[ti].data_mut()[j] = x0;
            report.observe((ti, j), grad.data()[j], up, down, delta);
        }
    }
    report
}
