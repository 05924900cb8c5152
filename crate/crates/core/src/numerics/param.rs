use super::{Rng, Scalar, Tensor};

/// A trainable tensor plus its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::ones(shape))
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
    pub fn kaiming_uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| {
            T::from_f64_lossy(rng.uniform_range(-bound, bound))
        });
        Self::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Non-trainable state that still belongs in a checkpoint (running stats).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Buffer<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
pub const LINEAR_GAIN: f64 = 1.0;

/// Anything owning parameters and buffers, visited in a fixed order.
pub trait Module<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn visit_buffers(&self, _f: &mut dyn FnMut(&Buffer<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Buffer<T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}
