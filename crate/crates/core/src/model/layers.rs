//! Stateful layers over `[B, C, H, W]` batches.
//!
//! Each layer keeps the activations its adjoint needs from the most recent
//! `forward`; `backward` consumes them and accumulates parameter gradients.

use crate::error::{Error, Result};
use crate::numerics::ops::{
    activation, activation_backward, batchnorm2d, batchnorm2d_backward, bilinear_upsample,
    bilinear_upsample_backward, conv2d_batch, conv2d_batch_backward, layernorm, layernorm_backward,
    Activation, BatchNormCache, BatchNormStats, ConvSpec, LayerNormCache, NormMode,
};
use crate::numerics::{Buffer, Module, Parameter, Rng, Scalar, Tensor, LINEAR_GAIN, RELU_GAIN};

pub trait Layer<T: Scalar>: Module<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>>;
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;
}

fn take<C>(slot: &mut Option<C>, what: &'static str) -> Result<C> {
    slot.take().ok_or(Error::MissingState(what))
}

pub(crate) fn accumulate<T: Scalar>(p: &mut Parameter<T>, g: &Tensor<T>) -> Result<()> {
    p.grad.add_assign(g)
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub spec: ConvSpec,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let cin_g = cin / spec.groups.max(1);
        let weight = Parameter::kaiming_uniform(
            format!("{name}.weight"),
            &[cout, cin_g, k, k],
            cin_g * k * k,
            gain,
            rng,
        );
        let bias = bias.then(|| Parameter::zeros(format!("{name}.bias"), &[cout]));
        Self {
            weight,
            bias,
            spec,
            input: None,
        }
    }

    /// 1x1 convolution with bias: a linear map applied at every pixel.
    pub fn pixel_linear(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let mut layer = Self::new(
            name,
            cin,
            cout,
            1,
            ConvSpec::new(1, 0, 1),
            true,
            LINEAR_GAIN,
            rng,
        );
        layer.weight.value = Tensor::from_fn(&[cout, cin, 1, 1], |_| {
            T::from_f64_lossy(rng.uniform_range(-1.0, 1.0) / (cin as f64).sqrt())
        });
        layer
    }

    pub fn depthwise3x3(name: &str, channels: usize, rng: &mut Rng) -> Self {
        Self::new(
            name,
            channels,
            channels,
            3,
            ConvSpec::new(1, 1, channels),
            true,
            LINEAR_GAIN,
            rng,
        )
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: NormMode) -> Result<Tensor<T>> {
        let y = conv2d_batch(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.spec,
        )?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input, "conv2d")?;
        let g = conv2d_batch_backward(&x, &self.weight.value, dy, self.spec)?;
        accumulate(&mut self.weight, &g.dkernel)?;
        if let Some(b) = &mut self.bias {
            accumulate(b, &g.dbias)?;
        }
        Ok(g.dx)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::ones(format!("{name}.gamma"), &[channels]),
            beta: Parameter::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Buffer::new(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Buffer::new(format!("{name}.running_var"), Tensor::ones(&[channels])),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let stats = BatchNormStats {
            running_mean: self.running_mean.value.data_mut(),
            running_var: self.running_var.value.data_mut(),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            eps: T::from_f64_lossy(BN_EPS),
        };
        let (y, cache) = batchnorm2d(x, &self.gamma.value, &self.beta.value, stats, mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = take(&mut self.cache, "batchnorm2d")?;
        let g = batchnorm2d_backward(&cache, &self.gamma.value, dy)?;
        accumulate(&mut self.gamma, &g.dgamma)?;
        accumulate(&mut self.beta, &g.dbeta)?;
        Ok(g.dx)
    }
}

/// Elementwise activation; remembers its input.
#[derive(Clone, Debug)]
pub struct Act<T> {
    pub kind: Activation,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Act<T> {
    pub fn new(kind: Activation) -> Self {
        Self { kind, input: None }
    }
}

impl<T: Scalar> Module<T> for Act<T> {
    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

impl<T: Scalar> Layer<T> for Act<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: NormMode) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        Ok(activation(x, self.kind))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input, "activation")?;
        if x.shape() != dy.shape() {
            return Err(Error::dim("activation_backward", x.shape(), dy.shape()));
        }
        Ok(activation_backward(&x, dy, self.kind))
    }
}

/// Convolution (no bias), batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Act<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let spec = ConvSpec::new(stride, k / 2, 1);
        Self {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                cin,
                cout,
                k,
                spec,
                false,
                RELU_GAIN,
                rng,
            ),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            act: Act::new(Activation::Relu),
        }
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.bn.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.bn.visit_buffers_mut(f);
    }
}

impl<T: Scalar> Layer<T> for ConvBnRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.act.backward(dy)?;
        let d = self.bn.backward(&d)?;
        self.conv.backward(&d)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the channel axis of every pixel.
#[derive(Clone, Debug)]
pub struct ChannelLayerNorm<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    caches: Option<Vec<LayerNormCache<T>>>,
}

impl<T: Scalar> ChannelLayerNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::ones(format!("{name}.gamma"), &[channels]),
            beta: Parameter::zeros(format!("{name}.beta"), &[channels]),
            caches: None,
        }
    }
}

impl<T: Scalar> Module<T> for ChannelLayerNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// `[C, H, W]` to `[H*W, C]`.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::dim("to_tokens", x.shape(), &[]));
    };
    x.clone().reshape(&[c, h * w])?.transpose2()
}

/// `[H*W, C]` back to `[C, H, W]`.
pub fn from_tokens<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = t.dim(1);
    t.transpose2()?.reshape(&[c, h, w])
}

impl<T: Scalar> Layer<T> for ChannelLayerNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: NormMode) -> Result<Tensor<T>> {
        let &[b, _, h, w] = x.shape() else {
            return Err(Error::dim(
                "channel_layernorm",
                x.shape(),
                self.gamma.value.shape(),
            ));
        };
        let mut outs = Vec::with_capacity(b);
        let mut caches = Vec::with_capacity(b);
        for i in 0..b {
            let (y, cache) = layernorm(
                &to_tokens(&x.index0(i))?,
                &self.gamma.value,
                &self.beta.value,
                T::from_f64_lossy(LN_EPS),
            )?;
            outs.push(from_tokens(&y, h, w)?);
            caches.push(cache);
        }
        self.caches = Some(caches);
        Tensor::stack(&outs)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = take(&mut self.caches, "channel_layernorm")?;
        let &[b, _, h, w] = dy.shape() else {
            return Err(Error::dim("channel_layernorm_backward", dy.shape(), &[]));
        };
        if b != caches.len() {
            return Err(Error::dim(
                "channel_layernorm_backward",
                dy.shape(),
                &[caches.len()],
            ));
        }
        let mut outs = Vec::with_capacity(b);
        for (i, cache) in caches.iter().enumerate() {
            let g = layernorm_backward(cache, &self.gamma.value, &to_tokens(&dy.index0(i))?)?;
            accumulate(&mut self.gamma, &g.dgamma)?;
            accumulate(&mut self.beta, &g.dbeta)?;
            outs.push(from_tokens(&g.dx, h, w)?);
        }
        Tensor::stack(&outs)
    }
}

/// Bilinear upsampling of every sample in a batch.
pub fn upsample_batch<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim("upsample_batch", x.shape(), &[]));
    }
    let outs = (0..x.dim(0))
        .map(|i| bilinear_upsample(&x.index0(i), factor))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

pub fn upsample_batch_backward<T: Scalar>(
    dy: &Tensor<T>,
    factor: usize,
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    let outs = (0..dy.dim(0))
        .map(|i| bilinear_upsample_backward(&dy.index0(i), factor, &in_shape[1..]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_before_forward_is_missing_state() {
        let mut rng = Rng::new(0);
        let mut conv = Conv2d::<f64>::pixel_linear("p", 2, 3, &mut rng);
        let dy = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(matches!(
            conv.backward(&dy),
            Err(Error::MissingState("conv2d"))
        ));
        let mut ln = ChannelLayerNorm::<f64>::new("ln", 3);
        assert!(matches!(ln.backward(&dy), Err(Error::MissingState(_))));
    }

    #[test]
    fn backward_consumes_the_cache() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64);
        let y = bn.forward(&x, NormMode::Train).unwrap();
        bn.backward(&y).unwrap();
        assert!(bn.backward(&y).is_err());
    }

    #[test]
    fn token_layout_round_trip() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 4], |i| i as f64);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[8, 3]);
        assert_eq!(t.data()[..3], [0.0, 8.0, 16.0]);
        assert_eq!(from_tokens(&t, 2, 4).unwrap(), x);
    }
}
