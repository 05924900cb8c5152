use crate::error::{Error, Result};
use crate::model::layers::{ConvBnRelu, Layer};
use crate::numerics::ops::NormMode;
use crate::numerics::{Buffer, Module, Parameter, Rng, Scalar, Tensor};

/// Four-stage strided conv encoder producing features at strides 4, 8, 16, 32.
///
/// Stage 1 prepends a stride-2 stem so that it, too, lands on stride 4.
#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar> {
    pub stages: Vec<Vec<ConvBnRelu<T>>>,
}

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

impl<T: Scalar> Encoder<T> {
    pub fn new(name: &str, in_channels: usize, widths: &[usize; 4], rng: &mut Rng) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let p = format!("{name}.stage{}", i + 1);
            let mut convs = Vec::new();
            if i == 0 {
                convs.push(ConvBnRelu::new(&format!("{p}.stem"), prev, w, 3, 2, rng));
                prev = w;
            }
            convs.push(ConvBnRelu::new(&format!("{p}.down"), prev, w, 3, 2, rng));
            convs.push(ConvBnRelu::new(&format!("{p}.refine"), w, w, 3, 1, rng));
            stages.push(convs);
            prev = w;
        }
        Self { stages }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Vec<Tensor<T>>> {
        let &[_, _, h, w] = x.shape() else {
            return Err(Error::dim("encoder", x.shape(), &[]));
        };
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} must be divisible by 32"
            )));
        }
        let mut feats = Vec::with_capacity(4);
        let mut y = x.clone();
        for stage in &mut self.stages {
            for layer in stage.iter_mut() {
                y = layer.forward(&y, mode)?;
            }
            feats.push(y.clone());
        }
        Ok(feats)
    }

    /// `d_feats[i]` is the loss gradient reaching stage `i`'s output from outside the encoder.
    pub fn backward(&mut self, d_feats: Vec<Tensor<T>>) -> Result<Tensor<T>> {
        if d_feats.len() != self.stages.len() {
            return Err(Error::dim(
                "encoder_backward",
                &[d_feats.len()],
                &[self.stages.len()],
            ));
        }
        let mut carry: Option<Tensor<T>> = None;
        for (stage, mut d) in self.stages.iter_mut().zip(d_feats).rev() {
            if let Some(c) = carry {
                d.add_assign(&c)?;
            }
            for layer in stage.iter_mut().rev() {
                d = layer.backward(&d)?;
            }
            carry = Some(d);
        }
        Ok(carry.expect("four stages"))
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.stages.iter().flatten().for_each(|l| l.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.stages
            .iter_mut()
            .flatten()
            .for_each(|l| l.visit_params_mut(f));
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.stages
            .iter()
            .flatten()
            .for_each(|l| l.visit_buffers(f));
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.stages
            .iter_mut()
            .flatten()
            .for_each(|l| l.visit_buffers_mut(f));
    }
}
