use crate::error::{Error, Result};
use crate::model::layers::{upsample_batch, upsample_batch_backward, Act, Conv2d, Layer};
use crate::numerics::ops::{Activation, NormMode};
use crate::numerics::{Module, Parameter, Rng, Scalar, Tensor};

/// All-MLP head: per-stage pixel-linear to `hidden`, upsample to the stride-4
/// grid, concatenate, then linear, ReLU, linear to `K` and a final 4x upsample.
#[derive(Clone, Debug)]
pub struct Decoder<T: Scalar> {
    pub lateral: Vec<Conv2d<T>>,
    pub mix: Conv2d<T>,
    pub act: Act<T>,
    pub classifier: Conv2d<T>,
    hidden: usize,
    lateral_shapes: Option<Vec<Vec<usize>>>,
    logits_shape: Option<Vec<usize>>,
}

/// Upsampling factor from stage `i` to the stride-4 grid.
fn lateral_factor(i: usize) -> usize {
    1 << i
}

impl<T: Scalar> Decoder<T> {
    pub fn new(
        name: &str,
        widths: &[usize; 4],
        hidden: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        let lateral = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                Conv2d::pixel_linear(&format!("{name}.lateral{}", i + 1), w, hidden, rng)
            })
            .collect();
        Self {
            lateral,
            mix: Conv2d::pixel_linear(&format!("{name}.mix"), 4 * hidden, hidden, rng),
            act: Act::new(Activation::Relu),
            classifier: Conv2d::pixel_linear(&format!("{name}.classifier"), hidden, classes, rng),
            hidden,
            lateral_shapes: None,
            logits_shape: None,
        }
    }

    pub fn forward(&mut self, feats: &[Tensor<T>], mode: NormMode) -> Result<Tensor<T>> {
        if feats.len() != self.lateral.len() {
            return Err(Error::dim("decoder", &[feats.len()], &[self.lateral.len()]));
        }
        let mut ups = Vec::with_capacity(4);
        let mut shapes = Vec::with_capacity(4);
        for (i, (layer, f)) in self.lateral.iter_mut().zip(feats).enumerate() {
            let y = layer.forward(f, mode)?;
            shapes.push(y.shape().to_vec());
            ups.push(upsample_batch(&y, lateral_factor(i))?);
        }
        let cat = Tensor::concat1(&ups.iter().collect::<Vec<_>>())?;
        let y = self.mix.forward(&cat, mode)?;
        let y = self.act.forward(&y, mode)?;
        let y = self.classifier.forward(&y, mode)?;
        self.lateral_shapes = Some(shapes);
        self.logits_shape = Some(y.shape().to_vec());
        upsample_batch(&y, 4)
    }

    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let shapes = self
            .lateral_shapes
            .take()
            .ok_or(Error::MissingState("decoder"))?;
        let logits_shape = self
            .logits_shape
            .take()
            .ok_or(Error::MissingState("decoder"))?;
        let d = upsample_batch_backward(d_logits, 4, &logits_shape)?;
        let d = self.classifier.backward(&d)?;
        let d = self.act.backward(&d)?;
        let d = self.mix.backward(&d)?;
        let parts = d.split1(&[self.hidden; 4])?;
        let mut out = Vec::with_capacity(4);
        for (i, ((layer, dp), shape)) in
            self.lateral.iter_mut().zip(&parts).zip(&shapes).enumerate()
        {
            let du = upsample_batch_backward(dp, lateral_factor(i), shape)?;
            out.push(layer.backward(&du)?);
        }
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.lateral.iter().for_each(|l| l.visit_params(f));
        self.mix.visit_params(f);
        self.classifier.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.lateral.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.mix.visit_params_mut(f);
        self.classifier.visit_params_mut(f);
    }
}
