use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::decoder::Decoder;
use crate::model::encoder::Encoder;
use crate::model::fusion::{build_fusion, FusionConfig, FusionContext, FusionStrategy};
use crate::numerics::ops::NormMode;
use crate::numerics::{Buffer, Module, Parameter, Rng, Scalar, Tensor};
use crate::scan::SsmConfig;

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
    pub decoder_hidden: usize,
    pub ssm: SsmConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            num_classes: 6,
            decoder_hidden: 128,
            ssm: SsmConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::config("stage_channels must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!(
                "num_classes {} outside 2..=255",
                self.num_classes
            )));
        }
        if self.decoder_hidden == 0 {
            return Err(Error::config("decoder_hidden must be positive"));
        }
        crate::model::fusion::fusion_registry::<f32>().get(&self.fusion.strategy)?;
        self.ssm.validate()
    }
}

/// Two unshared encoders, one fusion block per stage, one decoder.
pub struct Segmenter<T: Scalar> {
    pub config: ModelConfig,
    pub enc_rgb: Encoder<T>,
    pub enc_thermal: Encoder<T>,
    pub fusions: Vec<Box<dyn FusionStrategy<T>>>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let w = &config.stage_channels;
        let enc_rgb = Encoder::new("enc_rgb", INPUT_CHANNELS, w, &mut rng.split(1));
        let enc_thermal = Encoder::new("enc_thermal", INPUT_CHANNELS, w, &mut rng.split(2));
        let mut fusion_rng = rng.split(3);
        let fusions = w
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let ctx = FusionContext {
                    prefix: &format!("fusion{}", i + 1),
                    channels: c,
                    ssm: &config.ssm,
                    fusion: &config.fusion,
                };
                build_fusion(&ctx, &mut fusion_rng)
            })
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(
            "decoder",
            w,
            config.decoder_hidden,
            config.num_classes,
            &mut rng.split(4),
        );
        Ok(Self {
            config: config.clone(),
            enc_rgb,
            enc_thermal,
            fusions,
            decoder,
        })
    }

    /// `[B, 3, H, W]` pair to `[B, K, H, W]` logits.
    pub fn forward(
        &mut self,
        rgb: &Tensor<T>,
        thermal: &Tensor<T>,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        if rgb.shape() != thermal.shape() {
            return Err(Error::dim("segmenter", rgb.shape(), thermal.shape()));
        }
        if rgb.rank() != 4 || rgb.dim(1) != INPUT_CHANNELS {
            return Err(Error::dim(
                "segmenter",
                rgb.shape(),
                &[0, INPUT_CHANNELS, 0, 0],
            ));
        }
        let fr = self.enc_rgb.forward(rgb, mode)?;
        let ft = self.enc_thermal.forward(thermal, mode)?;
        let fused = self
            .fusions
            .iter_mut()
            .zip(fr.iter().zip(&ft))
            .map(|(f, (r, t))| f.forward(r, t, mode))
            .collect::<Result<Vec<_>>>()?;
        self.decoder.forward(&fused, mode)
    }

    /// Accumulates parameter gradients; returns input gradients.
    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let d_fused = self.decoder.backward(d_logits)?;
        let mut dr = Vec::with_capacity(4);
        let mut dt = Vec::with_capacity(4);
        for (f, d) in self.fusions.iter_mut().zip(&d_fused) {
            let (a, b) = f.backward(d)?;
            dr.push(a);
            dt.push(b);
        }
        Ok((self.enc_rgb.backward(dr)?, self.enc_thermal.backward(dt)?))
    }

    pub fn fusion_name(&self) -> &'static str {
        self.fusions[0].name()
    }
}

impl<T: Scalar> Module<T> for Segmenter<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.enc_rgb.visit_params(f);
        self.enc_thermal.visit_params(f);
        self.fusions.iter().for_each(|m| m.visit_params(f));
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.enc_rgb.visit_params_mut(f);
        self.enc_thermal.visit_params_mut(f);
        self.fusions.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.decoder.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.enc_rgb.visit_buffers(f);
        self.enc_thermal.visit_buffers(f);
        self.fusions.iter().for_each(|m| m.visit_buffers(f));
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.enc_rgb.visit_buffers_mut(f);
        self.enc_thermal.visit_buffers_mut(f);
        self.fusions.iter_mut().for_each(|m| m.visit_buffers_mut(f));
    }
}
