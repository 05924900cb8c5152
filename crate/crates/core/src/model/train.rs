use serde::Serialize;

use crate::data::{iou_from_cm, ConfusionMatrix, IouReport, LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::model::loss::total_loss;
use crate::model::optim::{poly_lr, Optimizer};
use crate::model::segmenter::Segmenter;
use crate::numerics::ops::NormMode;
use crate::numerics::{Module, Rng, Scalar, Tensor};

pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub thermal: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> Batch<T> {
    /// Stack samples; `zero_thermal` replaces the thermal input with zeros.
    pub fn from_samples(samples: &[&SamplePair], zero_thermal: bool) -> Result<Self> {
        let rgb: Vec<Tensor<T>> = samples.iter().map(|s| s.rgb.cast()).collect();
        let thermal: Vec<Tensor<T>> = samples
            .iter()
            .map(|s| {
                if zero_thermal {
                    Tensor::zeros(s.thermal.shape())
                } else {
                    s.thermal.cast()
                }
            })
            .collect();
        Ok(Self {
            rgb: Tensor::stack(&rgb)?,
            thermal: Tensor::stack(&thermal)?,
            labels: samples
                .iter()
                .flat_map(|s| s.labels.data.iter().copied())
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub max_iter: u64,
    pub base_lr: f64,
    pub power: f64,
    pub rng: Rng,
}

impl TrainState {
    pub fn lr(&self) -> f64 {
        poly_lr(self.step, self.max_iter, self.base_lr, self.power)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
}

pub struct Trainer<T: Scalar> {
    pub model: Segmenter<T>,
    pub optimizer: Box<dyn Optimizer<T>>,
    pub state: TrainState,
    pub class_weights: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// Forward, loss, backward and one optimizer update at `poly_lr(step)`.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepRecord> {
        if self.state.step >= self.state.max_iter {
            return Err(Error::config(format!(
                "training already reached max_iter {}",
                self.state.max_iter
            )));
        }
        let step = self.state.step;
        self.model.zero_grad();
        let logits = self
            .model
            .forward(&batch.rgb, &batch.thermal, NormMode::Train)?;
        let loss = total_loss(&logits, &batch.labels, &self.class_weights)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                location: format!("step {step}"),
            });
        }
        self.model.backward(&loss.d_logits)?;
        let lr = self.state.lr();
        self.optimizer
            .step(&mut self.model, lr)
            .map_err(|e| match e {
                Error::NonFiniteGradient { param, .. } => Error::NonFiniteGradient { step, param },
                other => other,
            })?;
        self.state.step += 1;
        Ok(StepRecord {
            step,
            lr,
            loss: loss.total,
            ce: loss.ce,
            dice: loss.dice,
        })
    }
}

fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let (b, k, hw) = (logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3));
    let x = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if x[(bi * k + c) * hw + px] > x[(bi * k + best) * hw + px] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Eval-mode argmax prediction for one pair of `[3, H, W]` inputs.
pub fn predict<T: Scalar>(
    model: &mut Segmenter<T>,
    rgb: &Tensor<f32>,
    thermal: &Tensor<f32>,
) -> Result<LabelMap> {
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let logits = model.forward(
        &Tensor::stack(&[rgb.cast()])?,
        &Tensor::stack(&[thermal.cast()])?,
        NormMode::Eval,
    )?;
    LabelMap::new(h, w, argmax_classes(&logits))
}

/// Confusion matrix and IoU over `samples` in eval mode.
pub fn evaluate_model<T: Scalar>(
    model: &mut Segmenter<T>,
    samples: &[SamplePair],
    batch_size: usize,
    zero_thermal: bool,
) -> Result<(IouReport, ConfusionMatrix)> {
    if samples.is_empty() {
        return Err(Error::EmptyMetrics("evaluation set is empty"));
    }
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let batch = Batch::<T>::from_samples(&refs, zero_thermal)?;
        let logits = model.forward(&batch.rgb, &batch.thermal, NormMode::Eval)?;
        cm.update(&argmax_classes(&logits), &batch.labels)?;
    }
    Ok((iou_from_cm(&cm)?, cm))
}

/// Upper bound on samples used by [`calibrate_batchnorm`].
pub const CALIBRATION_SAMPLES: usize = 64;

/// Replace every batch-norm running estimate with statistics of one batch
/// holding (up to [`CALIBRATION_SAMPLES`] of) `samples`, so eval-mode
/// normalization matches the final weights.
pub fn calibrate_batchnorm<T: Scalar>(
    model: &mut Segmenter<T>,
    samples: &[SamplePair],
    zero_thermal: bool,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyMetrics("calibration set is empty"));
    }
    let refs: Vec<&SamplePair> = samples.iter().take(CALIBRATION_SAMPLES).collect();
    let batch = Batch::<T>::from_samples(&refs, zero_thermal)?;
    model.forward(&batch.rgb, &batch.thermal, NormMode::Calibrate)?;
    Ok(())
}
