//! Analytic FLOP and parameter counts for one forward pass of one image pair.
//!
//! Counting rules:
//! - convolutions and projections: 2 FLOPs per multiply-accumulate, bias adds free
//! - `exp` and `softplus`: [`TRANSCENDENTAL_FLOPS`] each
//! - norms, activations, residual adds and gates: a fixed cost per element
//! - each scan direction: [`SCAN_FLOPS_PER_STATE`] per `(token, channel, state)` triple,
//!   plus per-`(token, channel)` work for the step-size path and skip term
//!
//! The constants make numbers comparable between configurations; they are not
//! a measurement of real hardware work.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, INPUT_CHANNELS, STAGE_STRIDES};
use crate::numerics::{Module, Scalar};

pub const TRANSCENDENTAL_FLOPS: u64 = 4;
/// `max(0, x)`.
pub const RELU_FLOPS: u64 = 1;
/// `x / (1 + exp(-x))`: negate, exp, add, divide.
pub const SILU_FLOPS: u64 = TRANSCENDENTAL_FLOPS + 3;
/// Inference-time affine form `gamma' * x + beta'`.
pub const BATCHNORM_FLOPS: u64 = 2;
/// Mean, centre, squared accumulation, rescale and affine.
pub const LAYERNORM_FLOPS: u64 = 7;
/// Three lerps of two multiplies and one add, plus the three `1 - w` terms.
pub const BILINEAR_FLOPS: u64 = 9;
/// Per `(token, channel, state)` in one direction:
/// B projection 2, C projection 2, `exp(delta * A)` 1 + 4, `delta * B * x` 1,
/// state update 2, readout 2.
pub const SCAN_FLOPS_PER_STATE: u64 = 14;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsEntry {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<FlopsEntry>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl FlopsReport {
    fn from_entries(height: usize, width: usize, entries: Vec<FlopsEntry>) -> Self {
        Self {
            height,
            width,
            total_flops: entries.iter().map(|e| e.flops).sum(),
            total_params: entries.iter().map(|e| e.params).sum(),
            entries,
        }
    }

    /// Entries whose name starts with `prefix`, summed.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .fold((0, 0), |(f, p), e| (f + e.flops, p + e.params))
    }

    pub fn table(&self) -> String {
        let w = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = format!("{:<w$}  {:>14}  {:>10}\n", "layer", "flops", "params");
        for e in &self.entries {
            s += &format!("{:<w$}  {:>14}  {:>10}\n", e.name, e.flops, e.params);
        }
        s += &format!(
            "{:<w$}  {:>14}  {:>10}\n",
            "total", self.total_flops, self.total_params
        );
        s
    }
}

/// `(flops, params)` of a `k x k` conv producing `pixels` output positions.
/// A pixel-wise linear layer is the `k = 1` case.
pub fn conv_cost(pixels: u64, cin: u64, cout: u64, k: u64, groups: u64, bias: bool) -> (u64, u64) {
    let weights = cout * (cin / groups) * k * k;
    (2 * pixels * weights, weights + if bias { cout } else { 0 })
}

struct Counter {
    entries: Vec<FlopsEntry>,
}

impl Counter {
    fn push(&mut self, name: String, flops: u64, params: u64) {
        self.entries.push(FlopsEntry {
            name,
            flops,
            params,
        });
    }

    fn conv(&mut self, name: String, p: u64, cin: u64, cout: u64, k: u64, groups: u64, bias: bool) {
        let (f, n) = conv_cost(p, cin, cout, k, groups, bias);
        self.push(name, f, n);
    }

    /// Bias-free conv, batch norm, ReLU.
    fn conv_bn_relu(&mut self, name: String, p: u64, cin: u64, cout: u64, k: u64) {
        let macs = p * cout * cin * k * k;
        let flops = 2 * macs + (BATCHNORM_FLOPS + RELU_FLOPS) * p * cout;
        self.push(name, flops, cin * cout * k * k + 2 * cout);
    }
}

/// Count one forward pass of `cfg` at `height x width`.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::config(format!(
            "input size {height}x{width} must be divisible by 32"
        )));
    }
    let widths = cfg.stage_channels.map(|c| c as u64);
    let pixels: Vec<u64> = STAGE_STRIDES
        .iter()
        .map(|s| ((height / s) * (width / s)) as u64)
        .collect();
    let mut k = Counter {
        entries: Vec::new(),
    };

    for enc in ["enc_rgb", "enc_thermal"] {
        let mut prev = INPUT_CHANNELS as u64;
        for (i, &w) in widths.iter().enumerate() {
            let p = format!("{enc}.stage{}", i + 1);
            if i == 0 {
                // stem output sits at stride 2
                k.conv_bn_relu(format!("{p}.stem"), 4 * pixels[0], prev, w, 3);
                prev = w;
            }
            k.conv_bn_relu(format!("{p}.down"), pixels[i], prev, w, 3);
            k.conv_bn_relu(format!("{p}.refine"), pixels[i], w, w, 3);
            prev = w;
        }
    }

    for (i, (&c, &p)) in widths.iter().zip(&pixels).enumerate() {
        let name = format!("fusion{}", i + 1);
        match cfg.fusion.strategy.as_str() {
            "addition" => k.push(format!("{name}.add"), p * c, 0),
            s @ ("cm_ssa" | "no_scan") => cm_ssa(&mut k, &name, cfg, p, c, s == "cm_ssa"),
            other => {
                return Err(Error::config(format!(
                    "no FLOP rule for fusion strategy '{other}'"
                )))
            }
        }
    }

    let hid = cfg.decoder_hidden as u64;
    let classes = cfg.num_classes as u64;
    for (i, (&c, &p)) in widths.iter().zip(&pixels).enumerate() {
        k.conv(format!("decoder.lateral{}", i + 1), p, c, hid, 1, 1, true);
        if i > 0 {
            k.push(
                format!("decoder.upsample{}", i + 1),
                BILINEAR_FLOPS * pixels[0] * hid,
                0,
            );
        }
    }
    k.conv("decoder.mix".into(), pixels[0], 4 * hid, hid, 1, 1, true);
    k.push("decoder.relu".into(), RELU_FLOPS * pixels[0] * hid, 0);
    k.conv(
        "decoder.classifier".into(),
        pixels[0],
        hid,
        classes,
        1,
        1,
        true,
    );
    k.push(
        "decoder.upsample_out".into(),
        BILINEAR_FLOPS * (height * width) as u64 * classes,
        0,
    );

    Ok(FlopsReport::from_entries(height, width, k.entries))
}

fn cm_ssa(k: &mut Counter, name: &str, cfg: &ModelConfig, p: u64, c: u64, with_scan: bool) {
    let ce = c * cfg.ssm.expand_factor as u64;
    for m in ["rgb", "thermal"] {
        let b = format!("{name}.{m}");
        k.conv(format!("{b}.in_proj"), p, c, ce, 1, 1, true);
        k.conv(format!("{b}.dw"), p, ce, ce, 3, ce, true);
        k.push(format!("{b}.act"), SILU_FLOPS * p * ce, 0);
        k.push(format!("{b}.ln"), LAYERNORM_FLOPS * p * ce, 2 * ce);
        k.conv(format!("{b}.out_proj"), p, ce, c, 1, 1, true);
        k.conv(format!("{b}.gate"), p, c, c, 1, 1, true);
        // gate activation, gate mix, residual add
        k.push(format!("{b}.gate_mix"), (SILU_FLOPS + 2) * p * c, 0);
    }
    if with_scan {
        let n = cfg.ssm.state_dim as u64;
        let r = cfg.ssm.dt_rank_for(ce as usize) as u64;
        let j = 2 * p;
        // dt projections and bias, optional softplus, delta * x, skip term
        let softplus = if cfg.ssm.delta_softplus {
            TRANSCENDENTAL_FLOPS
        } else {
            0
        };
        let per_token_channel = 4 * r + 1 + softplus + 1 + 2;
        let dir_flops = SCAN_FLOPS_PER_STATE * j * ce * n + per_token_channel * j * ce;
        let dir_params = 3 * ce * n + 2 * ce * r + 2 * ce;
        for d in 0..4 {
            k.push(format!("{name}.scan.dir{d}"), dir_flops, dir_params);
        }
        // sum of four directions for both modalities
        k.push(format!("{name}.scan.merge"), 3 * 2 * p * ce, 0);
    }
    k.conv_bn_relu(format!("{name}.local"), p, 2 * c, c, 3);
    k.conv_bn_relu(format!("{name}.fuse"), p, 3 * c, c, 1);
}

/// Total number of trainable scalars.
pub fn params_count<T: Scalar>(model: &dyn Module<T>) -> u64 {
    let mut n = 0;
    model.visit_params(&mut |p| n += p.value.len() as u64);
    n
}
