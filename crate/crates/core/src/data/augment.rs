use serde::{Deserialize, Serialize};

use crate::data::scene::{LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Target `[H, W]` applied before cropping.
    pub resize: Option<[usize; 2]>,
    /// Random crop `[H, W]`; must fit inside the (resized) sample.
    pub crop: Option<[usize; 2]>,
    pub hflip_p: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            resize: None,
            crop: None,
            hflip_p: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            resize: None,
            crop: None,
            hflip_p: 0.0,
        }
    }
}

/// Separable bilinear resampling with half-pixel centers, clamped at the edges.
pub fn resize_bilinear(x: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::dim("resize_bilinear", x.shape(), &[oh, ow]));
    };
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let src = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn resize_nearest(l: &LabelMap, oh: usize, ow: usize) -> LabelMap {
    let data = (0..oh * ow)
        .map(|i| {
            let sy = ((i / ow) * l.height + l.height / (2 * oh).max(1)) / oh;
            let sx = ((i % ow) * l.width + l.width / (2 * ow).max(1)) / ow;
            l.data[sy.min(l.height - 1) * l.width + sx.min(l.width - 1)]
        })
        .collect();
    LabelMap {
        height: oh,
        width: ow,
        data,
    }
}

fn crop_image(x: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let (c, w) = (x.dim(0), x.dim(2));
    let h = x.dim(1);
    Tensor::from_fn(&[c, ch, cw], |i| {
        let (k, rest) = (i / (ch * cw), i % (ch * cw));
        x.data()[(k * h + top + rest / cw) * w + left + rest % cw]
    })
}

fn flip_image(x: &Tensor<f32>) -> Tensor<f32> {
    let w = x.dim(2);
    Tensor::from_fn(x.shape(), |i| x.data()[i - i % w + (w - 1 - i % w)])
}

/// One geometric transform applied identically to rgb, thermal and labels.
pub fn augment(sample: &SamplePair, rng: &mut Rng, policy: &AugmentPolicy) -> Result<SamplePair> {
    let mut s = sample.clone();
    if let Some([rh, rw]) = policy.resize {
        if rh == 0 || rw == 0 {
            return Err(Error::config("resize target must be positive"));
        }
        if [rh, rw] != [s.height(), s.width()] {
            s = SamplePair {
                rgb: resize_bilinear(&s.rgb, rh, rw)?,
                thermal: resize_bilinear(&s.thermal, rh, rw)?,
                labels: resize_nearest(&s.labels, rh, rw),
            };
        }
    }
    if let Some([ch, cw]) = policy.crop {
        if ch == 0 || cw == 0 || ch > s.height() || cw > s.width() {
            return Err(Error::config(format!(
                "crop {ch}x{cw} does not fit a {}x{} sample",
                s.height(),
                s.width()
            )));
        }
        let top = rng.int_inclusive(0, s.height() - ch);
        let left = rng.int_inclusive(0, s.width() - cw);
        let w = s.width();
        let labels = (0..ch * cw)
            .map(|i| s.labels.data[(top + i / cw) * w + left + i % cw])
            .collect();
        s = SamplePair {
            rgb: crop_image(&s.rgb, top, left, ch, cw),
            thermal: crop_image(&s.thermal, top, left, ch, cw),
            labels: LabelMap::new(ch, cw, labels)?,
        };
    }
    if rng.bernoulli(policy.hflip_p) {
        let w = s.width();
        let labels = (0..s.labels.data.len())
            .map(|i| s.labels.data[i - i % w + (w - 1 - i % w)])
            .collect();
        s = SamplePair {
            rgb: flip_image(&s.rgb),
            thermal: flip_image(&s.thermal),
            labels: LabelMap::new(s.height(), w, labels)?,
        };
    }
    Ok(s)
}
