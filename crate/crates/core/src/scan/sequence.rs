use super::layout::DirectionalLayout;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Thermal,
}

/// Cross-modal token sequence of one direction: `[2 * H * W, C]` with the
/// RGB token of each pixel at even index `2k` and the thermal token at `2k + 1`.
#[derive(Clone, Debug)]
pub struct InterleavedSequence<T> {
    pub tokens: Tensor<T>,
    pub layout: DirectionalLayout,
}

impl<T: Scalar> InterleavedSequence<T> {
    pub fn build(
        f_rgb: &Tensor<T>,
        f_thermal: &Tensor<T>,
        layout: DirectionalLayout,
    ) -> Result<Self> {
        let &[c, h, w] = f_rgb.shape() else {
            return Err(Error::dim("interleave", f_rgb.shape(), f_thermal.shape()));
        };
        if f_rgb.shape() != f_thermal.shape() {
            return Err(Error::dim("interleave", f_rgb.shape(), f_thermal.shape()));
        }
        let hw = h * w;
        if layout.len() != hw {
            return Err(Error::dim(
                "interleave layout",
                f_rgb.shape(),
                &[layout.len()],
            ));
        }
        let mut tokens = vec![T::zero(); 2 * hw * c];
        for (k, &p) in layout.pixel_order.iter().enumerate() {
            let (r, t) = tokens[2 * k * c..][..2 * c].split_at_mut(c);
            for ch in 0..c {
                r[ch] = f_rgb.data()[ch * hw + p];
                t[ch] = f_thermal.data()[ch * hw + p];
            }
        }
        Ok(Self {
            tokens: Tensor::from_vec(&[2 * hw, c], tokens)?,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.dim(1)
    }

    pub fn modality(index: usize) -> Modality {
        if index.is_multiple_of(2) {
            Modality::Rgb
        } else {
            Modality::Thermal
        }
    }
}

/// Interleaved sequences for all four directions.
pub fn build_directional_sequences<T: Scalar>(
    f_rgb: &Tensor<T>,
    f_thermal: &Tensor<T>,
) -> Result<Vec<InterleavedSequence<T>>> {
    if f_rgb.rank() != 3 || f_rgb.shape() != f_thermal.shape() {
        return Err(Error::dim(
            "build_directional_sequences",
            f_rgb.shape(),
            f_thermal.shape(),
        ));
    }
    let (h, w) = (f_rgb.dim(1), f_rgb.dim(2));
    DirectionalLayout::all(h, w)
        .into_iter()
        .map(|l| InterleavedSequence::build(f_rgb, f_thermal, l))
        .collect()
}

/// Scatter per-token gradients back onto the two `[C, H, W]` maps (`+=`).
pub fn deinterleave_accumulate<T: Scalar>(
    dtokens: &[T],
    layout: &DirectionalLayout,
    c: usize,
    d_rgb: &mut [T],
    d_thermal: &mut [T],
) {
    let hw = layout.len();
    for (k, &p) in layout.pixel_order.iter().enumerate() {
        for ch in 0..c {
            d_rgb[ch * hw + p] += dtokens[2 * k * c + ch];
            d_thermal[ch * hw + p] += dtokens[(2 * k + 1) * c + ch];
        }
    }
}
