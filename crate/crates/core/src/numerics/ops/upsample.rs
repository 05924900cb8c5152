use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Per-output-coordinate source taps `(i0, i1, w1)` along one axis using
/// half-pixel centers, `src = (dst + 0.5) / f - 0.5`, clamped to the edge.
fn taps(size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..size * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() || factor > 32 {
        return Err(Error::config(format!(
            "upsample factor {factor} (supported: 1, 2, 4, 8, 16, 32)"
        )));
    }
    Ok(())
}

/// Bilinear upsampling of `[C, H, W]` by an integer factor.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let &[c, h, w] = x.shape() else {
        return Err(Error::dim("bilinear_upsample", x.shape(), &[0, 0, 0]));
    };
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..][..h * w];
        let dst = &mut out[ch * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64_lossy(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64_lossy(wx);
                let top = src[y0 * w + x0] * (T::one() - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (T::one() - wx) + src[y1 * w + x1] * wx;
                dst[oy * ow + ox] = top * (T::one() - wy) + bot * wy;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Adjoint of [`bilinear_upsample`]: scatter each output gradient to its taps.
pub fn bilinear_upsample_backward<T: Scalar>(
    dy: &Tensor<T>,
    factor: usize,
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let &[c, h, w] = in_shape else {
        return Err(Error::dim(
            "bilinear_upsample_backward",
            in_shape,
            dy.shape(),
        ));
    };
    let (oh, ow) = (h * factor, w * factor);
    dy.expect_shape("bilinear_upsample_backward", &[c, oh, ow])?;
    if factor == 1 {
        return Ok(dy.clone());
    }
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &dy.data()[ch * oh * ow..][..oh * ow];
        let d = &mut dx[ch * h * w..][..h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64_lossy(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64_lossy(wx);
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (T::one() - wy) * (T::one() - wx);
                d[y0 * w + x1] += v * (T::one() - wy) * wx;
                d[y1 * w + x0] += v * wy * (T::one() - wx);
                d[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    Tensor::from_vec(in_shape, dx)
}
