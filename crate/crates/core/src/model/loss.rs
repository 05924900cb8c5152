//! Weighted cross-entropy plus soft Dice over `[B, K, H, W]` logits.
//!
//! Each loss returns its value and the gradient with respect to its input.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const IGNORE_INDEX: u8 = 255;
pub const DICE_EPS: f64 = 1.0;

fn check_labels(shape: &[usize], labels: &[u8]) -> Result<(usize, usize, usize)> {
    let &[b, k, h, w] = shape else {
        return Err(Error::dim("loss logits", shape, &[labels.len()]));
    };
    if labels.len() != b * h * w {
        return Err(Error::dim("loss labels", shape, &[labels.len()]));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&l| l != IGNORE_INDEX && l as usize >= k)
    {
        return Err(Error::InvalidLabel {
            value: bad,
            num_classes: k,
        });
    }
    Ok((b, k, h * w))
}

/// Per-pixel softmax over the class axis, computed in f64.
pub fn softmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, k, h, w] = logits.shape() else {
        return Err(Error::dim("softmax_classes", logits.shape(), &[]));
    };
    let hw = h * w;
    let x = logits.data();
    let mut p = vec![T::zero(); x.len()];
    let mut z = vec![0.0f64; k];
    for bi in 0..b {
        let base = bi * k * hw;
        for px in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                z[c] = x[base + c * hw + px].to_f64_lossy();
                m = m.max(z[c]);
            }
            let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
            for c in 0..k {
                p[base + c * hw + px] = T::from_f64_lossy((z[c] - m).exp() / s);
            }
        }
    }
    Tensor::from_vec(logits.shape(), p)
}

/// `sum_i w[g_i] * -log softmax(x_i)[g_i] / sum_i w[g_i]` over non-ignored pixels.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let (b, k, hw) = check_labels(logits.shape(), labels)?;
    if weights.len() != k {
        return Err(Error::dim("class weights", &[k], &[weights.len()]));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::config("class weights must be positive and finite"));
    }
    let x = logits.data();
    let mut grad = vec![T::zero(); x.len()];
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut z = vec![0.0f64; k];
    for bi in 0..b {
        let base = bi * k * hw;
        for px in 0..hw {
            let g = labels[bi * hw + px];
            if g == IGNORE_INDEX {
                continue;
            }
            let g = g as usize;
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                z[c] = x[base + c * hw + px].to_f64_lossy();
                m = m.max(z[c]);
            }
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += weights[g] * (lse - z[g]);
            norm += weights[g];
            for c in 0..k {
                let p = (z[c] - lse).exp();
                let onehot = if c == g { 1.0 } else { 0.0 };
                grad[base + c * hw + px] = T::from_f64_lossy(weights[g] * (p - onehot));
            }
        }
    }
    if norm == 0.0 {
        return Err(Error::UndefinedLoss);
    }
    let scale = T::from_f64_lossy(1.0 / norm);
    grad.iter_mut().for_each(|v| *v *= scale);
    Ok((total / norm, Tensor::from_vec(logits.shape(), grad)?))
}

/// `1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)` over non-ignored pixels.
///
/// Returns the gradient with respect to `probs`.
pub fn dice_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    eps: f64,
) -> Result<(f64, Tensor<T>)> {
    let (b, k, hw) = check_labels(probs.shape(), labels)?;
    let p = probs.data();
    let mut inter = vec![0.0f64; k];
    let mut psum = vec![0.0f64; k];
    let mut gsum = vec![0.0f64; k];
    for bi in 0..b {
        for px in 0..hw {
            let g = labels[bi * hw + px];
            if g == IGNORE_INDEX {
                continue;
            }
            for c in 0..k {
                psum[c] += p[(bi * k + c) * hw + px].to_f64_lossy();
            }
            inter[g as usize] += p[(bi * k + g as usize) * hw + px].to_f64_lossy();
            gsum[g as usize] += 1.0;
        }
    }
    let kf = k as f64;
    let mut loss = 1.0;
    // d dice_c / d p = (2 g S - I) / S^2
    let mut coef_g = vec![0.0f64; k];
    let mut coef = vec![0.0f64; k];
    for c in 0..k {
        let num = 2.0 * inter[c] + eps;
        let den = psum[c] + gsum[c] + eps;
        loss -= num / den / kf;
        coef_g[c] = -2.0 / den / kf;
        coef[c] = num / (den * den) / kf;
    }
    let mut grad = vec![T::zero(); p.len()];
    for bi in 0..b {
        for px in 0..hw {
            let g = labels[bi * hw + px];
            if g == IGNORE_INDEX {
                continue;
            }
            for c in 0..k {
                let hit = if c == g as usize { coef_g[c] } else { 0.0 };
                grad[(bi * k + c) * hw + px] = T::from_f64_lossy(hit + coef[c]);
            }
        }
    }
    Ok((loss, Tensor::from_vec(probs.shape(), grad)?))
}

/// Pull a gradient on softmax outputs back to the logits.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, k, h, w] = probs.shape() else {
        return Err(Error::dim(
            "softmax_backward",
            probs.shape(),
            dprobs.shape(),
        ));
    };
    dprobs.expect_shape("softmax_backward", probs.shape())?;
    let hw = h * w;
    let (p, d) = (probs.data(), dprobs.data());
    let mut out = vec![T::zero(); p.len()];
    for bi in 0..b {
        for px in 0..hw {
            let idx = |c: usize| (bi * k + c) * hw + px;
            let dot: T = (0..k).map(|c| p[idx(c)] * d[idx(c)]).sum();
            for c in 0..k {
                out[idx(c)] = p[idx(c)] * (d[idx(c)] - dot);
            }
        }
    }
    Tensor::from_vec(probs.shape(), out)
}

#[derive(Clone, Debug)]
pub struct LossReport<T> {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
    pub d_logits: Tensor<T>,
}

/// Unweighted sum of cross-entropy and Dice.
pub fn total_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    weights: &[f64],
) -> Result<LossReport<T>> {
    let (ce, mut d_logits) = weighted_cross_entropy(logits, labels, weights)?;
    let probs = softmax_classes(logits)?;
    let (dice, dprobs) = dice_loss(&probs, labels, DICE_EPS)?;
    d_logits.add_assign(&softmax_backward(&probs, &dprobs)?)?;
    Ok(LossReport {
        ce,
        dice,
        total: ce + dice,
        d_logits,
    })
}
