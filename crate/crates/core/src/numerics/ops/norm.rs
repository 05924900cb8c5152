use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
    /// Batch statistics, and the running estimates are overwritten with them.
    Calibrate,
}

pub struct BatchNormStats<'a, T> {
    pub running_mean: &'a mut [T],
    pub running_var: &'a mut [T],
    pub momentum: T,
    pub eps: T,
}

/// Saved forward state for [`batchnorm2d_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    mode: NormMode,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// Per-channel normalization of `[B, C, H, W]`.
///
/// Train mode uses biased batch statistics and updates the running
/// estimates with the unbiased variance; eval mode uses the running estimates.
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: BatchNormStats<'_, T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::dim("batchnorm2d", x.shape(), gamma.shape()));
    };
    for t in [gamma.shape(), beta.shape()] {
        if t != [c] {
            return Err(Error::dim("batchnorm2d", x.shape(), t));
        }
    }
    if stats.running_mean.len() != c || stats.running_var.len() != c {
        return Err(Error::dim(
            "batchnorm2d running stats",
            &[c],
            &[stats.running_mean.len()],
        ));
    }
    if stats.eps <= T::zero() {
        return Err(Error::config("batchnorm2d: eps must be positive"));
    }
    let hw = h * w;
    let count = b * hw;
    if mode != NormMode::Eval && count == 1 {
        return Err(Error::DegenerateBatch);
    }
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match mode {
        NormMode::Train | NormMode::Calibrate => {
            let n = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += xd[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let mu = s / n;
                let mut v = T::zero();
                for bi in 0..b {
                    for &xv in &xd[(bi * c + ch) * hw..][..hw] {
                        v += (xv - mu) * (xv - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / n;
                let unbiased = v / (n - T::one());
                let m = if mode == NormMode::Calibrate {
                    T::one()
                } else {
                    stats.momentum
                };
                stats.running_mean[ch] = (T::one() - m) * stats.running_mean[ch] + m * mu;
                stats.running_var[ch] = (T::one() - m) * stats.running_var[ch] + m * unbiased;
            }
        }
        NormMode::Eval => {
            mean.copy_from_slice(stats.running_mean);
            var.copy_from_slice(stats.running_var);
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + stats.eps).sqrt())
        .collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                y[i] = g * xh + be;
            }
        }
    }
    let cache = BatchNormCache {
        mode,
        x_hat,
        inv_std,
        shape: x.shape().to_vec(),
    };
    Ok((Tensor::from_vec(x.shape(), y)?, cache))
}

pub struct NormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    dy.expect_shape("batchnorm2d_backward", &cache.shape)?;
    let &[b, c, h, w] = &cache.shape[..] else {
        unreachable!()
    };
    let hw = h * w;
    let n = T::from_usize(b * hw).unwrap();
    let dyd = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dyd[i] * cache.x_hat[i];
                dbeta[ch] += dyd[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let g = gamma.data()[ch];
        let s = cache.inv_std[ch];
        match cache.mode {
            NormMode::Eval => {
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dx[i] = dyd[i] * g * s;
                    }
                }
            }
            NormMode::Train | NormMode::Calibrate => {
                // sum(dx_hat) = gamma * dbeta, sum(dx_hat * x_hat) = gamma * dgamma
                let sum_d = g * dbeta[ch];
                let sum_dx = g * dgamma[ch];
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        let d = dyd[i] * g;
                        dx[i] = s / n * (n * d - sum_d - cache.x_hat[i] * sum_dx);
                    }
                }
            }
        }
    }
    Ok(NormGrads {
        dx: Tensor::from_vec(&cache.shape, dx)?,
        dgamma: Tensor::from_vec(&[c], dgamma)?,
        dbeta: Tensor::from_vec(&[c], dbeta)?,
    })
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// Normalize over the last axis, then apply `gamma`, `beta`.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = *x.shape().last().unwrap();
    for t in [gamma.shape(), beta.shape()] {
        if t != [c] {
            return Err(Error::dim("layernorm", x.shape(), t));
        }
    }
    if eps <= T::zero() {
        return Err(Error::config("layernorm: eps must be positive"));
    }
    let n = T::from_usize(c).unwrap();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / c);
    for (row, (xh, yr)) in x
        .data()
        .chunks(c)
        .zip(x_hat.chunks_mut(c).zip(y.chunks_mut(c)))
    {
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let s = T::one() / (var + eps).sqrt();
        inv_std.push(s);
        for i in 0..c {
            xh[i] = (row[i] - mu) * s;
            yr[i] = gamma.data()[i] * xh[i] + beta.data()[i];
        }
    }
    let cache = LayerNormCache {
        x_hat,
        inv_std,
        shape: x.shape().to_vec(),
    };
    Ok((Tensor::from_vec(x.shape(), y)?, cache))
}

pub fn layernorm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<NormGrads<T>> {
    dy.expect_shape("layernorm_backward", &cache.shape)?;
    let c = *cache.shape.last().unwrap();
    let n = T::from_usize(c).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (r, ((g_row, xh), dx_row)) in dy
        .data()
        .chunks(c)
        .zip(cache.x_hat.chunks(c))
        .zip(dx.chunks_mut(c))
        .enumerate()
    {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..c {
            dgamma[i] += g_row[i] * xh[i];
            dbeta[i] += g_row[i];
            let d = g_row[i] * gamma.data()[i];
            sum_d += d;
            sum_dx += d * xh[i];
        }
        let s = cache.inv_std[r];
        for i in 0..c {
            let d = g_row[i] * gamma.data()[i];
            dx_row[i] = s / n * (n * d - sum_d - xh[i] * sum_dx);
        }
    }
    Ok(NormGrads {
        dx: Tensor::from_vec(&cache.shape, dx)?,
        dgamma: Tensor::from_vec(&[c], dgamma)?,
        dbeta: Tensor::from_vec(&[c], dbeta)?,
    })
}
