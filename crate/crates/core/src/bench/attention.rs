//! Quadratic cross-attention baseline for runtime comparisons. Forward only.

use crate::error::{Error, Result};
use crate::model::layers::{from_tokens, to_tokens};
use crate::numerics::ops::linear;
use crate::numerics::{Rng, Scalar, Tensor};

/// Largest token count the baseline accepts.
pub const ATTENTION_MAX_TOKENS: usize = 1 << 14;

/// Queries processed per block; bounds the score buffer to `BLOCK * L`.
const BLOCK: usize = 64;

/// Bias-free `[C, C]` query, key and value maps.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn random(channels: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut m = || {
            Tensor::from_fn(&[channels, channels], |_| {
                T::from_f64_lossy(rng.uniform_range(-bound, bound))
            })
        };
        Self {
            wq: m(),
            wk: m(),
            wv: m(),
        }
    }
}

/// `softmax(Q_R K_T^T / sqrt(C)) V_T` over `[C, H, W]` features; queries from RGB.
pub fn naive_cross_attention<T: Scalar>(
    f_r: &Tensor<T>,
    f_t: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    if f_r.shape() != f_t.shape() || f_r.rank() != 3 {
        return Err(Error::dim("cross_attention", f_r.shape(), f_t.shape()));
    }
    let (c, h, wd) = (f_r.dim(0), f_r.dim(1), f_r.dim(2));
    let l = h * wd;
    if l > ATTENTION_MAX_TOKENS {
        return Err(Error::SizeGuard {
            op: "cross_attention",
            len: l,
            limit: ATTENTION_MAX_TOKENS,
        });
    }
    let q = linear(&to_tokens(f_r)?, &w.wq, None)?;
    let k = linear(&to_tokens(f_t)?, &w.wk, None)?;
    let v = linear(&to_tokens(f_t)?, &w.wv, None)?;
    let scale = T::from_f64_lossy(1.0 / (c as f64).sqrt());
    let mut out = vec![T::zero(); l * c];
    let mut scores = vec![T::zero(); BLOCK * l];
    for start in (0..l).step_by(BLOCK) {
        let rows = BLOCK.min(l - start);
        let s = &mut scores[..rows * l];
        T::gemm(
            rows,
            c,
            l,
            scale,
            &q.data()[start * c..(start + rows) * c],
            false,
            k.data(),
            true,
            T::zero(),
            s,
        );
        for row in s.chunks_mut(l) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        T::gemm(
            rows,
            l,
            c,
            T::one(),
            s,
            false,
            v.data(),
            false,
            T::zero(),
            &mut out[start * c..(start + rows) * c],
        );
    }
    from_tokens(&Tensor::from_vec(&[l, c], out)?, h, wd)
}
