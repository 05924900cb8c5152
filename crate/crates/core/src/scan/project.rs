use super::params::SsmDirectionParams;
use super::sequence::InterleavedSequence;
use crate::error::{Error, Result};
use crate::numerics::ops::{linear, linear_backward, sigmoid};
use crate::numerics::{Scalar, Tensor};

/// Input-dependent selective-scan parameters of every token.
#[derive(Clone, Debug)]
pub struct Projection<T> {
    /// `[J, N]`
    pub b: Tensor<T>,
    /// `[J, N]`
    pub c: Tensor<T>,
    /// `[J, C]`, positive when the softplus is enabled.
    pub delta: Tensor<T>,
    /// `[J, C]` step size before the activation.
    pub delta_pre: Tensor<T>,
    /// `[J, R]` low-rank intermediate.
    pub delta_low: Tensor<T>,
}

/// `B = W_B x`, `C = W_C x`, `delta = act(W_up (W_down x) + bias)` for every token `x`.
pub fn project_parameters<T: Scalar>(
    seq: &InterleavedSequence<T>,
    p: &SsmDirectionParams<T>,
) -> Result<Projection<T>> {
    project_tokens(&seq.tokens, p)
}

pub fn project_tokens<T: Scalar>(
    tokens: &Tensor<T>,
    p: &SsmDirectionParams<T>,
) -> Result<Projection<T>> {
    if tokens.rank() != 2 || tokens.dim(1) != p.channels() {
        return Err(Error::dim(
            "project_parameters",
            tokens.shape(),
            p.d.value.shape(),
        ));
    }
    let b = linear(tokens, &p.w_b.value, None)?;
    let c = linear(tokens, &p.w_c.value, None)?;
    let delta_low = linear(tokens, &p.w_dt_down.value, None)?;
    let delta_pre = linear(&delta_low, &p.w_dt_up.value, Some(&p.dt_bias.value))?;
    let delta = delta_pre.map(|z| p.delta_activation(z));
    Ok(Projection {
        b,
        c,
        delta,
        delta_pre,
        delta_low,
    })
}

/// Gradients of the projection weights.
#[derive(Clone, Debug)]
pub struct ProjectionGrads<T> {
    pub dtokens: Tensor<T>,
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub w_dt_down: Tensor<T>,
    pub w_dt_up: Tensor<T>,
    pub dt_bias: Tensor<T>,
}

pub fn project_backward<T: Scalar>(
    tokens: &Tensor<T>,
    p: &SsmDirectionParams<T>,
    proj: &Projection<T>,
    db: &Tensor<T>,
    dc: &Tensor<T>,
    ddelta: &Tensor<T>,
) -> Result<ProjectionGrads<T>> {
    let dz = if p.delta_softplus {
        proj.delta_pre.zip_map(ddelta, |z, g| g * sigmoid(z))?
    } else {
        ddelta.clone()
    };
    let gb = linear_backward(tokens, &p.w_b.value, db)?;
    let gc = linear_backward(tokens, &p.w_c.value, dc)?;
    let gup = linear_backward(&proj.delta_low, &p.w_dt_up.value, &dz)?;
    let gdown = linear_backward(tokens, &p.w_dt_down.value, &gup.dx)?;
    let mut dtokens = gb.dx;
    dtokens.add_assign(&gc.dx)?;
    dtokens.add_assign(&gdown.dx)?;
    Ok(ProjectionGrads {
        dtokens,
        w_b: gb.dw,
        w_c: gc.dw,
        w_dt_down: gdown.dw,
        w_dt_up: gup.dw,
        dt_bias: gup.db,
    })
}

/// Zero-order-hold style discretization of one token:
/// `A_bar[c, n] = exp(delta[c] * A[c, n])`, `B_bar[c, n] = delta[c] * B[n]`.
pub fn discretize<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let &[c, n] = a.shape() else {
        return Err(Error::dim("discretize", a.shape(), b.shape()));
    };
    b.expect_shape("discretize B", &[n])?;
    delta.expect_shape("discretize delta", &[c])?;
    let mut a_bar = vec![T::zero(); c * n];
    let mut b_bar = vec![T::zero(); c * n];
    for ch in 0..c {
        let dt = delta.data()[ch];
        for s in 0..n {
            let v = (dt * a.data()[ch * n + s]).exp();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "discretized state matrix".into(),
                    location: format!("channel {ch} state {s}"),
                });
            }
            a_bar[ch * n + s] = v;
            b_bar[ch * n + s] = dt * b.data()[s];
        }
    }
    Ok((
        Tensor::from_vec(&[c, n], a_bar)?,
        Tensor::from_vec(&[c, n], b_bar)?,
    ))
}
