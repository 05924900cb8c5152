use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Silu,
    Relu,
    Softplus,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Adjoint given the forward input `x`.
pub fn activation_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    x.zip_map(dy, |v, g| g * kind.derivative(v))
        .expect("dy shaped like x")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, random_like, weighted_sum};
    use crate::numerics::Rng;

    #[test]
    fn reference_values() {
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert!((Activation::Silu.apply(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((Activation::Softplus.apply(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0f64) >= 0.0);
    }

    #[test]
    fn adjoints_match_finite_differences() {
        let mut rng = Rng::new(4);
        for kind in [Activation::Silu, Activation::Softplus, Activation::Relu] {
            let x = random_like(&[3, 7], &mut rng);
            let proj = random_like(x.shape(), &mut rng);
            let dx = activation_backward(&x, &proj, kind);
            let report = grad_check(
                |t| weighted_sum(&activation(&t[0], kind), &proj),
                &[x],
                &[dx],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "{kind:?} {report:?}");
        }
    }
}
