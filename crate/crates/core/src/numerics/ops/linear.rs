use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// `y[l, o] = sum_i w[o, i] * x[l, i] + b[o]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (l, cin, cout) = check(x, w, b)?;
    let mut y = vec![T::zero(); l * cout];
    if let Some(b) = b {
        for row in y.chunks_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(
        l,
        cin,
        cout,
        T::one(),
        x.data(),
        false,
        w.data(),
        true,
        T::one(),
        &mut y,
    );
    Tensor::from_vec(&[l, cout], y)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (l, cin, cout) = check(x, w, None)?;
    dy.expect_shape("linear_backward", &[l, cout])?;
    let mut dx = vec![T::zero(); l * cin];
    T::gemm(
        l,
        cout,
        cin,
        T::one(),
        dy.data(),
        false,
        w.data(),
        false,
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); cout * cin];
    T::gemm(
        cout,
        l,
        cin,
        T::one(),
        dy.data(),
        true,
        x.data(),
        false,
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); cout];
    for row in dy.data().chunks(cout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::from_vec(&[l, cin], dx)?,
        dw: Tensor::from_vec(&[cout, cin], dw)?,
        db: Tensor::from_vec(&[cout], db)?,
    })
}

fn check<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [w.dim(0)] {
            return Err(Error::dim("linear bias", w.shape(), b.shape()));
        }
    }
    Ok((x.dim(0), x.dim(1), w.dim(0)))
}
