use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride,
            pad,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }
}

pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn geometry(x_shape: &[usize], kernel: &Tensor<impl Scalar>, spec: ConvSpec) -> Result<Geometry> {
    let &[cin, h, w] = x_shape else {
        return Err(Error::dim("conv2d input", x_shape, kernel.shape()));
    };
    let &[cout, cin_g, k, k2] = kernel.shape() else {
        return Err(Error::dim("conv2d kernel", x_shape, kernel.shape()));
    };
    if !(k == 1 || k == 3) || k != k2 {
        return Err(Error::config(format!(
            "conv2d: kernel size {k}x{k2} (supported: 1, 3)"
        )));
    }
    if !(spec.stride == 1 || spec.stride == 2) {
        return Err(Error::config(format!(
            "conv2d: stride {} (supported: 1, 2)",
            spec.stride
        )));
    }
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::config(format!(
            "conv2d: groups {} must divide Cin {cin} and Cout {cout}",
            spec.groups
        )));
    }
    if cin_g != cin / spec.groups {
        return Err(Error::dim("conv2d", x_shape, kernel.shape()));
    }
    if h + 2 * spec.pad < k || w + 2 * spec.pad < k {
        return Err(Error::config(format!(
            "conv2d: input {h}x{w} smaller than kernel"
        )));
    }
    Ok(Geometry {
        cin,
        h,
        w,
        cout,
        k,
        oh: conv_output_size(h, k, spec.stride, spec.pad),
        ow: conv_output_size(w, k, spec.stride, spec.pad),
        spec,
    })
}

/// Gather `[cin_g * k * k, oh * ow]` patches of one group.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, group: usize, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.pad as isize);
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin_g() {
        let plane = &x[(group * g.cin_g() + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..g.oh {
                    let iy = (oy * s + ky) as isize - p;
                    let out = &mut row[oy * g.ow..][..g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add patches back (adjoint of [`im2col`]).
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, group: usize, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.pad as isize);
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[(group * g.cin_g() + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..g.oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation of one `[Cin, H, W]` map.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), kernel, spec)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", &[g.cout])?;
    }
    let mut y = vec![T::zero(); g.cout * g.oh * g.ow];
    conv2d_into(x.data(), kernel.data(), bias.map(|b| b.data()), &g, &mut y);
    Tensor::from_vec(&[g.cout, g.oh, g.ow], y)
}

fn conv2d_into<T: Scalar>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &Geometry, y: &mut [T]) {
    let ohw = g.oh * g.ow;
    let kk = g.cin_g() * g.k * g.k;
    if let Some(b) = bias {
        for (plane, &bv) in y.chunks_mut(ohw).zip(b) {
            plane.fill(bv);
        }
    }
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * ohw]
    };
    for group in 0..g.spec.groups {
        let w = &kernel[group * g.cout_g() * kk..][..g.cout_g() * kk];
        let out = &mut y[group * g.cout_g() * ohw..][..g.cout_g() * ohw];
        let src = if g.pointwise() {
            &x[group * g.cin_g() * ohw..][..kk * ohw]
        } else {
            im2col(x, g, group, &mut cols);
            &cols[..]
        };
        T::gemm(
            g.cout_g(),
            kk,
            ohw,
            T::one(),
            w,
            false,
            src,
            false,
            T::one(),
            out,
        );
    }
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dkernel: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    let g = geometry(x.shape(), kernel, spec)?;
    dy.expect_shape("conv2d_backward", &[g.cout, g.oh, g.ow])?;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    conv2d_backward_into(x.data(), kernel.data(), dy.data(), &g, &mut dx, &mut dk);
    let db = dy
        .data()
        .chunks(g.oh * g.ow)
        .map(|p| p.iter().copied().sum())
        .collect();
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dkernel: Tensor::from_vec(kernel.shape(), dk)?,
        dbias: Tensor::from_vec(&[g.cout], db)?,
    })
}

/// Accumulates (`+=`) the kernel gradient and writes `dx`.
fn conv2d_backward_into<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &Geometry,
    dx: &mut [T],
    dk: &mut [T],
) {
    let ohw = g.oh * g.ow;
    let kk = g.cin_g() * g.k * g.k;
    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { kk * ohw }];
    let mut dcols = vec![T::zero(); kk * ohw];
    for group in 0..g.spec.groups {
        let w = &kernel[group * g.cout_g() * kk..][..g.cout_g() * kk];
        let dw = &mut dk[group * g.cout_g() * kk..][..g.cout_g() * kk];
        let gy = &dy[group * g.cout_g() * ohw..][..g.cout_g() * ohw];
        let src = if g.pointwise() {
            &x[group * g.cin_g() * ohw..][..kk * ohw]
        } else {
            im2col(x, g, group, &mut cols);
            &cols[..]
        };
        T::gemm(
            g.cout_g(),
            ohw,
            kk,
            T::one(),
            gy,
            false,
            src,
            true,
            T::one(),
            dw,
        );
        if g.pointwise() {
            let out = &mut dx[group * g.cin_g() * ohw..][..kk * ohw];
            T::gemm(
                kk,
                g.cout_g(),
                ohw,
                T::one(),
                w,
                true,
                gy,
                false,
                T::one(),
                out,
            );
        } else {
            T::gemm(
                kk,
                g.cout_g(),
                ohw,
                T::one(),
                w,
                true,
                gy,
                false,
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, g, group, dx);
        }
    }
}

/// Batched convolution over `[B, Cin, H, W]`.
pub fn conv2d_batch<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim("conv2d_batch", x.shape(), kernel.shape()));
    }
    let b = x.dim(0);
    let g = geometry(&x.shape()[1..], kernel, spec)?;
    if let Some(bt) = bias {
        bt.expect_shape("conv2d bias", &[g.cout])?;
    }
    let per = g.cout * g.oh * g.ow;
    let mut y = vec![T::zero(); b * per];
    for (i, out) in y.chunks_mut(per).enumerate() {
        conv2d_into(x.slab(i), kernel.data(), bias.map(|t| t.data()), &g, out);
    }
    Tensor::from_vec(&[b, g.cout, g.oh, g.ow], y)
}

/// Batched adjoint; the kernel and bias gradients are summed over the batch.
pub fn conv2d_batch_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    let b = x.dim(0);
    let g = geometry(&x.shape()[1..], kernel, spec)?;
    dy.expect_shape("conv2d_batch_backward", &[b, g.cout, g.oh, g.ow])?;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let per_in = g.cin * g.h * g.w;
    for (i, dxi) in dx.chunks_mut(per_in).enumerate() {
        conv2d_backward_into(x.slab(i), kernel.data(), dy.slab(i), &g, dxi, &mut dk);
    }
    let ohw = g.oh * g.ow;
    let mut db = vec![T::zero(); g.cout];
    for (idx, plane) in dy.data().chunks(ohw).enumerate() {
        db[idx % g.cout] += plane.iter().copied().sum();
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dkernel: Tensor::from_vec(kernel.shape(), dk)?,
        dbias: Tensor::from_vec(&[g.cout], db)?,
    })
}
