use super::scalar::{DType, Scalar};
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::config(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor shape {shape:?} has a zero dimension"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self::from_vec(shape, (0..len).map(&mut f).collect()).expect("shape product matches")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(op, &self.shape, shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Sum of elementwise products, accumulated in f64.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    /// Swap the two axes of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let [r, c] = self.shape[..] else {
            return Err(Error::dim("transpose2", &self.shape, &[0, 0]));
        };
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    /// Concatenate along axis 0 (channels for `[C, H, W]` maps).
    pub fn concat0(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim("concat0", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::from_vec(&shape, data)
    }

    /// Split along axis 0 into pieces with the given leading sizes.
    pub fn split0(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if sizes.iter().sum::<usize>() != self.shape[0] {
            return Err(Error::dim("split0", &self.shape, sizes));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut off = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[0] = s;
            out.push(Tensor::from_vec(
                &shape,
                self.data[off * inner..(off + s) * inner].to_vec(),
            )?);
            off += s;
        }
        Ok(out)
    }

    /// Concatenate along axis 1 (channels for `[B, C, H, W]` batches).
    pub fn concat1(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of nothing"))?;
        if first.rank() < 2 {
            return Err(Error::dim("concat1", &first.shape, &[]));
        }
        let lead = first.shape[0];
        let tail = &first.shape[2..];
        for p in parts {
            if p.rank() != first.rank() || p.shape[0] != lead || &p.shape[2..] != tail {
                return Err(Error::dim("concat1", &first.shape, &p.shape));
            }
        }
        let mid: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(lead * mid * tail.iter().product::<usize>());
        for i in 0..lead {
            for p in parts {
                data.extend_from_slice(p.slab(i));
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = mid;
        Tensor::from_vec(&shape, data)
    }

    /// Inverse of [`Tensor::concat1`].
    pub fn split1(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if self.rank() < 2 || sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::dim("split1", &self.shape, sizes));
        }
        let lead = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let mut parts: Vec<Vec<T>> = sizes
            .iter()
            .map(|&s| Vec::with_capacity(lead * s * inner))
            .collect();
        for i in 0..lead {
            let mut off = 0;
            for (part, &s) in parts.iter_mut().zip(sizes) {
                part.extend_from_slice(&self.slab(i)[off * inner..(off + s) * inner]);
                off += s;
            }
        }
        parts
            .into_iter()
            .zip(sizes)
            .map(|(data, &s)| {
                let mut shape = self.shape.clone();
                shape[1] = s;
                Tensor::from_vec(&shape, data)
            })
            .collect()
    }

    /// Borrow slice `i` along axis 0.
    pub fn slab(&self, i: usize) -> &[T] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[i * inner..(i + 1) * inner]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [T] {
        let inner: usize = self.shape[1..].iter().product();
        &mut self.data[i * inner..(i + 1) * inner]
    }

    /// Copy out slice `i` along axis 0 as its own tensor.
    pub fn index0(&self, i: usize) -> Self {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.slab(i).to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("stack of nothing"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }

    /// Max relative difference `|a-b| / max(|b|, floor)`.
    pub fn max_rel_diff(&self, other: &Self, floor: f64) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                (a - b).abs() / b.abs().max(floor)
            })
            .fold(0.0, f64::max)
    }
}
