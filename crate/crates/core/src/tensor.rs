//! Dense row-major tensors of rank at most four.

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

/// Dense tensor with a contiguous row-major buffer.
///
/// `shape.iter().product() == data.len()` always holds; rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: format!("rank exceeds {MAX_RANK}"),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                reason: format!("buffer holds {} elements, shape needs {n}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank exceeds {MAX_RANK}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .zip(self.strides())
            .map(|((&i, &extent), stride)| {
                assert!(i < extent, "index {i} out of bounds for extent {extent}");
                i * stride
            })
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape("zip_map", other)?;
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

    pub fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Sub-tensor at `index` along the leading axis (copied).
    pub fn outer(&self, index: usize) -> Self {
        assert!(!self.shape.is_empty() && index < self.shape[0]);
        let step = self.data.len() / self.shape[0];
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * step..(index + 1) * step].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Shape {
                shape: vec![],
                reason: "cannot stack zero tensors".into(),
            });
        };
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        check_rank(&shape)?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            first.same_shape("stack", t)?;
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }
}

/// Matrix product of `a: M x P` and `b: P x N`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, p, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    linalg::gemm(false, false, m, n, p, T::one(), &a.data, &b.data, T::zero(), &mut out.data);
    Ok(out)
}

/// I.i.d. Gaussian samples `mean + std * N(0, 1)`.
pub fn randn<T: Scalar>(shape: &[usize], rng: &mut Rng, mean: f64, std: f64) -> Tensor<T> {
    assert!(std >= 0.0, "randn: negative std {std}");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(mean + std * rng.normal()))
        .collect();
    Tensor::new(shape, data).expect("randn shape")
}

/// Mean and population variance (divisor = extent) along `axis`.
///
/// The reduced axis is removed from the output shape.
pub fn reduce_stats<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if axis >= t.rank() {
        return Err(Error::Shape {
            shape: t.shape.clone(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let count = t.shape[axis];
    if count == 0 {
        return Err(Error::Shape {
            shape: t.shape.clone(),
            reason: format!("axis {axis} is empty"),
        });
    }
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut out_shape = t.shape.clone();
    out_shape.remove(axis);
    let inv = T::one() / T::from_usize_lossy(count);

    let mut mean = vec![T::zero(); outer * inner];
    let mut var = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let base = o * count * inner;
        for j in 0..count {
            let row = &t.data[base + j * inner..base + (j + 1) * inner];
            for (m, &v) in mean[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean[o * inner..(o + 1) * inner] {
            *m *= inv;
        }
        for j in 0..count {
            let row = &t.data[base + j * inner..base + (j + 1) * inner];
            let means = &mean[o * inner..(o + 1) * inner];
            for ((s, &v), &m) in var[o * inner..(o + 1) * inner].iter_mut().zip(row).zip(means) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in &mut var[o * inner..(o + 1) * inner] {
            *s *= inv;
        }
    }
    Ok((Tensor::new(&out_shape, mean)?, Tensor::new(&out_shape, var)?))
}
