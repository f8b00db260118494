use super::Real;
use crate::error::{Error, Result};

/// Epsilon inside the RMS normalization square root.
pub const RMS_EPS: f64 = 1e-6;

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a[m x k] * b[k x n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), &a.data, k, 1, &b.data, n, 1, T::zero(), &mut out, n, 1);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape.len() {
        return Err(Error::Config(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let extent = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..extent)
                .map(|j| x.data[idx(j)])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..extent {
                let e = (x.data[idx(j)] - max).exp();
                out.data[idx(j)] = e;
                sum = sum + e;
            }
            for j in 0..extent {
                out.data[idx(j)] = out.data[idx(j)] / sum;
            }
        }
    }
    Ok(out)
}

/// `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
pub fn rmsnorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.numel() != d {
        return Err(Error::shape("rmsnorm", &x.shape, &gain.shape));
    }
    let mut out = x.clone();
    rmsnorm_rows(&x.data, &gain.data, d, &mut out.data, None);
    Ok(out)
}

pub(crate) fn rmsnorm_rows<T: Real>(
    x: &[T],
    gain: &[T],
    d: usize,
    out: &mut [T],
    mut inv_rms: Option<&mut Vec<T>>,
) {
    let eps = T::from_f64_lossy(RMS_EPS);
    let dn = T::from_usize(d).unwrap();
    for (row, out_row) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let inv = (ms + eps).sqrt().recip();
        for ((o, &v), &g) in out_row.iter_mut().zip(row).zip(gain) {
            *o = g * v * inv;
        }
        if let Some(buf) = inv_rms.as_deref_mut() {
            buf.push(inv);
        }
    }
}
