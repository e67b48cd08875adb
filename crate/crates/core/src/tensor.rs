//! Dense row-major tensors and the handful of map operations the saliency
//! pipeline needs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major real tensor of rank 1 to 3.
///
/// Shapes are read as `(C, H, W)` for feature-map stacks, `(H, W)` for
/// single-channel maps and `(N)` for vectors. Every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!("rank {} not in 1..=3", shape.len())));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Build a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
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

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    /// `(H, W)` of a rank-2 tensor.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((h, w)),
            _ => Err(Error::Shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn scale(&self, k: T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&v| v * k).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scale"));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Convert element type through the `f64` accumulator.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_acc(v.acc())).collect(),
        }
    }
}

/// Average a `(C, H, W)` stack over channels into one `(H, W)` map.
pub fn channel_mean<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = t.chw()?;
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for ch in t.data.chunks_exact(plane) {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += v.acc();
        }
    }
    let inv = 1.0 / c as f64;
    Tensor::new(vec![h, w], acc.into_iter().map(|a| T::from_acc(a * inv)).collect())
}

/// Elementwise product of two equally shaped maps.
pub fn pointwise_multiply<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "pointwise multiply of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let data: Vec<T> = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pointwise multiply"));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Min-max rescale into `[0, 1]`. A constant map becomes all zeros.
pub fn normalize_unit_interval<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (t.min().acc(), t.max().acc());
    let data = if hi > lo {
        let span = hi - lo;
        t.data
            .iter()
            .map(|&v| T::from_acc(((v.acc() - lo) / span).clamp(0.0, 1.0)))
            .collect()
    } else {
        vec![T::zero(); t.len()]
    };
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}
