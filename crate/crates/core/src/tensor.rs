//! Dense row-major tensor of up to four axes.
//!
//! This is the plain value type; differentiable computation wraps it in
//! [`crate::autodiff::Var`]. Axes follow the `[batch, channel, depth, width]`
//! convention, with lower-rank tensors right-aligned for broadcasting.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_NDIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.len() > MAX_NDIM {
            return Err(Error::shape(format!(
                "tensor rank must be 1..={MAX_NDIM}, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::shape(format!("zero-sized axis in {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        let lin: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[lin]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let strides = self.strides();
        let lin: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[lin] = v;
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.len() > MAX_NDIM || shape.is_empty() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |a, &b| a.max(b))
    }

    pub fn min_value(&self) -> T {
        self.data.iter().fold(T::infinity(), |a, &b| a.min(b))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }
}

/// Broadcast result shape of two right-aligned shapes, or an error if some
/// axis pair is neither equal nor 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i >= nd - a.len() { a[i - (nd - a.len())] } else { 1 };
        let db = if i >= nd - b.len() { b[i - (nd - b.len())] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
    }
    Ok(out)
}

/// Effective strides of `shape` when broadcast to `out_shape`: broadcast axes
/// get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut phys = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        phys[i] = phys[i + 1] * shape[i + 1];
    }
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = phys[i - offset];
        }
    }
    out
}

/// Elementwise combine with broadcasting.
pub fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    if out_shape == a.shape() && out_shape == b.shape() {
        // fast path: identical shapes
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor { shape: out_shape, data });
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut padded = [1usize; MAX_NDIM];
    let nd = out_shape.len();
    padded[MAX_NDIM - nd..].copy_from_slice(&out_shape);
    let mut wa = [0usize; MAX_NDIM];
    let mut wb = [0usize; MAX_NDIM];
    wa[MAX_NDIM - nd..].copy_from_slice(&sa);
    wb[MAX_NDIM - nd..].copy_from_slice(&sb);

    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for i0 in 0..padded[0] {
        for i1 in 0..padded[1] {
            for i2 in 0..padded[2] {
                let base_a = i0 * wa[0] + i1 * wa[1] + i2 * wa[2];
                let base_b = i0 * wb[0] + i1 * wb[1] + i2 * wb[2];
                for i3 in 0..padded[3] {
                    let va = a.data[base_a + i3 * wa[3]];
                    let vb = b.data[base_b + i3 * wb[3]];
                    data.push(f(va, vb));
                }
            }
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Sum `t` down to `target` shape, undoing broadcasting (used by gradients).
pub fn reduce_to_shape<T: Scalar>(t: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if t.shape() == target {
        return t.clone();
    }
    let nd = t.ndim();
    let offset = nd - target.len();
    let mut out = Tensor::zeros(target.to_vec());
    let strides_t = t.strides();
    let out_strides = out.strides();
    let mut idx = vec![0usize; nd];
    for lin in 0..t.numel() {
        // decode multi-index of the source
        let mut rem = lin;
        for d in 0..nd {
            idx[d] = rem / strides_t[d];
            rem %= strides_t[d];
        }
        let mut out_lin = 0;
        for d in offset..nd {
            let td = target[d - offset];
            let i = if td == 1 { 0 } else { idx[d] };
            out_lin += i * out_strides[d - offset];
        }
        out.data[out_lin] += t.data[lin];
    }
    out
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 2, 3], &[3]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn zip_broadcast_row_plus_col() {
        let a = Tensor::new(vec![2, 1], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![10.0f64, 20.0, 30.0]).unwrap();
        let c = zip_broadcast(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r.data(), &[6.0, 15.0]);
        let r2 = reduce_to_shape(&g, &[3]);
        assert_eq!(r2.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
