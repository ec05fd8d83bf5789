//! Reductions and normalisations: sums, global average pooling, softmax and
//! channel layer norm.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackwardOp, GradSink, Var};

struct SumAllBw {
    x_id: usize,
    shape: Vec<usize>,
    inv_count: f64,
}

impl<T: Scalar> BackwardOp<T> for SumAllBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let gv = g.data()[0] * T::cast(self.inv_count);
        if let Some(dst) = sink.entry(self.x_id, &self.shape) {
            for v in dst.data_mut() {
                *v += gv;
            }
        }
    }
}

struct GapBw {
    x_id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for GapBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (b, c, d, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let inv = T::one() / T::cast(d * w);
        if let Some(dst) = sink.entry(self.x_id, &self.shape) {
            for bi in 0..b {
                for ci in 0..c {
                    let gv = g.data()[bi * c + ci] * inv;
                    let base = (bi * c + ci) * d * w;
                    for i in 0..d * w {
                        dst.data_mut()[base + i] += gv;
                    }
                }
            }
        }
    }
}

struct SoftmaxBw<T: Scalar> {
    x_id: usize,
    y: Arc<Tensor<T>>,
    axis: usize,
}

impl<T: Scalar> BackwardOp<T> for SoftmaxBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let shape = self.y.shape().to_vec();
        let strides = self.y.strides();
        let n = shape[self.axis];
        let stride = strides[self.axis];
        let outer = self.y.numel() / n;
        if let Some(dst) = sink.entry(self.x_id, &shape) {
            for o in 0..outer {
                let base = lane_base(o, &shape, &strides, self.axis);
                let mut dot = T::zero();
                for k in 0..n {
                    let i = base + k * stride;
                    dot += g.data()[i] * self.y.data()[i];
                }
                for k in 0..n {
                    let i = base + k * stride;
                    dst.data_mut()[i] += self.y.data()[i] * (g.data()[i] - dot);
                }
            }
        }
    }
}

/// Linear offset of the `o`-th lane running along `axis`.
fn lane_base(o: usize, shape: &[usize], strides: &[usize], axis: usize) -> usize {
    let mut rem = o;
    let mut base = 0;
    for d in (0..shape.len()).rev() {
        if d == axis {
            continue;
        }
        let size = shape[d];
        base += (rem % size) * strides[d];
        rem /= size;
    }
    base
}

struct LayerNormBw<T: Scalar> {
    x_id: usize,
    gamma_id: usize,
    beta_id: usize,
    x: Arc<Tensor<T>>,
    gamma: Arc<Tensor<T>>,
    eps: f64,
}

impl<T: Scalar> BackwardOp<T> for LayerNormBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let shape = self.x.shape().to_vec();
        let (b, c, d, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = d * w;
        let eps = T::cast(self.eps);
        let inv_c = T::one() / T::cast(c);

        let mut dx = Tensor::zeros(shape.clone());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];

        for bi in 0..b {
            for p in 0..plane {
                // recompute per-location statistics
                let mut mean = T::zero();
                for ci in 0..c {
                    mean += self.x.data()[(bi * c + ci) * plane + p];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ci in 0..c {
                    let v = self.x.data()[(bi * c + ci) * plane + p] - mean;
                    var += v * v;
                }
                var = var * inv_c;
                let inv_std = T::one() / (var + eps).sqrt();

                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ci in 0..c {
                    let i = (bi * c + ci) * plane + p;
                    let xhat = (self.x.data()[i] - mean) * inv_std;
                    let go = g.data()[i];
                    dgamma[ci] += go * xhat;
                    dbeta[ci] += go;
                    let dxhat = go * self.gamma.data()[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for ci in 0..c {
                    let i = (bi * c + ci) * plane + p;
                    let xhat = (self.x.data()[i] - mean) * inv_std;
                    let dxhat = g.data()[i] * self.gamma.data()[ci];
                    dx.data_mut()[i] += inv_std
                        * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                }
            }
        }

        if sink.wants(self.x_id) {
            sink.add(self.x_id, dx);
        }
        if let Some(dst) = sink.entry(self.gamma_id, &[c]) {
            for (a, v) in dst.data_mut().iter_mut().zip(&dgamma) {
                *a += *v;
            }
        }
        if let Some(dst) = sink.entry(self.beta_id, &[c]) {
            for (a, v) in dst.data_mut().iter_mut().zip(&dbeta) {
                *a += *v;
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Var<T>> {
        let s = self.value().sum();
        let bw = SumAllBw {
            x_id: self.id,
            shape: self.shape().to_vec(),
            inv_count: 1.0,
        };
        Ok(self.record(Tensor::scalar(s), Some(Box::new(bw)), self.needs_grad))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Result<Var<T>> {
        let n = self.value().numel();
        let s = self.value().sum() / T::cast(n);
        let bw = SumAllBw {
            x_id: self.id,
            shape: self.shape().to_vec(),
            inv_count: 1.0 / n as f64,
        };
        Ok(self.record(Tensor::scalar(s), Some(Box::new(bw)), self.needs_grad))
    }

    /// Mean over the spatial axes of a `[B, C, D, W]` tensor, to `[B, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Var<T>> {
        if self.shape().len() != 4 {
            return Err(Error::shape("global_avg_pool expects [B, C, D, W]"));
        }
        let (b, c, d, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let inv = T::one() / T::cast(d * w);
        let out = Tensor::from_fn(vec![b, c, 1, 1], |i| {
            let base = i * d * w;
            let mut acc = T::zero();
            for k in 0..d * w {
                acc += self.value().data()[base + k];
            }
            acc * inv
        });
        let bw = GapBw { x_id: self.id, shape: self.shape().to_vec() };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }

    /// Softmax along `axis`, numerically stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let strides = self.value().strides();
        let n = shape[axis];
        let stride = strides[axis];
        let outer = self.value().numel() / n;
        let mut out = Tensor::zeros(shape.clone());
        for o in 0..outer {
            let base = lane_base(o, &shape, &strides, axis);
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(self.value().data()[base + k * stride]);
            }
            let mut z = T::zero();
            for k in 0..n {
                let e = (self.value().data()[base + k * stride] - m).exp();
                out.data_mut()[base + k * stride] = e;
                z += e;
            }
            let inv = T::one() / z;
            for k in 0..n {
                out.data_mut()[base + k * stride] *= inv;
            }
        }
        let out_var = self.record(out, None, self.needs_grad);
        if self.needs_grad {
            let bw = SoftmaxBw { x_id: self.id, y: out_var.value_arc(), axis };
            self.tape.inner.borrow_mut().nodes[out_var.id].backward = Some(Box::new(bw));
        }
        Ok(out_var)
    }

    /// Layer normalisation over the channel axis of `[B, C, D, W]`, with
    /// learnable per-channel scale and shift.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        self.check_same_tape(gamma)?;
        self.check_same_tape(beta)?;
        if self.shape().len() != 4 {
            return Err(Error::shape("layer_norm expects [B, C, D, W]"));
        }
        let (b, c, d, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm scale/shift must have shape [{c}]"
            )));
        }
        let plane = d * w;
        let inv_c = T::one() / T::cast(c);
        let eps_t = T::cast(eps);
        let mut out = Tensor::zeros(self.shape().to_vec());
        for bi in 0..b {
            for p in 0..plane {
                let mut mean = T::zero();
                for ci in 0..c {
                    mean += self.value().data()[(bi * c + ci) * plane + p];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ci in 0..c {
                    let v = self.value().data()[(bi * c + ci) * plane + p] - mean;
                    var += v * v;
                }
                var = var * inv_c;
                let inv_std = T::one() / (var + eps_t).sqrt();
                for ci in 0..c {
                    let i = (bi * c + ci) * plane + p;
                    let xhat = (self.value().data()[i] - mean) * inv_std;
                    out.data_mut()[i] =
                        gamma.value().data()[ci] * xhat + beta.value().data()[ci];
                }
            }
        }
        let needs = self.needs_grad || gamma.needs_grad || beta.needs_grad;
        let bw = LayerNormBw {
            x_id: self.id,
            gamma_id: gamma.id,
            beta_id: beta.id,
            x: self.value_arc(),
            gamma: gamma.value_arc(),
            eps,
        };
        Ok(self.record(out, Some(Box::new(bw)), needs))
    }
}
