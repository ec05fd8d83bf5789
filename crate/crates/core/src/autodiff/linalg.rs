//! Batched matrix product and the dense linear map.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackwardOp, GradSink, Var};

/// `out[m, n] += a[m, k] * b[k, n]` on raw row-major slices.
fn matmul_slice<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`.
fn matmul_at_b<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`.
fn matmul_g_bt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc += *gv * *bv;
            }
            *o += acc;
        }
    }
}

struct MatmulBw<T: Scalar> {
    a_id: usize,
    b_id: usize,
    a: Arc<Tensor<T>>,
    b: Arc<Tensor<T>>,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_broadcast: bool,
}

impl<T: Scalar> BackwardOp<T> for MatmulBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if sink.wants(self.a_id) {
            let mut da = Tensor::zeros(self.a.shape().to_vec());
            for bi in 0..self.batch {
                let b_off = if self.b_broadcast { 0 } else { bi * k * n };
                matmul_g_bt(
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &self.b.data()[b_off..b_off + k * n],
                    &mut da.data_mut()[bi * m * k..(bi + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
            sink.add(self.a_id, da);
        }
        if sink.wants(self.b_id) {
            let mut db = Tensor::zeros(self.b.shape().to_vec());
            for bi in 0..self.batch {
                let b_off = if self.b_broadcast { 0 } else { bi * k * n };
                matmul_at_b(
                    &self.a.data()[bi * m * k..(bi + 1) * m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut db.data_mut()[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                );
            }
            sink.add(self.b_id, db);
        }
    }
}

struct LinearBw<T: Scalar> {
    x_id: usize,
    w_id: usize,
    bias_id: Option<usize>,
    x: Arc<Tensor<T>>,
    w: Arc<Tensor<T>>,
    rows: usize,
    d_in: usize,
    d_out: usize,
}

impl<T: Scalar> BackwardOp<T> for LinearBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (rows, d_in, d_out) = (self.rows, self.d_in, self.d_out);
        if sink.wants(self.x_id) {
            let mut dx = Tensor::zeros(self.x.shape().to_vec());
            matmul_g_bt(g.data(), self.w.data(), dx.data_mut(), rows, d_in, d_out);
            sink.add(self.x_id, dx);
        }
        if sink.wants(self.w_id) {
            let mut dw = Tensor::zeros(self.w.shape().to_vec());
            matmul_at_b(self.x.data(), g.data(), dw.data_mut(), rows, d_in, d_out);
            sink.add(self.w_id, dw);
        }
        if let Some(bias_id) = self.bias_id {
            if let Some(db) = sink.entry(bias_id, &[d_out]) {
                for r in 0..rows {
                    for j in 0..d_out {
                        db.data_mut()[j] += g.data()[r * d_out + j];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    /// Batched matrix product. Both operands must share leading batch axes,
    /// or `b` may be a plain `[k, n]` matrix applied to every batch element.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.check_same_tape(other)?;
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul operands must have rank >= 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dims disagree: {sa:?} x {sb:?}"
            )));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let b_broadcast = sb.len() == 2 && sa.len() > 2;
        if !b_broadcast && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(format!(
                "matmul batch dims disagree: {sa:?} x {sb:?}"
            )));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = Tensor::zeros(out_shape);
        for bi in 0..batch_a {
            let b_off = if b_broadcast { 0 } else { bi * k * n };
            matmul_slice(
                &self.value().data()[bi * m * k..(bi + 1) * m * k],
                &other.value().data()[b_off..b_off + k * n],
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.needs_grad || other.needs_grad;
        let bw = MatmulBw {
            a_id: self.id,
            b_id: other.id,
            a: self.value_arc(),
            b: other.value_arc(),
            batch: batch_a,
            m,
            k,
            n,
            b_broadcast,
        };
        Ok(self.record(out, Some(Box::new(bw)), needs))
    }

    /// Dense map over the last axis: `y[.., j] = sum_i x[.., i] w[i, j] + b[j]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        self.check_same_tape(weight)?;
        if weight.shape().len() != 2 {
            return Err(Error::shape("linear weight must be [in, out]"));
        }
        let d_in = weight.shape()[0];
        let d_out = weight.shape()[1];
        let last = *self.shape().last().unwrap();
        if last != d_in {
            return Err(Error::shape(format!(
                "linear: input last axis {last} != weight in {d_in}"
            )));
        }
        if let Some(b) = bias {
            self.check_same_tape(b)?;
            if b.shape() != [d_out] {
                return Err(Error::shape(format!(
                    "linear bias must be [{d_out}]"
                )));
            }
        }
        let rows = self.value().numel() / d_in;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(out_shape);
        matmul_slice(
            self.value().data(),
            weight.value().data(),
            out.data_mut(),
            rows,
            d_in,
            d_out,
        );
        if let Some(b) = bias {
            for r in 0..rows {
                for j in 0..d_out {
                    out.data_mut()[r * d_out + j] += b.value().data()[j];
                }
            }
        }
        let needs = self.needs_grad
            || weight.needs_grad
            || bias.map(|b| b.needs_grad).unwrap_or(false);
        let bw = LinearBw {
            x_id: self.id,
            w_id: weight.id,
            bias_id: bias.map(|b| b.id),
            x: self.value_arc(),
            w: weight.value_arc(),
            rows,
            d_in,
            d_out,
        };
        Ok(self.record(out, Some(Box::new(bw)), needs))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gradcheck, Tape};
    use super::*;

    #[test]
    fn identity_matmul_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 3], |i| i as f64 * 0.5 - 2.0));
        let eye = tape.constant(Tensor::from_fn(vec![3, 3], |i| {
            if i / 3 == i % 3 {
                1.0
            } else {
                0.0
            }
        }));
        let y = eye.matmul(&x).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn one_by_one_matmul_is_scalar_mul() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1], vec![-0.5]).unwrap());
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.value().data(), &[-1.5]);
    }

    #[test]
    fn matmul_gradcheck_batched_and_broadcast() {
        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let y = xs[0].matmul(&xs[1]).unwrap();
            y.mul(&y).unwrap().sum_all().unwrap()
        };
        let a = Tensor::from_fn(vec![2, 3, 4], |i| 0.1 * i as f64 - 1.0);
        let b = Tensor::from_fn(vec![2, 4, 2], |i| (i as f64 * 0.37).sin());
        gradcheck::check(f, &[a.clone(), b], 1e-6).unwrap();

        let b_shared = Tensor::from_fn(vec![4, 2], |i| 0.21 * i as f64 - 0.5);
        gradcheck::check(f, &[a, b_shared], 1e-6).unwrap();
    }

    #[test]
    fn matmul_dim_mismatch_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn linear_gradcheck_with_bias() {
        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let y = xs[0].linear(&xs[1], Some(&xs[2])).unwrap();
            y.mul(&y).unwrap().sum_all().unwrap()
        };
        let x = Tensor::from_fn(vec![3, 4], |i| 0.3 * i as f64 - 1.7);
        let w = Tensor::from_fn(vec![4, 2], |i| (0.11 * i as f64).cos() * 0.5);
        let b = Tensor::from_fn(vec![2], |i| 0.1 * i as f64);
        gradcheck::check(f, &[x, w, b], 1e-6).unwrap();
    }
}
