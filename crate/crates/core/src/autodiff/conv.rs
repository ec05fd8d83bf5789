//! 2-D and axis-wise 1-D convolutions (cross-correlation convention), stride
//! 1 with zero same-padding. Only odd kernel sizes are accepted.
//!
//! Parallelism is over independent output planes, so results do not depend
//! on the worker count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackwardOp, GradSink, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvAxis {
    Depth,
    Width,
}

/// Accumulate `dst[z, w] += wgt * src[z + dz, w + dw]` over the in-bounds
/// window of a `[d, w]` plane pair.
fn shifted_axpy<T: Scalar>(
    dst: &mut [T],
    src: &[T],
    wgt: T,
    d: usize,
    w: usize,
    dz: isize,
    dw: isize,
) {
    if wgt == T::zero() {
        return;
    }
    let z_lo = (-dz).max(0);
    let z_hi = d as isize - dz.max(0);
    let w_lo = (-dw).max(0);
    let w_hi = w as isize - dw.max(0);
    if z_lo >= z_hi || w_lo >= w_hi {
        return;
    }
    let span = (w_hi - w_lo) as usize;
    for z in z_lo..z_hi {
        let src_start = ((z + dz) * w as isize + dw + w_lo) as usize;
        let dst_start = (z * w as isize + w_lo) as usize;
        let s = &src[src_start..src_start + span];
        let o = &mut dst[dst_start..dst_start + span];
        for (ov, sv) in o.iter_mut().zip(s) {
            *ov += wgt * *sv;
        }
    }
}

/// Dot of the overlapping windows: `sum_{z,w} a[z, w] * b[z + dz, w + dw]`.
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], d: usize, w: usize, dz: isize, dw: isize) -> T {
    let z_lo = (-dz).max(0);
    let z_hi = d as isize - dz.max(0);
    let w_lo = (-dw).max(0);
    let w_hi = w as isize - dw.max(0);
    let mut acc = T::zero();
    if z_lo >= z_hi || w_lo >= w_hi {
        return acc;
    }
    let span = (w_hi - w_lo) as usize;
    for z in z_lo..z_hi {
        let a_start = (z * w as isize + w_lo) as usize;
        let b_start = ((z + dz) * w as isize + dw + w_lo) as usize;
        let arow = &a[a_start..a_start + span];
        let brow = &b[b_start..b_start + span];
        for (av, bv) in arow.iter().zip(brow) {
            acc += *av * *bv;
        }
    }
    acc
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    wgt: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (b, cin, d, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kd, kw) = (wgt.shape()[0], wgt.shape()[2], wgt.shape()[3]);
    let (pd, pw) = (kd / 2, kw / 2);
    let plane = d * w;
    let mut out = Tensor::zeros(vec![b, cout, d, w]);
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, dst)| {
            let bi = pi / cout;
            let co = pi % cout;
            if let Some(bias) = bias {
                dst.fill(bias.data()[co]);
            }
            for ci in 0..cin {
                let src = &x.data()[(bi * cin + ci) * plane..(bi * cin + ci + 1) * plane];
                for dk in 0..kd {
                    for wk in 0..kw {
                        let wv = wgt.data()[((co * cin + ci) * kd + dk) * kw + wk];
                        shifted_axpy(
                            dst,
                            src,
                            wv,
                            d,
                            w,
                            dk as isize - pd as isize,
                            wk as isize - pw as isize,
                        );
                    }
                }
            }
        });
    out
}

struct Conv2dBw<T: Scalar> {
    x_id: usize,
    w_id: usize,
    bias_id: Option<usize>,
    x: Arc<Tensor<T>>,
    w: Arc<Tensor<T>>,
}

impl<T: Scalar> BackwardOp<T> for Conv2dBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (b, cin, d, w) = (
            self.x.shape()[0],
            self.x.shape()[1],
            self.x.shape()[2],
            self.x.shape()[3],
        );
        let (cout, kd, kw) = (self.w.shape()[0], self.w.shape()[2], self.w.shape()[3]);
        let (pd, pw) = (kd / 2, kw / 2);
        let plane = d * w;

        if sink.wants(self.x_id) {
            let mut dx = Tensor::zeros(self.x.shape().to_vec());
            dx.data_mut()
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(pi, dst)| {
                    let bi = pi / cin;
                    let ci = pi % cin;
                    for co in 0..cout {
                        let gp = &g.data()[(bi * cout + co) * plane..(bi * cout + co + 1) * plane];
                        for dk in 0..kd {
                            for wk in 0..kw {
                                let wv =
                                    self.w.data()[((co * cin + ci) * kd + dk) * kw + wk];
                                shifted_axpy(
                                    dst,
                                    gp,
                                    wv,
                                    d,
                                    w,
                                    pd as isize - dk as isize,
                                    pw as isize - wk as isize,
                                );
                            }
                        }
                    }
                });
            sink.add(self.x_id, dx);
        }

        if sink.wants(self.w_id) {
            let mut dw = Tensor::zeros(self.w.shape().to_vec());
            let block = cin * kd * kw;
            dw.data_mut()
                .par_chunks_mut(block)
                .enumerate()
                .for_each(|(co, dst)| {
                    for ci in 0..cin {
                        for dk in 0..kd {
                            for wk in 0..kw {
                                let mut acc = T::zero();
                                for bi in 0..b {
                                    let gp = &g.data()
                                        [(bi * cout + co) * plane..(bi * cout + co + 1) * plane];
                                    let xp = &self.x.data()
                                        [(bi * cin + ci) * plane..(bi * cin + ci + 1) * plane];
                                    acc += shifted_dot(
                                        gp,
                                        xp,
                                        d,
                                        w,
                                        dk as isize - pd as isize,
                                        wk as isize - pw as isize,
                                    );
                                }
                                dst[(ci * kd + dk) * kw + wk] += acc;
                            }
                        }
                    }
                });
            sink.add(self.w_id, dw);
        }

        if let Some(bias_id) = self.bias_id {
            if let Some(db) = sink.entry(bias_id, &[cout]) {
                for bi in 0..b {
                    for co in 0..cout {
                        let gp = &g.data()[(bi * cout + co) * plane..(bi * cout + co + 1) * plane];
                        let mut acc = T::zero();
                        for v in gp {
                            acc += *v;
                        }
                        db.data_mut()[co] += acc;
                    }
                }
            }
        }
    }
}

struct DwConv1dBw<T: Scalar> {
    x_id: usize,
    w_id: usize,
    bias_id: Option<usize>,
    x: Arc<Tensor<T>>,
    w: Arc<Tensor<T>>,
    axis: ConvAxis,
}

impl<T: Scalar> BackwardOp<T> for DwConv1dBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (b, c, d, w) = (
            self.x.shape()[0],
            self.x.shape()[1],
            self.x.shape()[2],
            self.x.shape()[3],
        );
        let k = self.w.shape()[2];
        let p = k / 2;
        let plane = d * w;

        if sink.wants(self.x_id) {
            let mut dx = Tensor::zeros(self.x.shape().to_vec());
            dx.data_mut()
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(pi, dst)| {
                    let ci = pi % c;
                    let gp = &g.data()[pi * plane..(pi + 1) * plane];
                    for kk in 0..k {
                        let wv = self.w.data()[ci * k + kk];
                        let (dz, dw_) = match self.axis {
                            ConvAxis::Depth => (p as isize - kk as isize, 0),
                            ConvAxis::Width => (0, p as isize - kk as isize),
                        };
                        shifted_axpy(dst, gp, wv, d, w, dz, dw_);
                    }
                });
            sink.add(self.x_id, dx);
        }

        if let Some(dst) = sink.entry(self.w_id, self.w.shape()) {
            for ci in 0..c {
                for kk in 0..k {
                    let (dz, dw_) = match self.axis {
                        ConvAxis::Depth => (kk as isize - p as isize, 0),
                        ConvAxis::Width => (0, kk as isize - p as isize),
                    };
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let pi = bi * c + ci;
                        acc += shifted_dot(
                            &g.data()[pi * plane..(pi + 1) * plane],
                            &self.x.data()[pi * plane..(pi + 1) * plane],
                            d,
                            w,
                            dz,
                            dw_,
                        );
                    }
                    dst.data_mut()[ci * k + kk] += acc;
                }
            }
        }

        if let Some(bias_id) = self.bias_id {
            if let Some(db) = sink.entry(bias_id, &[c]) {
                for bi in 0..b {
                    for ci in 0..c {
                        let pi = bi * c + ci;
                        let mut acc = T::zero();
                        for v in &g.data()[pi * plane..(pi + 1) * plane] {
                            acc += *v;
                        }
                        db.data_mut()[ci] += acc;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    /// 2-D convolution of `[B, Cin, D, W]` with `[Cout, Cin, kd, kw]`,
    /// zero same-padding, stride 1.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        self.check_same_tape(weight)?;
        if self.shape().len() != 4 || weight.shape().len() != 4 {
            return Err(Error::shape("conv2d expects 4-D input and kernel"));
        }
        let cin = self.shape()[1];
        let (cout, wcin, kd, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {cin}, kernel {wcin}"
            )));
        }
        if kd % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d kernel sizes must be odd"));
        }
        if let Some(b) = bias {
            self.check_same_tape(b)?;
            if b.shape() != [cout] {
                return Err(Error::shape(format!("conv2d bias must be [{cout}]")));
            }
        }
        let out = conv2d_forward(self.value(), weight.value(), bias.map(|b| b.value()));
        let needs = self.needs_grad
            || weight.needs_grad
            || bias.map(|b| b.needs_grad).unwrap_or(false);
        let bw = Conv2dBw {
            x_id: self.id,
            w_id: weight.id,
            bias_id: bias.map(|b| b.id),
            x: self.value_arc(),
            w: weight.value_arc(),
        };
        Ok(self.record(out, Some(Box::new(bw)), needs))
    }

    /// 1-D convolution along one spatial axis. `weight` is
    /// `[Cout, Cin, k]`, or `[C, 1, k]` with `depthwise = true`.
    pub fn conv1d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        axis: ConvAxis,
        depthwise: bool,
    ) -> Result<Var<T>> {
        self.check_same_tape(weight)?;
        if self.shape().len() != 4 || weight.shape().len() != 3 {
            return Err(Error::shape(
                "conv1d expects a 4-D input and a 3-D kernel",
            ));
        }
        let k = weight.shape()[2];
        if k % 2 == 0 {
            return Err(Error::invalid("conv1d kernel size must be odd"));
        }
        if !depthwise {
            // a 1-D kernel is a degenerate 2-D kernel along the chosen axis
            let (cout, cin) = (weight.shape()[0], weight.shape()[1]);
            let shape = match axis {
                ConvAxis::Depth => vec![cout, cin, k, 1],
                ConvAxis::Width => vec![cout, cin, 1, k],
            };
            let w2 = weight.reshape(shape)?;
            return self.conv2d(&w2, bias);
        }

        let c = self.shape()[1];
        if weight.shape()[0] != c || weight.shape()[1] != 1 {
            return Err(Error::shape(format!(
                "depthwise conv1d kernel must be [{c}, 1, k], got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            self.check_same_tape(b)?;
            if b.shape() != [c] {
                return Err(Error::shape(format!("conv1d bias must be [{c}]")));
            }
        }
        let (d, w) = (self.shape()[2], self.shape()[3]);
        let plane = d * w;
        let p = k / 2;
        let mut out = Tensor::zeros(self.shape().to_vec());
        let xv = self.value();
        let wv = weight.value();
        let bias_t = bias.map(|b| b.value());
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(pi, dst)| {
                let ci = pi % c;
                if let Some(bt) = bias_t {
                    dst.fill(bt.data()[ci]);
                }
                let src = &xv.data()[pi * plane..(pi + 1) * plane];
                for kk in 0..k {
                    let wgt = wv.data()[ci * k + kk];
                    let (dz, dw_) = match axis {
                        ConvAxis::Depth => (kk as isize - p as isize, 0),
                        ConvAxis::Width => (0, kk as isize - p as isize),
                    };
                    shifted_axpy(dst, src, wgt, d, w, dz, dw_);
                }
            });
        let needs = self.needs_grad
            || weight.needs_grad
            || bias.map(|b| b.needs_grad).unwrap_or(false);
        let bw = DwConv1dBw {
            x_id: self.id,
            w_id: weight.id,
            bias_id: bias.map(|b| b.id),
            x: self.value_arc(),
            w: weight.value_arc(),
            axis,
        };
        Ok(self.record(out, Some(Box::new(bw)), needs))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gradcheck, Tape};
    use super::*;

    #[test]
    fn one_by_one_kernel_is_per_pixel_linear_map() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 2, 2, 3], |i| i as f64));
        let w = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![2.0, -1.0]).unwrap());
        let y = x.conv2d(&w, None).unwrap();
        for z in 0..2 {
            for xw in 0..3 {
                let want = 2.0 * x.value().at(&[0, 0, z, xw]) - x.value().at(&[0, 1, z, xw]);
                assert_eq!(y.value().at(&[0, 0, z, xw]), want);
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 4, 5], |i| (i as f64).sin()));
        let mut wk = Tensor::zeros(vec![1, 1, 3, 3]);
        wk.set(&[0, 0, 1, 1], 1.0);
        let w = tape.constant(wk);
        let y = x.conv2d(&w, None).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        // depthwise 1-D delta
        let mut dk = Tensor::zeros(vec![1, 1, 3]);
        dk.set(&[0, 0, 1], 1.0);
        let dwk = tape.constant(dk);
        let yd = x.conv1d(&dwk, None, ConvAxis::Depth, true).unwrap();
        assert_eq!(yd.value().data(), x.value().data());
        let yw = x.conv1d(&dwk, None, ConvAxis::Width, true).unwrap();
        assert_eq!(yw.value().data(), x.value().data());
    }

    #[test]
    fn conv2d_gradcheck() {
        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let y = xs[0].conv2d(&xs[1], Some(&xs[2])).unwrap();
            y.mul(&y).unwrap().sum_all().unwrap()
        };
        let x = Tensor::from_fn(vec![1, 2, 5, 6], |i| (0.3 * i as f64).sin());
        let w = Tensor::from_fn(vec![2, 2, 3, 3], |i| 0.05 * i as f64 - 0.4);
        let b = Tensor::from_fn(vec![2], |i| 0.2 - 0.1 * i as f64);
        gradcheck::check(f, &[x, w, b], 1e-6).unwrap();
    }

    #[test]
    fn conv1d_kernel_size_one_is_channel_mix() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64 + 1.0));
        let w = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 0.5, -0.5]).unwrap());
        let y = x.conv1d(&w, None, ConvAxis::Width, false).unwrap();
        for p in 0..4 {
            let a = x.value().data()[p];
            let b = x.value().data()[4 + p];
            assert_eq!(y.value().data()[p], a + b);
            assert_eq!(y.value().data()[4 + p], 0.5 * (a - b));
        }
    }

    #[test]
    fn conv1d_gradcheck_both_axes() {
        for axis in [ConvAxis::Depth, ConvAxis::Width] {
            let f = move |_: &Tape<f64>, xs: &[Var<f64>]| {
                let y = xs[0].conv1d(&xs[1], Some(&xs[2]), axis, false).unwrap();
                y.mul(&y).unwrap().sum_all().unwrap()
            };
            let x = Tensor::from_fn(vec![1, 2, 4, 3], |i| (0.41 * i as f64).cos());
            let w = Tensor::from_fn(vec![3, 2, 3], |i| 0.07 * i as f64 - 0.4);
            let b = Tensor::from_fn(vec![3], |i| 0.1 * i as f64);
            gradcheck::check(f, &[x, w, b], 1e-6).unwrap();
        }
    }

    #[test]
    fn depthwise_conv1d_gradcheck() {
        for axis in [ConvAxis::Depth, ConvAxis::Width] {
            let f = move |_: &Tape<f64>, xs: &[Var<f64>]| {
                let y = xs[0].conv1d(&xs[1], Some(&xs[2]), axis, true).unwrap();
                y.mul(&y).unwrap().sum_all().unwrap()
            };
            let x = Tensor::from_fn(vec![2, 3, 4, 3], |i| (0.23 * i as f64).sin());
            let w = Tensor::from_fn(vec![3, 1, 3], |i| 0.11 * i as f64 - 0.1);
            let b = Tensor::from_fn(vec![3], |i| 0.2 - 0.13 * i as f64);
            gradcheck::check(f, &[x, w, b], 1e-6).unwrap();
        }
    }

    #[test]
    fn even_kernels_are_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 2, 3]));
        assert!(x.conv2d(&w, None).is_err());
    }
}
