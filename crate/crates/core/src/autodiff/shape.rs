//! Shape and rearrangement ops: reshape, axis permutation, concatenation,
//! slicing, B-line difference/shift, and the B-line shuffle upscaler.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sampling::b_shuffle_map;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackwardOp, GradSink, Var};

struct ReshapeBw {
    x_id: usize,
    in_shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for ReshapeBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        if sink.wants(self.x_id) {
            sink.add(self.x_id, g.reshaped(self.in_shape.clone()).expect("reshape"));
        }
    }
}

struct GatherBw {
    x_id: usize,
    in_shape: Vec<usize>,
    map: Arc<Vec<usize>>,
}

impl<T: Scalar> BackwardOp<T> for GatherBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        if let Some(dst) = sink.entry(self.x_id, &self.in_shape) {
            for (i, &src) in self.map.iter().enumerate() {
                dst.data_mut()[src] += g.data()[i];
            }
        }
    }
}

struct ConcatBw {
    ids: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    axis: usize,
}

impl<T: Scalar> BackwardOp<T> for ConcatBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let out_shape = g.shape();
        let outer: usize = out_shape[..self.axis].iter().product();
        let inner: usize = out_shape[self.axis + 1..].iter().product();
        let total_axis = out_shape[self.axis];
        let mut offset = 0;
        for (id, shape) in self.ids.iter().zip(&self.shapes) {
            let len = shape[self.axis];
            if let Some(dst) = sink.entry(*id, shape) {
                for o in 0..outer {
                    for a in 0..len {
                        let src = (o * total_axis + offset + a) * inner;
                        let d = (o * len + a) * inner;
                        for k in 0..inner {
                            dst.data_mut()[d + k] += g.data()[src + k];
                        }
                    }
                }
            }
            offset += len;
        }
    }
}

struct NarrowBw {
    x_id: usize,
    in_shape: Vec<usize>,
    axis: usize,
    start: usize,
    len: usize,
}

impl<T: Scalar> BackwardOp<T> for NarrowBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let outer: usize = self.in_shape[..self.axis].iter().product();
        let inner: usize = self.in_shape[self.axis + 1..].iter().product();
        let full = self.in_shape[self.axis];
        if let Some(dst) = sink.entry(self.x_id, &self.in_shape) {
            for o in 0..outer {
                for a in 0..self.len {
                    let d = (o * full + self.start + a) * inner;
                    let src = (o * self.len + a) * inner;
                    for k in 0..inner {
                        dst.data_mut()[d + k] += g.data()[src + k];
                    }
                }
            }
        }
    }
}

struct BDiffBw {
    x_id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for BDiffBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let w = *self.shape.last().unwrap();
        let rows = g.numel() / w;
        if let Some(dst) = sink.entry(self.x_id, &self.shape) {
            for r in 0..rows {
                let base = r * w;
                for j in 0..w {
                    // out[j] = x[j] - x[j-1] for j >= 1; out[0] = 0
                    let mut acc = T::zero();
                    if j >= 1 {
                        acc += g.data()[base + j];
                    }
                    if j + 1 < w {
                        acc -= g.data()[base + j + 1];
                    }
                    dst.data_mut()[base + j] += acc;
                }
            }
        }
    }
}

struct ShiftBBw {
    x_id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for ShiftBBw {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let w = *self.shape.last().unwrap();
        let rows = g.numel() / w;
        if let Some(dst) = sink.entry(self.x_id, &self.shape) {
            for r in 0..rows {
                let base = r * w;
                // out[0] = x[0], out[j] = x[j-1] for j >= 1
                let mut acc0 = g.data()[base];
                if w > 1 {
                    acc0 += g.data()[base + 1];
                }
                dst.data_mut()[base] += acc0;
                for j in 1..w.saturating_sub(1) {
                    dst.data_mut()[base + j] += g.data()[base + j + 1];
                }
            }
        }
    }
}

fn gather_forward<T: Scalar>(x: &Tensor<T>, out_shape: Vec<usize>, map: &[usize]) -> Tensor<T> {
    let data = map.iter().map(|&src| x.data()[src]).collect();
    Tensor::new(out_shape, data).expect("gather shape")
}

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let shape = shape.into();
        let out = self.value().reshaped(shape)?;
        let bw = ReshapeBw { x_id: self.id, in_shape: self.shape().to_vec() };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }

    /// Reorder axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let nd = self.shape().len();
        if axes.len() != nd {
            return Err(Error::shape(format!(
                "permute needs {nd} axes, got {}",
                axes.len()
            )));
        }
        let mut seen = vec![false; nd];
        for &a in axes {
            if a >= nd || seen[a] {
                return Err(Error::shape("permute axes must be a permutation"));
            }
            seen[a] = true;
        }
        let in_shape = self.shape().to_vec();
        let in_strides = self.value().strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let numel = self.value().numel();
        let mut map = vec![0usize; numel];
        let mut out_idx = vec![0usize; nd];
        for (lin, m) in map.iter_mut().enumerate() {
            let mut rem = lin;
            for d in (0..nd).rev() {
                out_idx[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let mut src = 0;
            for d in 0..nd {
                src += out_idx[d] * in_strides[axes[d]];
            }
            *m = src;
        }
        let map = Arc::new(map);
        let out = gather_forward(self.value(), out_shape, &map);
        let bw = GatherBw { x_id: self.id, in_shape, map };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }

    /// Concatenate along `axis`. All operands must match on other axes.
    pub fn concat(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat needs at least one operand"));
        }
        let first = parts[0];
        let nd = first.shape().len();
        if axis >= nd {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for p in parts {
            first.check_same_tape(p)?;
            if p.shape().len() != nd {
                return Err(Error::shape("concat rank mismatch"));
            }
            for d in 0..nd {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::shape(format!(
                        "concat shape mismatch on axis {d}"
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Tensor::zeros(out_shape);
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            for o in 0..outer {
                for a in 0..len {
                    let dst = (o * axis_total + offset + a) * inner;
                    let src = (o * len + a) * inner;
                    out.data_mut()[dst..dst + inner]
                        .copy_from_slice(&p.value().data()[src..src + inner]);
                }
            }
            offset += len;
        }
        let needs = parts.iter().any(|p| p.needs_grad);
        let bw = ConcatBw {
            ids: parts.iter().map(|p| p.id).collect(),
            shapes: parts.iter().map(|p| p.shape().to_vec()).collect(),
            axis,
        };
        Ok(first.record(out, Some(Box::new(bw)), needs))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let nd = self.shape().len();
        if axis >= nd || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let full = in_shape[axis];
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(out_shape);
        for o in 0..outer {
            for a in 0..len {
                let src = (o * full + start + a) * inner;
                let dst = (o * len + a) * inner;
                out.data_mut()[dst..dst + inner]
                    .copy_from_slice(&self.value().data()[src..src + inner]);
            }
        }
        let bw = NarrowBw { x_id: self.id, in_shape, axis, start, len };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }

    /// First difference along the width axis, replicate-padded so the first
    /// output column is zero: `out[.., 0] = 0`, `out[.., j] = x[j] - x[j-1]`.
    pub fn b_diff(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let w = *shape.last().unwrap();
        let rows = self.value().numel() / w;
        let mut out = Tensor::zeros(shape.clone());
        for r in 0..rows {
            let base = r * w;
            for j in 1..w {
                out.data_mut()[base + j] =
                    self.value().data()[base + j] - self.value().data()[base + j - 1];
            }
        }
        let bw = BDiffBw { x_id: self.id, shape };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }

    /// One-step shift along the width axis with replicated first column:
    /// `out[.., 0] = x[.., 0]`, `out[.., j] = x[.., j-1]`. Together with
    /// [`Var::b_diff`] this reconstructs the input: `b_diff(x) + shift_b(x) = x`.
    pub fn shift_b(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let w = *shape.last().unwrap();
        let rows = self.value().numel() / w;
        let mut out = Tensor::zeros(shape.clone());
        for r in 0..rows {
            let base = r * w;
            out.data_mut()[base] = self.value().data()[base];
            for j in 1..w {
                out.data_mut()[base + j] = self.value().data()[base + j - 1];
            }
        }
        let bw = ShiftBBw { x_id: self.id, shape };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }

    /// B-line shuffle of `[B, C*delta, D, W']` into `[B, C, D, W'*delta]`.
    pub fn b_shuffle(&self, delta: usize) -> Result<Var<T>> {
        if self.shape().len() != 4 {
            return Err(Error::shape("b_shuffle expects [B, C, D, W]"));
        }
        let (b, c_in, d, w_s) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if delta < 1 || c_in % delta != 0 {
            return Err(Error::invalid(format!(
                "channel count {c_in} is not divisible by delta {delta}"
            )));
        }
        let c_out = c_in / delta;
        let per_item = b_shuffle_map(c_out, delta, d, w_s);
        let item_in = c_in * d * w_s;
        let item_out = per_item.len();
        let mut map = vec![0usize; b * item_out];
        for bi in 0..b {
            for (i, &src) in per_item.iter().enumerate() {
                map[bi * item_out + i] = bi * item_in + src;
            }
        }
        let map = Arc::new(map);
        let out = gather_forward(self.value(), vec![b, c_out, d, w_s * delta], &map);
        let bw = GatherBw { x_id: self.id, in_shape: self.shape().to_vec(), map };
        Ok(self.record(out, Some(Box::new(bw)), self.needs_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gradcheck, Tape};
    use super::*;

    #[test]
    fn b_diff_of_constant_rows_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![2, 5], 3.3));
        let y = x.b_diff().unwrap();
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn b_diff_example_row() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 4.0, 9.0]).unwrap());
        let y = x.b_diff().unwrap();
        assert_eq!(y.value().data(), &[0.0, 3.0, 5.0]);
    }

    #[test]
    fn shift_example_row() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap());
        let y = x.shift_b().unwrap();
        assert_eq!(y.value().data(), &[7.0, 7.0, 8.0]);
    }

    #[test]
    fn diff_plus_shift_reconstructs_input() {
        // dyadic lattice values keep the subtraction exact in floating point
        let mut state = 1234u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 40) as i64 - (1 << 23)) as f64 / (1 << 12) as f64
        };
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 2, 4, 7], |_| next()));
        let y = x.b_diff().unwrap().add(&x.shift_b().unwrap()).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn cumulative_sum_of_b_diff_recovers_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 6], |i| (i as f64 * 0.9).sin()));
        let d = x.b_diff().unwrap();
        let w = 6;
        let mut recovered = vec![0.0; w];
        recovered[0] = x.value().data()[0];
        for j in 1..w {
            recovered[j] = recovered[j - 1] + d.value().data()[j];
        }
        for j in 0..w {
            assert!((recovered[j] - x.value().data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn b_diff_and_shift_gradcheck() {
        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let y = xs[0].b_diff().unwrap();
            let z = xs[0].shift_b().unwrap();
            y.mul(&y).unwrap().add(&z.mul(&z).unwrap()).unwrap().sum_all().unwrap()
        };
        let x = Tensor::from_fn(vec![2, 1, 2, 5], |i| (0.3 * i as f64).cos());
        gradcheck::check(f, &[x], 1e-6).unwrap();
    }

    #[test]
    fn permute_roundtrip_and_gradcheck() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), x.value().data());

        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let p = xs[0].permute(&[1, 0]).unwrap();
            p.mul(&p).unwrap().sum_all().unwrap()
        };
        gradcheck::check(f, &[Tensor::from_fn(vec![3, 2], |i| 0.5 * i as f64 - 1.0)], 1e-6)
            .unwrap();
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(vec![2, 2, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| 100.0 + i as f64));
        let cat = Var::concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 5, 2, 2]);
        let a2 = cat.narrow(1, 0, 2).unwrap();
        let b2 = cat.narrow(1, 2, 3).unwrap();
        assert_eq!(a2.value().data(), a.value().data());
        assert_eq!(b2.value().data(), b.value().data());
    }

    #[test]
    fn concat_narrow_gradcheck() {
        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let cat = Var::concat(&[&xs[0], &xs[1]], 1).unwrap();
            let left = cat.narrow(1, 1, 2).unwrap();
            left.mul(&left).unwrap().sum_all().unwrap()
        };
        let a = Tensor::from_fn(vec![2, 2, 3], |i| 0.21 * i as f64 - 0.8);
        let b = Tensor::from_fn(vec![2, 1, 3], |i| (0.77 * i as f64).sin());
        gradcheck::check(f, &[a, b], 1e-6).unwrap();
    }

    #[test]
    fn b_shuffle_matches_plain_version_and_gradchecks() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 4, 3, 5], |i| i as f64));
        let y = x.b_shuffle(2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 10]);
        for bi in 0..2 {
            let plain_in = Tensor::from_fn(vec![4, 3, 5], |i| x.value().data()[bi * 60 + i]);
            let plain = crate::sampling::b_shuffle(&plain_in, 2).unwrap();
            let got = &y.value().data()[bi * 60..(bi + 1) * 60];
            assert_eq!(got, plain.data());
        }

        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let s = xs[0].b_shuffle(2).unwrap();
            s.mul(&s).unwrap().sum_all().unwrap()
        };
        let x0 = Tensor::from_fn(vec![1, 4, 2, 3], |i| (0.3 * i as f64).sin());
        gradcheck::check(f, &[x0], 1e-6).unwrap();
    }

    #[test]
    fn reshape_gradcheck() {
        let f = |_: &Tape<f64>, xs: &[Var<f64>]| {
            let r = xs[0].reshape(vec![6]).unwrap();
            r.mul(&r).unwrap().sum_all().unwrap()
        };
        gradcheck::check(f, &[Tensor::from_fn(vec![2, 3], |i| 0.4 * i as f64)], 1e-6).unwrap();
    }
}
