//! Tape operation for the ROI-masked selective scan along the depth axis.
//!
//! Forward delegates to [`crate::scan_kernel`]; the state history of every
//! (batch, width) column is saved for the analytic reverse pass.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scan_kernel::{scan_parallel, scan_sequential, ScanInput, ZOH_GUARD};
use crate::tensor::Tensor;

use super::{BackwardOp, GradSink, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel,
}

struct Dims {
    b: usize,
    ch: usize,
    n: usize,
    l: usize,
    w: usize,
}

/// Gather the `(bi, wi)` column of a `[B, C, D, W]` tensor into `[L, C]`.
fn gather_col<T: Scalar>(t: &Tensor<T>, bi: usize, wi: usize, ch: usize, l: usize, w: usize, out: &mut [T]) {
    for c in 0..ch {
        let base = ((bi * ch + c) * l) * w + wi;
        for t_i in 0..l {
            out[t_i * ch + c] = t.data()[base + t_i * w];
        }
    }
}

fn scatter_col<T: Scalar>(t: &mut Tensor<T>, bi: usize, wi: usize, ch: usize, l: usize, w: usize, col: &[T]) {
    for c in 0..ch {
        let base = ((bi * ch + c) * l) * w + wi;
        for t_i in 0..l {
            t.data_mut()[base + t_i * w] += col[t_i * ch + c];
        }
    }
}

struct ColGrads<T> {
    dx: Vec<T>,
    ddt: Vec<T>,
    db: Vec<T>,
    dc: Vec<T>,
    droi: Vec<T>,
    da: Vec<T>,
    dd: Vec<T>,
}

struct ArssScanBw<T: Scalar> {
    ids: [usize; 7], // x, delta, b, c, a, d, roi
    x: Arc<Tensor<T>>,
    delta: Arc<Tensor<T>>,
    b_in: Arc<Tensor<T>>,
    c_in: Arc<Tensor<T>>,
    a: Arc<Tensor<T>>,
    d_skip: Arc<Tensor<T>>,
    roi: Arc<Tensor<T>>,
    /// Per (batch * width) column: `[L, C, N]` state history.
    h_cols: Vec<Vec<T>>,
}

impl<T: Scalar> ArssScanBw<T> {
    fn dims(&self) -> Dims {
        let s = self.x.shape();
        Dims {
            b: s[0],
            ch: s[1],
            n: self.a.shape()[1],
            l: s[2],
            w: s[3],
        }
    }

    fn backward_column(&self, bi: usize, wi: usize, g: &Tensor<T>) -> ColGrads<T> {
        let Dims { ch, n, l, w, .. } = self.dims();
        let guard = T::cast(ZOH_GUARD);

        let mut x_col = vec![T::zero(); l * ch];
        let mut dt_col = vec![T::zero(); l * ch];
        let mut roi_col = vec![T::zero(); l * ch];
        let mut gy_col = vec![T::zero(); l * ch];
        gather_col(&self.x, bi, wi, ch, l, w, &mut x_col);
        gather_col(&self.delta, bi, wi, ch, l, w, &mut dt_col);
        gather_col(&self.roi, bi, wi, ch, l, w, &mut roi_col);
        gather_col(g, bi, wi, ch, l, w, &mut gy_col);
        let mut b_col = vec![T::zero(); l * n];
        let mut c_col = vec![T::zero(); l * n];
        gather_col(&self.b_in, bi, wi, n, l, w, &mut b_col);
        gather_col(&self.c_in, bi, wi, n, l, w, &mut c_col);

        let h = &self.h_cols[bi * w + wi];
        let a = self.a.data();
        let d_skip = self.d_skip.data();

        let mut out = ColGrads {
            dx: vec![T::zero(); l * ch],
            ddt: vec![T::zero(); l * ch],
            db: vec![T::zero(); l * n],
            dc: vec![T::zero(); l * n],
            droi: vec![T::zero(); l * ch],
            da: vec![T::zero(); ch * n],
            dd: vec![T::zero(); ch],
        };
        let mut gh = vec![T::zero(); ch * n];

        for t in (0..l).rev() {
            // contributions of y[t] = sum_s C[t,s] h[t,c,s] + D[c] x[t,c]
            for c in 0..ch {
                let gy = gy_col[t * ch + c];
                let x_tc = x_col[t * ch + c];
                out.dd[c] += gy * x_tc;
                out.dx[t * ch + c] += d_skip[c] * gy;
                for s in 0..n {
                    gh[c * n + s] += c_col[t * n + s] * gy;
                    out.dc[t * n + s] += gy * h[(t * ch + c) * n + s];
                }
            }
            // through h[t] = abar h[t-1] + roi * phi * B * x
            for c in 0..ch {
                let x_tc = x_col[t * ch + c];
                let dt = dt_col[t * ch + c];
                let r = roi_col[t * ch + c];
                let mut gx_acc = T::zero();
                let mut groi_acc = T::zero();
                let mut gdt_acc = T::zero();
                for s in 0..n {
                    let a_cs = a[c * n + s];
                    let u = dt * a_cs;
                    let abar = u.exp();
                    let (phi, dphi_ddt, dphi_da) = if u.abs() < guard {
                        (dt, T::one(), T::zero())
                    } else {
                        (
                            (abar - T::one()) / a_cs,
                            abar,
                            (u * abar - abar + T::one()) / (a_cs * a_cs),
                        )
                    };
                    let b_ts = b_col[t * n + s];
                    let h_prev = if t == 0 {
                        T::zero()
                    } else {
                        h[((t - 1) * ch + c) * n + s]
                    };
                    let ghv = gh[c * n + s];
                    let d_abar = ghv * h_prev;
                    let d_coeff = ghv * x_tc;
                    gx_acc += ghv * r * phi * b_ts;
                    groi_acc += d_coeff * phi * b_ts;
                    out.db[t * n + s] += d_coeff * r * phi;
                    let d_phi = d_coeff * r * b_ts;
                    gdt_acc += d_abar * a_cs * abar + d_phi * dphi_ddt;
                    out.da[c * n + s] += d_abar * dt * abar + d_phi * dphi_da;
                    gh[c * n + s] = ghv * abar;
                }
                out.dx[t * ch + c] += gx_acc;
                out.droi[t * ch + c] += groi_acc;
                out.ddt[t * ch + c] += gdt_acc;
            }
        }
        out
    }
}

impl<T: Scalar> BackwardOp<T> for ArssScanBw<T> {
    fn apply(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let Dims { b, ch, n, l, w } = self.dims();
        let cols: Vec<ColGrads<T>> = (0..b * w)
            .into_par_iter()
            .map(|i| self.backward_column(i / w, i % w, g))
            .collect();

        let [x_id, dt_id, b_id, c_id, a_id, d_id, roi_id] = self.ids;
        let mut scatter = |id: usize, shape: &[usize], lanes: usize, pick: &dyn Fn(&ColGrads<T>) -> &[T]| {
            if !sink.wants(id) {
                return;
            }
            let mut acc = Tensor::zeros(shape.to_vec());
            for (i, cg) in cols.iter().enumerate() {
                scatter_col(&mut acc, i / w, i % w, lanes, l, w, pick(cg));
            }
            sink.add(id, acc);
        };
        scatter(x_id, self.x.shape(), ch, &|c| &c.dx);
        scatter(dt_id, self.delta.shape(), ch, &|c| &c.ddt);
        scatter(b_id, self.b_in.shape(), n, &|c| &c.db);
        scatter(c_id, self.c_in.shape(), n, &|c| &c.dc);
        scatter(roi_id, self.roi.shape(), ch, &|c| &c.droi);

        if let Some(da) = sink.entry(a_id, &[ch, n]) {
            for cg in &cols {
                for (dst, v) in da.data_mut().iter_mut().zip(&cg.da) {
                    *dst += *v;
                }
            }
        }
        if let Some(dd) = sink.entry(d_id, &[ch]) {
            for cg in &cols {
                for (dst, v) in dd.data_mut().iter_mut().zip(&cg.dd) {
                    *dst += *v;
                }
            }
        }
    }
}

/// ROI-masked selective scan along depth over every (batch, width) column.
///
/// Shapes: `x`, `delta`, `roi`: `[B, C, D, W]`; `b_in`, `c_in`: `[B, N, D, W]`;
/// `a`: `[C, N]`; `d_skip`: `[C]`. Returns `[B, C, D, W]`.
#[allow(clippy::too_many_arguments)]
pub fn a_rss_scan<T: Scalar>(
    x: &Var<T>,
    delta: &Var<T>,
    b_in: &Var<T>,
    c_in: &Var<T>,
    a: &Var<T>,
    d_skip: &Var<T>,
    roi: &Var<T>,
    mode: ScanMode,
) -> Result<Var<T>> {
    for other in [delta, b_in, c_in, a, d_skip, roi] {
        x.check_same_tape(other)?;
    }
    if x.shape().len() != 4 {
        return Err(Error::shape("a_rss_scan expects [B, C, D, W] input"));
    }
    let (b, ch, l, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if l < 1 {
        return Err(Error::invalid("scan length must be >= 1"));
    }
    if delta.shape() != x.shape() || roi.shape() != x.shape() {
        return Err(Error::shape(
            "delta and roi must match the scan input shape",
        ));
    }
    if a.shape().len() != 2 || a.shape()[0] != ch {
        return Err(Error::shape("state matrix must be [C, N]"));
    }
    let n = a.shape()[1];
    if b_in.shape() != [b, n, l, w] || c_in.shape() != [b, n, l, w] {
        return Err(Error::shape(
            "per-position projections must be [B, N, D, W]",
        ));
    }
    if d_skip.shape() != [ch] {
        return Err(Error::shape("skip coefficients must be [C]"));
    }
    if !delta.value().iter().all(|&v| v > T::zero()) {
        return Err(Error::invalid("scan timescale must be strictly positive"));
    }

    let mut out = Tensor::zeros(x.shape().to_vec());
    let (xv, dtv, bv, cv, av, dv, roiv) = (
        x.value(),
        delta.value(),
        b_in.value(),
        c_in.value(),
        a.value(),
        d_skip.value(),
        roi.value(),
    );
    let results: Vec<(Vec<T>, Vec<T>)> = (0..b * w)
        .into_par_iter()
        .map(|i| {
            let (bi, wi) = (i / w, i % w);
            let mut x_col = vec![T::zero(); l * ch];
            let mut dt_col = vec![T::zero(); l * ch];
            let mut roi_col = vec![T::zero(); l * ch];
            let mut b_col = vec![T::zero(); l * n];
            let mut c_col = vec![T::zero(); l * n];
            gather_col(xv, bi, wi, ch, l, w, &mut x_col);
            gather_col(dtv, bi, wi, ch, l, w, &mut dt_col);
            gather_col(roiv, bi, wi, ch, l, w, &mut roi_col);
            gather_col(bv, bi, wi, n, l, w, &mut b_col);
            gather_col(cv, bi, wi, n, l, w, &mut c_col);
            let inp = ScanInput {
                len: l,
                channels: ch,
                state: n,
                x: &x_col,
                delta: &dt_col,
                b: &b_col,
                c: &c_col,
                a: av.data(),
                d: dv.data(),
                roi: Some(&roi_col),
            };
            let mut y_col = vec![T::zero(); l * ch];
            let mut h_col = vec![T::zero(); l * ch * n];
            match mode {
                ScanMode::Sequential => scan_sequential(&inp, &mut y_col, Some(&mut h_col)),
                ScanMode::Parallel => scan_parallel(&inp, &mut y_col, Some(&mut h_col)),
            }
            (y_col, h_col)
        })
        .collect();
    let mut h_cols = Vec::with_capacity(b * w);
    for (i, (y_col, h_col)) in results.into_iter().enumerate() {
        scatter_col(&mut out, i / w, i % w, ch, l, w, &y_col);
        h_cols.push(h_col);
    }

    let needs = [x, delta, b_in, c_in, a, d_skip, roi]
        .iter()
        .any(|v| v.requires_grad());
    let bw = ArssScanBw {
        ids: [x.id(), delta.id(), b_in.id(), c_in.id(), a.id(), d_skip.id(), roi.id()],
        x: x.value_arc(),
        delta: delta.value_arc(),
        b_in: b_in.value_arc(),
        c_in: c_in.value_arc(),
        a: a.value_arc(),
        d_skip: d_skip.value_arc(),
        roi: roi.value_arc(),
        h_cols,
    };
    Ok(x.tape().push(out, Some(Box::new(bw)), needs))
}

#[cfg(test)]
mod tests {
    use super::super::{gradcheck, Tape};
    use super::*;

    fn vals(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
        })
    }

    #[test]
    fn scan_op_gradcheck() {
        let f = |tape: &Tape<f64>, xs: &[Var<f64>]| {
            let y = a_rss_scan(
                &xs[0], &xs[1], &xs[2], &xs[3], &xs[4], &xs[5], &xs[6],
                ScanMode::Sequential,
            )
            .unwrap();
            let w = tape.constant(vals(y.shape().to_vec(), 5, -1.0, 1.0));
            y.mul(&w).unwrap().sum_all().unwrap()
        };
        let (b, ch, n, l, w) = (1usize, 3usize, 2usize, 5usize, 2usize);
        let inputs = vec![
            vals(vec![b, ch, l, w], 10, -1.0, 1.0),  // x
            vals(vec![b, ch, l, w], 11, 0.1, 1.0),   // delta
            vals(vec![b, n, l, w], 12, -1.0, 1.0),   // B
            vals(vec![b, n, l, w], 13, -1.0, 1.0),   // C
            vals(vec![ch, n], 14, -2.0, -0.3),       // A
            vals(vec![ch], 15, -1.0, 1.0),           // D
            vals(vec![b, ch, l, w], 16, 0.0, 1.0),   // roi
        ];
        gradcheck::check(f, &inputs, 1e-5).unwrap();
    }

    #[test]
    fn parallel_mode_forward_matches_sequential() {
        let tape = Tape::<f64>::new();
        let (b, ch, n, l, w) = (2usize, 2usize, 2usize, 300usize, 2usize);
        let x = tape.constant(vals(vec![b, ch, l, w], 20, -1.0, 1.0));
        let dt = tape.constant(vals(vec![b, ch, l, w], 21, 0.1, 1.0));
        let bb = tape.constant(vals(vec![b, n, l, w], 22, -1.0, 1.0));
        let cc = tape.constant(vals(vec![b, n, l, w], 23, -1.0, 1.0));
        let a = tape.constant(vals(vec![ch, n], 24, -2.0, -0.3));
        let d = tape.constant(vals(vec![ch], 25, -1.0, 1.0));
        let roi = tape.constant(vals(vec![b, ch, l, w], 26, 0.0, 1.0));
        let y_seq =
            a_rss_scan(&x, &dt, &bb, &cc, &a, &d, &roi, ScanMode::Sequential).unwrap();
        let y_par =
            a_rss_scan(&x, &dt, &bb, &cc, &a, &d, &roi, ScanMode::Parallel).unwrap();
        let max = y_seq
            .value()
            .iter()
            .zip(y_par.value().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-10);
    }

    #[test]
    fn non_positive_delta_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 1]));
        let dt = tape.constant(Tensor::zeros(vec![1, 1, 4, 1]));
        let bb = tape.constant(Tensor::zeros(vec![1, 1, 4, 1]));
        let cc = tape.constant(Tensor::zeros(vec![1, 1, 4, 1]));
        let a = tape.constant(Tensor::full(vec![1, 1], -1.0));
        let d = tape.constant(Tensor::zeros(vec![1]));
        let roi = tape.constant(Tensor::full(vec![1, 1, 4, 1], 1.0));
        assert!(a_rss_scan(&x, &dt, &bb, &cc, &a, &d, &roi, ScanMode::Sequential).is_err());
    }
}
