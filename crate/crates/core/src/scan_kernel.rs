//! Selective state-space scan kernels along one A-line.
//!
//! The recurrence per channel `c` and state `s` is
//!
//! ```text
//! abar = exp(dt * A[c,s])
//! bbar = (dt*A)^-1 (exp(dt*A) - 1) dt * B[t,s]   (limit dt*B as dt*A -> 0)
//! h[t] = abar * h[t-1] + (R[t,c] * bbar) * x[t,c]
//! y[t,c] = sum_s C[t,s] * h[t,c,s] + D[c] * x[t,c]
//! ```
//!
//! `R` is the ROI soft mask gating the input matrix; passing `None` runs the
//! plain unmasked scan, which is bitwise identical to a mask of ones.
//!
//! The parallel mode exploits that `h[t] = a[t] h[t-1] + b[t]` composes
//! associatively: fixed-size chunks are scanned independently from zero, the
//! chunk carries are combined sequentially, and each chunk is re-scanned from
//! its carry. Chunk boundaries are fixed, so results do not depend on the
//! worker count; they match the sequential mode up to rounding.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Below this |dt * A| the discretised input matrix uses its Taylor limit.
pub const ZOH_GUARD: f64 = 1e-6;

const PAR_CHUNK: usize = 128;

/// One scan problem over contiguous slices; `t` is the fastest-varying pair
/// index, i.e. `x[t * channels + c]` and `b[t * state + s]`.
#[derive(Clone, Copy)]
pub struct ScanInput<'a, T> {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// `[len, channels]` input sequence.
    pub x: &'a [T],
    /// `[len, channels]` positive timescales.
    pub delta: &'a [T],
    /// `[len, state]` input projection per position.
    pub b: &'a [T],
    /// `[len, state]` output projection per position.
    pub c: &'a [T],
    /// `[channels, state]` realized state matrix (negative for stability).
    pub a: &'a [T],
    /// `[channels]` skip coefficients.
    pub d: &'a [T],
    /// Optional `[len, channels]` ROI mask multiplying the input matrix.
    pub roi: Option<&'a [T]>,
}

impl<'a, T: Scalar> ScanInput<'a, T> {
    fn assert_sizes(&self) {
        let (l, ch, n) = (self.len, self.channels, self.state);
        assert_eq!(self.x.len(), l * ch);
        assert_eq!(self.delta.len(), l * ch);
        assert_eq!(self.b.len(), l * n);
        assert_eq!(self.c.len(), l * n);
        assert_eq!(self.a.len(), ch * n);
        assert_eq!(self.d.len(), ch);
        if let Some(r) = self.roi {
            assert_eq!(r.len(), l * ch);
        }
    }
}

#[inline]
fn zoh_phi<T: Scalar>(dt: T, a: T) -> (T, T) {
    // returns (abar, phi) with bbar = phi * B
    let u = dt * a;
    let abar = u.exp();
    let phi = if u.abs() < T::cast(ZOH_GUARD) {
        dt
    } else {
        (abar - T::one()) / a
    };
    (abar, phi)
}

/// Scan `[t0, t1)` starting from `h`, optionally writing outputs and the
/// state history (buffers indexed from `t0`).
#[allow(clippy::too_many_arguments)]
fn scan_range<T: Scalar>(
    inp: &ScanInput<T>,
    t0: usize,
    t1: usize,
    h: &mut [T],
    mut y_out: Option<&mut [T]>,
    mut h_out: Option<&mut [T]>,
    mut alpha_prod: Option<&mut [T]>,
) {
    let ch = inp.channels;
    let n = inp.state;
    for t in t0..t1 {
        let crow = &inp.c[t * n..(t + 1) * n];
        let brow = &inp.b[t * n..(t + 1) * n];
        for c in 0..ch {
            let x_tc = inp.x[t * ch + c];
            let dt = inp.delta[t * ch + c];
            let r = inp.roi.map(|r| r[t * ch + c]).unwrap_or_else(T::one);
            let arow = &inp.a[c * n..(c + 1) * n];
            let hrow = &mut h[c * n..(c + 1) * n];
            let mut acc = T::zero();
            for s in 0..n {
                let (abar, phi) = zoh_phi(dt, arow[s]);
                let input = if inp.roi.is_some() {
                    r * (phi * brow[s]) * x_tc
                } else {
                    (phi * brow[s]) * x_tc
                };
                let hv = abar * hrow[s] + input;
                hrow[s] = hv;
                acc += crow[s] * hv;
                if let Some(ap) = alpha_prod.as_deref_mut() {
                    ap[c * n + s] *= abar;
                }
            }
            if let Some(y) = y_out.as_deref_mut() {
                y[(t - t0) * ch + c] = acc + inp.d[c] * x_tc;
            }
        }
        if let Some(hh) = h_out.as_deref_mut() {
            hh[(t - t0) * ch * n..(t - t0 + 1) * ch * n].copy_from_slice(h);
        }
    }
}

/// Sequential reference scan. `y` is `[len, channels]`; `h_out`, when given,
/// receives the full `[len, channels, state]` state history.
pub fn scan_sequential<T: Scalar>(inp: &ScanInput<T>, y: &mut [T], h_out: Option<&mut [T]>) {
    inp.assert_sizes();
    debug_assert_eq!(y.len(), inp.len * inp.channels);
    let mut h = vec![T::zero(); inp.channels * inp.state];
    scan_range(inp, 0, inp.len, &mut h, Some(y), h_out, None);
}

/// Chunked associative scan; matches [`scan_sequential`] up to rounding.
pub fn scan_parallel<T: Scalar>(inp: &ScanInput<T>, y: &mut [T], h_out: Option<&mut [T]>) {
    inp.assert_sizes();
    debug_assert_eq!(y.len(), inp.len * inp.channels);
    let lanes = inp.channels * inp.state;
    let l = inp.len;
    if l <= PAR_CHUNK {
        let mut h = vec![T::zero(); lanes];
        scan_range(inp, 0, l, &mut h, Some(y), h_out, None);
        return;
    }
    let n_chunks = l.div_ceil(PAR_CHUNK);

    // phase 1: per-chunk transform (alpha product, state from zero)
    let transforms: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|k| {
            let t0 = k * PAR_CHUNK;
            let t1 = ((k + 1) * PAR_CHUNK).min(l);
            let mut h = vec![T::zero(); lanes];
            let mut alpha = vec![T::one(); lanes];
            scan_range(inp, t0, t1, &mut h, None, None, Some(&mut alpha));
            (alpha, h)
        })
        .collect();

    // phase 2: carry states across chunks in order
    let mut carries = vec![vec![T::zero(); lanes]];
    for k in 0..n_chunks - 1 {
        let prev = &carries[k];
        let (alpha, h_end) = &transforms[k];
        let next: Vec<T> = (0..lanes)
            .map(|i| alpha[i] * prev[i] + h_end[i])
            .collect();
        carries.push(next);
    }

    // phase 3: re-scan each chunk from its carry, emitting outputs
    let ch = inp.channels;
    let chunk_pairs: Vec<(usize, (&mut [T], Option<&mut [T]>))> = {
        let mut ys: Vec<&mut [T]> = y.chunks_mut(PAR_CHUNK * ch).collect();
        let mut hs: Vec<Option<&mut [T]>> = match h_out {
            Some(buf) => buf.chunks_mut(PAR_CHUNK * lanes).map(Some).collect(),
            None => (0..n_chunks).map(|_| None).collect(),
        };
        let mut out = Vec::with_capacity(n_chunks);
        for k in (0..n_chunks).rev() {
            out.push((k, (ys.pop().unwrap(), hs.pop().unwrap())));
        }
        out
    };
    chunk_pairs
        .into_par_iter()
        .for_each(|(k, (y_chunk, h_chunk))| {
            let t0 = k * PAR_CHUNK;
            let t1 = ((k + 1) * PAR_CHUNK).min(l);
            let mut h = carries[k].clone();
            scan_range(inp, t0, t1, &mut h, Some(y_chunk), h_chunk, None);
        });
}
