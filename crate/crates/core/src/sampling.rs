//! Sparse A-line sampling at stride delta and the B-line shuffle
//! rearrangement used for learned upscaling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::MagPhase;
use crate::tensor::Tensor;

/// Magnitude/phase retained at every delta-th A-line.
#[derive(Clone, Debug)]
pub struct SparsePair<T> {
    pub magnitude: Tensor<T>,
    pub phase: Tensor<T>,
    pub delta: usize,
    /// Width of the originating dense B-scan; `width = delta * sparse_width`.
    pub width: usize,
}

impl<T: Scalar> SparsePair<T> {
    pub fn sparse_width(&self) -> usize {
        self.magnitude.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.magnitude.shape()[0]
    }
}

/// Keep columns `0, delta, 2*delta, ...` of both channels.
pub fn sparse_sample<T: Scalar>(mp: &MagPhase<T>, delta: usize) -> Result<SparsePair<T>> {
    if delta < 1 {
        return Err(Error::invalid("delta must be >= 1"));
    }
    let d = mp.magnitude.shape()[0];
    let w = mp.magnitude.shape()[1];
    if w % delta != 0 {
        return Err(Error::invalid(format!(
            "width {w} is not divisible by delta {delta}"
        )));
    }
    let w_s = w / delta;
    let pick = |src: &Tensor<T>| {
        Tensor::from_fn(vec![d, w_s], |lin| {
            let z = lin / w_s;
            let j = lin % w_s;
            src.data()[z * w + j * delta]
        })
    };
    Ok(SparsePair {
        magnitude: pick(&mp.magnitude),
        phase: pick(&mp.phase),
        delta,
        width: w,
    })
}

/// Index map of the B-line shuffle: output element `lin` reads input element
/// `map[lin]`. Input `[C*delta, D, W']`, output `[C, D, W'*delta]`; the
/// sub-position is the fastest-varying input channel index.
pub fn b_shuffle_map(c_out: usize, delta: usize, d: usize, w_s: usize) -> Vec<usize> {
    let w_out = w_s * delta;
    let mut map = vec![0usize; c_out * d * w_out];
    for c in 0..c_out {
        for z in 0..d {
            for w in 0..w_out {
                let j = w / delta;
                let r = w % delta;
                let src = ((c * delta + r) * d + z) * w_s + j;
                map[(c * d + z) * w_out + w] = src;
            }
        }
    }
    map
}

/// Rearrange `[C*delta, D, W']` into `[C, D, W'*delta]` by interleaving
/// channel groups along the B-line.
pub fn b_shuffle<T: Scalar>(x: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(Error::shape("b_shuffle expects a [C, D, W] tensor"));
    }
    let c_in = x.shape()[0];
    if delta < 1 || c_in % delta != 0 {
        return Err(Error::invalid(format!(
            "channel count {c_in} is not divisible by delta {delta}"
        )));
    }
    let c_out = c_in / delta;
    let d = x.shape()[1];
    let w_s = x.shape()[2];
    let map = b_shuffle_map(c_out, delta, d, w_s);
    let data = map.iter().map(|&src| x.data()[src]).collect();
    Tensor::new(vec![c_out, d, w_s * delta], data)
}

/// Inverse of [`b_shuffle`].
pub fn b_unshuffle<T: Scalar>(x: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(Error::shape("b_unshuffle expects a [C, D, W] tensor"));
    }
    let c = x.shape()[0];
    let d = x.shape()[1];
    let w_out = x.shape()[2];
    if delta < 1 || w_out % delta != 0 {
        return Err(Error::invalid(format!(
            "width {w_out} is not divisible by delta {delta}"
        )));
    }
    let w_s = w_out / delta;
    let map = b_shuffle_map(c, delta, d, w_s);
    let mut data = vec![T::zero(); x.numel()];
    for (dst, &src) in map.iter().enumerate() {
        data[src] = x.data()[dst];
    }
    Tensor::new(vec![c * delta, d, w_s], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Linear,
}

/// Dense magnitude/phase estimate by per-row interpolation along the B-line.
/// Phase is interpolated on the unit circle (cos/sin, then re-extracted), so
/// it never tears across the +-pi wrap.
pub fn interp_baseline<T: Scalar>(sp: &SparsePair<T>, mode: InterpMode) -> MagPhase<T> {
    let d = sp.depth();
    let w_s = sp.sparse_width();
    let delta = sp.delta;
    let w = sp.width;
    let mut mag = Tensor::zeros(vec![d, w]);
    let mut phase = Tensor::zeros(vec![d, w]);
    for z in 0..d {
        for x in 0..w {
            let (m, p) = match mode {
                InterpMode::Nearest => {
                    // ties round toward the left sample
                    let j = ((x + (delta - 1) / 2) / delta).min(w_s - 1);
                    (sp.magnitude.at(&[z, j]), sp.phase.at(&[z, j]))
                }
                InterpMode::Linear => {
                    let j = (x / delta).min(w_s - 1);
                    if j + 1 >= w_s {
                        (sp.magnitude.at(&[z, j]), sp.phase.at(&[z, j]))
                    } else {
                        let t = T::cast(x - j * delta) / T::cast(delta);
                        let m = sp.magnitude.at(&[z, j]) * (T::one() - t)
                            + sp.magnitude.at(&[z, j + 1]) * t;
                        let p0 = sp.phase.at(&[z, j]);
                        let p1 = sp.phase.at(&[z, j + 1]);
                        let cs = p0.cos() * (T::one() - t) + p1.cos() * t;
                        let sn = p0.sin() * (T::one() - t) + p1.sin() * t;
                        (m, sn.atan2(cs))
                    }
                }
            };
            mag.data_mut()[z * w + x] = m;
            phase.data_mut()[z * w + x] = p;
        }
    }
    MagPhase { magnitude: mag, phase }
}
