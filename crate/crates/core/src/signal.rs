//! Complex-signal foundations: spectral-to-depth transform, magnitude/phase
//! decomposition, wrapped phase differences, and the classical
//! phase-subtraction flow reconstruction.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spectral-domain acquisition unit: `W` raw A-scans of `S` samples each,
/// stored column-major (one contiguous A-scan after another).
#[derive(Clone, Debug)]
pub struct RawBScan<T> {
    spectral_len: usize,
    width: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> RawBScan<T> {
    pub fn new(spectral_len: usize, width: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if spectral_len < 2 || width < 2 {
            return Err(Error::invalid(format!(
                "raw B-scan needs S >= 2 and W >= 2, got S={spectral_len} W={width}"
            )));
        }
        if data.len() != spectral_len * width {
            return Err(Error::shape(format!(
                "raw B-scan data length {} != S*W = {}",
                data.len(),
                spectral_len * width
            )));
        }
        if !data.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return Err(Error::invalid("raw B-scan contains non-finite values"));
        }
        Ok(Self { spectral_len, width, data })
    }

    pub fn spectral_len(&self) -> usize {
        self.spectral_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn column(&self, i: usize) -> &[Complex<T>] {
        &self.data[i * self.spectral_len..(i + 1) * self.spectral_len]
    }
}

/// Depth-resolved complex B-scan, column-major like [`RawBScan`].
#[derive(Clone, Debug)]
pub struct ComplexBScan<T> {
    depth: usize,
    width: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexBScan<T> {
    pub fn new(depth: usize, width: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != depth * width {
            return Err(Error::shape(format!(
                "complex B-scan data length {} != D*W = {}",
                data.len(),
                depth * width
            )));
        }
        if !data.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return Err(Error::invalid("complex B-scan contains non-finite values"));
        }
        Ok(Self { depth, width, data })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn column(&self, i: usize) -> &[Complex<T>] {
        &self.data[i * self.depth..(i + 1) * self.depth]
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }
}

/// Magnitude and phase images, row-major `[D, W]` tensors. Phase lies in
/// `(-pi, pi]` and is 0 wherever the magnitude is 0.
#[derive(Clone, Debug)]
pub struct MagPhase<T> {
    pub magnitude: Tensor<T>,
    pub phase: Tensor<T>,
}

/// Flow-speed image with values in `[0, 1]`. `peak` records the raw scale the
/// normalized values correspond to (65535 for 16-bit ground truth).
#[derive(Clone, Debug)]
pub struct FlowImage<T> {
    data: Tensor<T>,
    pub peak: f64,
}

impl<T: Scalar> FlowImage<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.ndim() != 2 {
            return Err(Error::shape("flow image must be 2-D"));
        }
        if !data.iter().all(|v| *v >= T::zero() && *v <= T::one()) {
            return Err(Error::invalid("flow image values must lie in [0,1]"));
        }
        Ok(Self { data, peak: 65535.0 })
    }

    /// Clamp into `[0,1]` and wrap; for pipelines that may slightly overshoot.
    pub fn from_clamped(data: Tensor<T>) -> Self {
        let clamped = data.map(|v| v.max(T::zero()).min(T::one()));
        Self { data: clamped, peak: 65535.0 }
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_phase<T: Scalar>(x: T) -> T {
    let tau = T::tau();
    let mut y = x - tau * (x / tau).floor();
    if y > T::pi() {
        y -= tau;
    }
    // floor rounding can leave y == -pi when x sits exactly on the branch cut
    if y <= -T::pi() {
        y += tau;
    }
    y
}

fn arg_in_range<T: Scalar>(c: Complex<T>) -> T {
    let p = c.im.atan2(c.re);
    if p <= -T::pi() {
        p + T::tau()
    } else {
        p
    }
}

/// Inverse DFT of every A-scan: spectral domain to depth domain. Uses the
/// 1/S-scaled inverse convention, so the exact forward DFT round-trips.
pub fn ifft_depth<T: Scalar>(raw: &RawBScan<T>) -> Result<ComplexBScan<T>> {
    let s = raw.spectral_len();
    let w = raw.width();
    let mut data = vec![Complex::new(T::zero(), T::zero()); s * w];
    data.par_chunks_mut(s)
        .enumerate()
        .for_each(|(i, chunk)| {
            chunk.copy_from_slice(raw.column(i));
            fft::dft_inverse(chunk);
        });
    ComplexBScan::new(s, w, data)
}

/// Forward DFT of every column: depth domain back to spectral domain.
pub fn fft_depth<T: Scalar>(scan: &ComplexBScan<T>) -> Result<RawBScan<T>> {
    let d = scan.depth();
    let w = scan.width();
    let mut data = vec![Complex::new(T::zero(), T::zero()); d * w];
    data.par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, chunk)| {
            chunk.copy_from_slice(scan.column(i));
            fft::dft_forward(chunk);
        });
    RawBScan::new(d, w, data)
}

/// Magnitude and phase of a depth-domain B-scan.
pub fn mag_phase<T: Scalar>(scan: &ComplexBScan<T>) -> MagPhase<T> {
    let d = scan.depth();
    let w = scan.width();
    let mut mag = Tensor::zeros(vec![d, w]);
    let mut phase = Tensor::zeros(vec![d, w]);
    for i in 0..w {
        let col = scan.column(i);
        for (z, &c) in col.iter().enumerate() {
            let m = c.norm();
            mag.data_mut()[z * w + i] = m;
            phase.data_mut()[z * w + i] = if m == T::zero() {
                T::zero()
            } else {
                arg_in_range(c)
            };
        }
    }
    MagPhase { magnitude: mag, phase }
}

/// Per-depth wrapped phase difference `arg(b * conj(a))` of two equally long
/// complex columns, in `(-pi, pi]`.
pub fn phase_diff<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>]) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "phase_diff length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| arg_in_range(y * x.conj()))
        .collect())
}

/// Classical dense-sampling Doppler reconstruction: unsigned adjacent-column
/// phase differences over pi, lateral moving average, magnitude mask, clip.
pub fn traditional_recon<T: Scalar>(
    scan: &ComplexBScan<T>,
    mask_threshold: f64,
    avg_window: usize,
) -> Result<FlowImage<T>> {
    if avg_window < 1 {
        return Err(Error::invalid("avg_window must be >= 1"));
    }
    if !(0.0..1.0).contains(&mask_threshold) {
        return Err(Error::invalid("mask_threshold must lie in [0, 1)"));
    }
    if scan.width() < 2 {
        return Err(Error::invalid("traditional reconstruction needs W >= 2"));
    }
    let d = scan.depth();
    let w = scan.width();

    let mut flow = Tensor::zeros(vec![d, w]);
    for i in 0..w - 1 {
        let dphi = phase_diff(scan.column(i), scan.column(i + 1))?;
        for z in 0..d {
            flow.data_mut()[z * w + i] = dphi[z].abs() / T::pi();
        }
    }
    // last column replicates its left neighbour so output width stays W
    for z in 0..d {
        flow.data_mut()[z * w + w - 1] = flow.data()[z * w + w - 2];
    }

    let averaged = lateral_moving_average(&flow, avg_window);

    // magnitude of each (i, i+1) pair, gating against the global maximum
    let mp = mag_phase(scan);
    let max_m = mp.magnitude.max_value();
    let gate = T::cast(mask_threshold) * max_m;
    let mut out = averaged;
    for z in 0..d {
        for i in 0..w {
            let m0 = mp.magnitude.data()[z * w + i];
            let m1 = mp.magnitude.data()[z * w + (i + 1).min(w - 1)];
            let pair = (m0 + m1) * T::half();
            if pair < gate {
                out.data_mut()[z * w + i] = T::zero();
            }
        }
    }
    Ok(FlowImage::from_clamped(out))
}

/// Centered moving average along the width axis with clamped borders. A
/// window of 1 is the identity; even windows extend one pixel further right.
pub fn lateral_moving_average<T: Scalar>(img: &Tensor<T>, window: usize) -> Tensor<T> {
    if window <= 1 {
        return img.clone();
    }
    let d = img.shape()[0];
    let w = img.shape()[1];
    let left = (window - 1) / 2;
    let right = window / 2;
    let mut out = Tensor::zeros(vec![d, w]);
    for z in 0..d {
        for i in 0..w {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(w - 1);
            let mut acc = T::zero();
            for j in lo..=hi {
                acc += img.data()[z * w + j];
            }
            out.data_mut()[z * w + i] = acc / T::cast(hi - lo + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c<T: Scalar>(re: f64, im: f64) -> Complex<T> {
        Complex::new(T::cast(re), T::cast(im))
    }

    #[test]
    fn ifft_all_zero_is_zero() {
        let raw = RawBScan::<f64>::new(8, 2, vec![c(0.0, 0.0); 16]).unwrap();
        let out = ifft_depth(&raw).unwrap();
        assert!(out.data().iter().all(|v| v.norm() == 0.0));
        assert_eq!(out.depth(), 8);
    }

    #[test]
    fn ifft_of_ones_is_impulse() {
        let mut data = vec![c::<f64>(0.0, 0.0); 8];
        for v in data[..4].iter_mut() {
            *v = c(1.0, 0.0);
        }
        for v in data[4..].iter_mut() {
            *v = c(1.0, 0.0);
        }
        let raw = RawBScan::new(4, 2, data).unwrap();
        let out = ifft_depth(&raw).unwrap();
        for i in 0..2 {
            let col = out.column(i);
            assert!((col[0].re - 1.0).abs() < 1e-15);
            for v in &col[1..] {
                assert!(v.norm() < 1e-15);
            }
        }
    }

    #[test]
    fn ifft_matches_direct_summation_oracle() {
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let col: Vec<Complex<f64>> = (0..16).map(|_| c(next(), next())).collect();
        let mut data = col.clone();
        data.extend_from_slice(&col);
        let raw = RawBScan::new(16, 2, data).unwrap();
        let out = ifft_depth(&raw).unwrap();
        let oracle = fft::direct(&col, true)
            .into_iter()
            .map(|v| v / 16.0)
            .collect::<Vec<_>>();
        for (a, b) in out.column(0).iter().zip(&oracle) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn ifft_rejects_non_finite() {
        let mut data = vec![c::<f64>(0.0, 0.0); 8];
        data[3] = Complex::new(f64::NAN, 0.0);
        assert!(RawBScan::new(4, 2, data).is_err());
    }

    #[test]
    fn forward_of_inverse_roundtrips() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let data: Vec<Complex<f64>> = (0..24).map(|_| c(next(), next())).collect();
        let raw = RawBScan::new(12, 2, data).unwrap();
        let depth = ifft_depth(&raw).unwrap();
        let back = fft_depth(&depth).unwrap();
        for (a, b) in back.data().iter().zip(raw.data()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn mag_phase_conventions() {
        let data = vec![
            c::<f64>(1.0, 0.0),
            c(0.0, -1.0),
            c(0.0, 0.0),
            c(-2.0, 0.0),
        ];
        let scan = ComplexBScan::new(2, 2, data).unwrap();
        let mp = mag_phase(&scan);
        // column-major input maps to [D, W] row-major output
        assert_eq!(mp.magnitude.at(&[0, 0]), 1.0);
        assert_eq!(mp.phase.at(&[0, 0]), 0.0);
        assert_eq!(mp.magnitude.at(&[1, 0]), 1.0);
        assert!((mp.phase.at(&[1, 0]) + std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(mp.magnitude.at(&[0, 1]), 0.0);
        assert_eq!(mp.phase.at(&[0, 1]), 0.0);
        assert!((mp.phase.at(&[1, 1]) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn negative_zero_magnitude_still_gives_zero_phase() {
        let scan = ComplexBScan::new(2, 2, vec![c::<f64>(-0.0, 0.0); 4]).unwrap();
        let mp = mag_phase(&scan);
        assert_eq!(mp.phase.at(&[0, 0]), 0.0);
    }

    #[test]
    fn phase_diff_identical_is_zero() {
        let a = vec![c::<f64>(0.3, 0.4), c(-1.0, 2.0)];
        let d = phase_diff(&a, &a).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phase_diff_wraps_across_pi() {
        let a = vec![Complex::from_polar(1.0f64, 3.0)];
        let b = vec![Complex::from_polar(1.0f64, -3.0)];
        let d = phase_diff(&a, &b).unwrap();
        let expected = -6.0 + std::f64::consts::TAU;
        assert!((d[0] - expected).abs() < 1e-12);
        assert!((d[0] - 0.28319).abs() < 1e-5);
    }

    #[test]
    fn phase_diff_matches_naive_wrap_oracle() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let pa = (next() - 0.5) * 2.0 * std::f64::consts::PI;
            let pb = (next() - 0.5) * 2.0 * std::f64::consts::PI;
            let a = vec![Complex::from_polar(1.0, pa)];
            let b = vec![Complex::from_polar(1.0, pb)];
            let got = phase_diff(&a, &b).unwrap()[0];
            // naive subtraction followed by repeated +-2pi wrapping
            let mut naive = pb - pa;
            while naive > std::f64::consts::PI {
                naive -= std::f64::consts::TAU;
            }
            while naive <= -std::f64::consts::PI {
                naive += std::f64::consts::TAU;
            }
            assert!((got - naive).abs() < 1e-12, "got {got}, naive {naive}");
        }
    }

    #[test]
    fn phase_diff_length_mismatch_errors() {
        let a = vec![c::<f64>(1.0, 0.0)];
        let b = vec![c::<f64>(1.0, 0.0), c(1.0, 0.0)];
        assert!(phase_diff(&a, &b).is_err());
    }

    #[test]
    fn static_scan_reconstructs_to_zero() {
        let col: Vec<Complex<f64>> = (0..6)
            .map(|z| Complex::from_polar(1.0 + z as f64, 0.3 * z as f64))
            .collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&col);
        }
        let scan = ComplexBScan::new(6, 4, data).unwrap();
        let flow = traditional_recon(&scan, 0.05, 1).unwrap();
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_rotation_rate_maps_to_quarter_flow() {
        // phase advances by pi/4 per column at every depth
        let d = 4;
        let w = 6;
        let mut data = Vec::new();
        for i in 0..w {
            for _z in 0..d {
                data.push(Complex::from_polar(
                    1.0f64,
                    std::f64::consts::FRAC_PI_4 * i as f64,
                ));
            }
        }
        let scan = ComplexBScan::new(d, w, data).unwrap();
        let flow = traditional_recon(&scan, 0.0, 1).unwrap();
        for v in flow.data().iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn recon_rejects_bad_parameters() {
        let scan = ComplexBScan::new(2, 2, vec![c::<f64>(1.0, 0.0); 4]).unwrap();
        assert!(traditional_recon(&scan, 0.05, 0).is_err());
        assert!(traditional_recon(&scan, 1.0, 1).is_err());
        assert!(traditional_recon(&scan, -0.1, 1).is_err());
    }

    #[test]
    fn wrap_phase_range() {
        for &x in &[-10.0f64, -std::f64::consts::PI, 0.0, 3.2, 9.0, 100.0] {
            let y = wrap_phase(x);
            assert!(y > -std::f64::consts::PI && y <= std::f64::consts::PI);
            let k = ((x - y) / std::f64::consts::TAU).round();
            assert!((x - y - k * std::f64::consts::TAU).abs() < 1e-9);
        }
        assert!((wrap_phase(std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-15);
    }
}
