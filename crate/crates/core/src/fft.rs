//! Discrete Fourier transforms along a single axis.
//!
//! Convention: the forward transform carries no scaling, the inverse carries
//! `1/N`, so `inverse(forward(x)) == x` up to rounding. Power-of-two lengths
//! use an iterative radix-2 kernel; other lengths fall back to the direct
//! O(N^2) sum.

use num_complex::Complex;

use crate::scalar::Scalar;

/// In-place forward DFT (no scaling).
pub fn dft_forward<T: Scalar>(buf: &mut [Complex<T>]) {
    transform(buf, false);
}

/// In-place inverse DFT with 1/N scaling.
pub fn dft_inverse<T: Scalar>(buf: &mut [Complex<T>]) {
    transform(buf, true);
    let scale = T::one() / T::cast(buf.len());
    for v in buf.iter_mut() {
        *v = v.scale(scale);
    }
}

fn transform<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        let out = direct(buf, inverse);
        buf.copy_from_slice(&out);
    }
}

fn radix2<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { T::one() } else { -T::one() };
    let mut len = 2;
    while len <= n {
        let ang = sign * T::tau() / T::cast(len);
        let wlen = Complex::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex::new(T::one(), T::zero());
            for k in 0..len / 2 {
                let u = buf[i + k];
                let v = buf[i + k + len / 2] * w;
                buf[i + k] = u + v;
                buf[i + k + len / 2] = u - v;
                w = w * wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Direct O(N^2) DFT, also used as the independent oracle in tests.
pub fn direct<T: Scalar>(input: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let n = input.len();
    let sign = if inverse { T::one() } else { -T::one() };
    let step = sign * T::tau() / T::cast(n);
    (0..n)
        .map(|k| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (z, &v) in input.iter().enumerate() {
                let ang = step * T::cast(k * z % n);
                acc = acc + v * Complex::new(ang.cos(), ang.sin());
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_err(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn radix2_matches_direct() {
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for &n in &[2usize, 8, 16, 64] {
            let input: Vec<Complex<f64>> =
                (0..n).map(|_| Complex::new(next(), next())).collect();
            let oracle = direct(&input, false);
            let mut buf = input.clone();
            dft_forward(&mut buf);
            assert!(max_err(&buf, &oracle) < 1e-12 * n as f64);
        }
    }

    #[test]
    fn non_power_of_two_roundtrip() {
        let input: Vec<Complex<f64>> = (0..12)
            .map(|i| Complex::new(i as f64 * 0.3 - 1.0, (i as f64).sin()))
            .collect();
        let mut buf = input.clone();
        dft_forward(&mut buf);
        dft_inverse(&mut buf);
        assert!(max_err(&buf, &input) < 1e-12);
    }

    #[test]
    fn inverse_of_ones_is_impulse() {
        let mut buf = vec![Complex::new(1.0f64, 0.0); 4];
        dft_inverse(&mut buf);
        assert!((buf[0].re - 1.0).abs() < 1e-15);
        for v in &buf[1..] {
            assert!(v.norm() < 1e-15);
        }
    }
}
