//! Synthetic raw B-scans with analytically known flow.
//!
//! Each phantom builds a depth-domain complex field whose phase advances by
//! `omega(z, x)` radians per A-line step inside vessels (parabolic Poiseuille
//! profile, zero outside), on top of a static per-depth-row speckle phase.
//! The raw spectra are the exact forward DFT of that field, so
//! [`crate::signal::ifft_depth`] inverts the synthesis exactly and the
//! adjacent-column phase difference of a noiseless phantom reproduces
//! `omega` to rounding error.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{fft_depth, ComplexBScan, FlowImage, RawBScan};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vessel {
    pub center_z: f64,
    pub center_x: f64,
    pub radius_z: f64,
    pub radius_x: f64,
    /// Peak phase advance per A-line step at the vessel axis, in (0, pi].
    pub omega_max: f64,
    pub amplitude: f64,
}

impl Vessel {
    /// Squared normalized elliptical radius of a pixel.
    fn rho2(&self, z: usize, x: usize) -> f64 {
        let dz = (z as f64 - self.center_z) / self.radius_z;
        let dx = (x as f64 - self.center_x) / self.radius_x;
        dz * dz + dx * dx
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub depth: usize,
    pub width: usize,
    pub vessels: Vec<Vessel>,
    pub background_amplitude: f64,
    /// Seed of the static per-depth-row speckle phase.
    pub speckle_seed: u64,
    /// Per-component standard deviation of the additive complex Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.width < 2 {
            return Err(Error::invalid("phantom needs depth >= 2 and width >= 2"));
        }
        if self.background_amplitude <= 0.0 {
            return Err(Error::invalid("background amplitude must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be nonnegative"));
        }
        for (k, v) in self.vessels.iter().enumerate() {
            if v.omega_max <= 0.0 || v.omega_max > std::f64::consts::PI {
                return Err(Error::invalid(format!(
                    "vessel {k}: omega_max must lie in (0, pi], got {}",
                    v.omega_max
                )));
            }
            if v.amplitude <= 0.0 || v.radius_z <= 0.0 || v.radius_x <= 0.0 {
                return Err(Error::invalid(format!(
                    "vessel {k}: amplitude and radii must be positive"
                )));
            }
            let inside = v.center_z - v.radius_z >= 0.0
                && v.center_z + v.radius_z <= (self.depth - 1) as f64
                && v.center_x - v.radius_x >= 0.0
                && v.center_x + v.radius_x <= (self.width - 1) as f64;
            if !inside {
                return Err(Error::invalid(format!(
                    "vessel {k} crosses the image boundary"
                )));
            }
        }
        Ok(())
    }
}

/// A generated sample: raw spectra plus the analytic ground truth.
#[derive(Clone, Debug)]
pub struct PhantomSample<T> {
    pub raw: RawBScan<T>,
    pub gt_flow: FlowImage<T>,
    pub gt_mag: Tensor<T>,
    /// Phase advance per A-line step, radians; `gt_flow = |rate| / pi`.
    pub gt_phase_rate: Tensor<T>,
}

pub fn gen_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<PhantomSample<T>> {
    spec.validate()?;
    let d = spec.depth;
    let w = spec.width;

    // rasterize omega and amplitude; a pixel claimed twice means overlap
    let mut omega = vec![0.0f64; d * w];
    let mut amp = vec![spec.background_amplitude; d * w];
    let mut owner = vec![usize::MAX; d * w];
    for (k, v) in spec.vessels.iter().enumerate() {
        let z_lo = (v.center_z - v.radius_z).floor().max(0.0) as usize;
        let z_hi = ((v.center_z + v.radius_z).ceil() as usize).min(d - 1);
        let x_lo = (v.center_x - v.radius_x).floor().max(0.0) as usize;
        let x_hi = ((v.center_x + v.radius_x).ceil() as usize).min(w - 1);
        for z in z_lo..=z_hi {
            for x in x_lo..=x_hi {
                let rho2 = v.rho2(z, x);
                if rho2 < 1.0 {
                    let idx = z * w + x;
                    if owner[idx] != usize::MAX {
                        return Err(Error::invalid(format!(
                            "vessels {} and {k} overlap at pixel ({z}, {x})",
                            owner[idx]
                        )));
                    }
                    owner[idx] = k;
                    omega[idx] = v.omega_max * (1.0 - rho2);
                    amp[idx] = v.amplitude;
                }
            }
        }
    }

    // static speckle phase, one draw per depth row
    let mut speckle_rng = ChaCha8Rng::seed_from_u64(spec.speckle_seed);
    let theta_row: Vec<f64> = (0..d)
        .map(|_| speckle_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect();

    // depth-domain field, column-major; Doppler phase accumulates along x
    let mut field = vec![Complex::new(T::zero(), T::zero()); d * w];
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    for z in 0..d {
        let mut cumulative = 0.0f64;
        for x in 0..w {
            let idx = z * w + x;
            let phase = theta_row[z] + cumulative;
            let value = Complex::from_polar(amp[idx], phase);
            field[x * d + z] = Complex::new(T::cast(value.re), T::cast(value.im));
            cumulative += omega[idx];
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in field.iter_mut() {
            let nr = normal.sample(&mut noise_rng);
            let ni = normal.sample(&mut noise_rng);
            *v = Complex::new(v.re + T::cast(nr), v.im + T::cast(ni));
        }
    }

    let depth_scan = ComplexBScan::new(d, w, field)?;
    let raw = fft_depth(&depth_scan)?;

    let gt_phase_rate = Tensor::from_fn(vec![d, w], |i| T::cast(omega[i]));
    let gt_flow = FlowImage::new(gt_phase_rate.map(|v| v.abs() / T::pi()))?;
    let gt_mag = Tensor::from_fn(vec![d, w], |i| T::cast(amp[i]));
    Ok(PhantomSample { raw, gt_flow, gt_mag, gt_phase_rate })
}

/// Ranges a dataset draws per-sample phantom parameters from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetTemplate {
    pub depth: usize,
    pub width: usize,
    pub vessel_count: [usize; 2],
    pub radius_z: [f64; 2],
    pub radius_x: [f64; 2],
    pub omega_max: [f64; 2],
    pub amp_vessel: [f64; 2],
    pub amp_bg: f64,
    pub noise_sigma: f64,
    /// Minimum clearance between a vessel and the image border, pixels.
    pub margin: f64,
}

impl Default for DatasetTemplate {
    fn default() -> Self {
        Self {
            depth: 64,
            width: 64,
            vessel_count: [1, 4],
            radius_z: [4.0, 10.0],
            radius_x: [4.0, 10.0],
            omega_max: [0.5, std::f64::consts::PI],
            amp_vessel: [0.8, 1.2],
            amp_bg: 0.35,
            noise_sigma: 0.01,
            margin: 2.0,
        }
    }
}

impl DatasetTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.width < 2 {
            return Err(Error::invalid("template needs depth >= 2 and width >= 2"));
        }
        if self.vessel_count[0] > self.vessel_count[1] {
            return Err(Error::invalid("vessel_count range is inverted"));
        }
        if self.omega_max[0] <= 0.0 || self.omega_max[1] > std::f64::consts::PI {
            return Err(Error::invalid("omega_max range must lie in (0, pi]"));
        }
        if self.amp_bg <= 0.0 {
            return Err(Error::invalid("amp_bg must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        Ok(())
    }

    fn range(&self, rng: &mut ChaCha8Rng, lohi: [f64; 2]) -> f64 {
        if lohi[0] >= lohi[1] {
            lohi[0]
        } else {
            rng.gen_range(lohi[0]..lohi[1])
        }
    }
}

/// The phantom spec a dataset realizes for sample `index` under `seed`.
/// Vessels are rejection-sampled against overlap with bounded attempts.
pub fn realize_spec(template: &DatasetTemplate, seed: u64, index: usize) -> Result<PhantomSpec> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let count = if template.vessel_count[0] == template.vessel_count[1] {
        template.vessel_count[0]
    } else {
        rng.gen_range(template.vessel_count[0]..=template.vessel_count[1])
    };
    let mut vessels: Vec<Vessel> = Vec::with_capacity(count);
    let mut attempts = 0;
    while vessels.len() < count && attempts < 200 * count.max(1) {
        attempts += 1;
        let rz = template.range(&mut rng, template.radius_z);
        let rx = template.range(&mut rng, template.radius_x);
        let lo_z = rz + template.margin;
        let hi_z = (template.depth - 1) as f64 - rz - template.margin;
        let lo_x = rx + template.margin;
        let hi_x = (template.width - 1) as f64 - rx - template.margin;
        if lo_z >= hi_z || lo_x >= hi_x {
            continue;
        }
        let cz = rng.gen_range(lo_z..hi_z);
        let cx = rng.gen_range(lo_x..hi_x);
        // conservative circle test keeps rasterized ellipses disjoint
        let overlaps = vessels.iter().any(|v| {
            let dz = v.center_z - cz;
            let dx = v.center_x - cx;
            let min_gap = v.radius_z.max(v.radius_x) + rz.max(rx) + 1.0;
            dz * dz + dx * dx < min_gap * min_gap
        });
        if overlaps {
            continue;
        }
        vessels.push(Vessel {
            center_z: cz,
            center_x: cx,
            radius_z: rz,
            radius_x: rx,
            omega_max: template.range(&mut rng, template.omega_max),
            amplitude: template.range(&mut rng, template.amp_vessel),
        });
    }
    if vessels.len() < template.vessel_count[0] {
        return Err(Error::invalid(
            "could not place the requested vessels without overlap",
        ));
    }
    Ok(PhantomSpec {
        depth: template.depth,
        width: template.width,
        vessels,
        background_amplitude: template.amp_bg,
        speckle_seed: rng.gen(),
        noise_sigma: template.noise_sigma,
        seed: rng.gen(),
    })
}

/// Generate `count` samples; sample `i` is fully determined by `(seed, i)`.
pub fn gen_dataset<T: Scalar>(
    template: &DatasetTemplate,
    count: usize,
    seed: u64,
) -> Result<Vec<PhantomSample<T>>> {
    if count < 1 {
        return Err(Error::invalid("dataset count must be >= 1"));
    }
    (0..count)
        .into_par_iter()
        .map(|i| gen_phantom(&realize_spec(template, seed, i)?))
        .collect()
}
