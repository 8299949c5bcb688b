//! Single-measurement likelihoods, detection probability and false-alarm density.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mpc_geometry, wrap_angle, AgentPose, GeometryError, Position, SPEED_OF_LIGHT};
use crate::special::{bessel_i0e, marcum_q1};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasurementError {
    #[error("amplitude {z} is not above the detection floor {floor}")]
    BelowThreshold { z: f64, floor: f64 },
    #[error("dispersion is undefined for zero amplitude")]
    ZeroAmplitude,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One MPC estimate: distance (m), azimuth and elevation (rad), normalized amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub distance: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub amplitude: f64,
}

/// Per-dimension standard deviations of an MPC estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    pub distance: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Converts dB to a linear power ratio.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Distance scale constant `c² / (8π²β²)` for effective bandwidth `β` in Hz.
pub fn distance_scale_from_bandwidth(bandwidth_hz: f64) -> f64 {
    SPEED_OF_LIGHT * SPEED_OF_LIGHT / (8.0 * PI * PI * bandwidth_hz * bandwidth_hz)
}

/// Angular scale constant giving standard deviation `std_rad` at amplitude `u_ref`.
pub fn angle_scale_from_reference(std_rad: f64, u_ref: f64) -> f64 {
    (std_rad * u_ref).powi(2)
}

/// Noise and detector parameters shared by the likelihood functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Product of frequency samples and array ports, `N_f·N_a`.
    pub sample_count: f64,
    /// Detection threshold `u_de` as a linear SNR.
    pub detection_threshold: f64,
    /// Upper end of the false-alarm distance support, meters.
    pub max_distance: f64,
    /// `σ_d = √k_d / u`, m².
    pub distance_scale: f64,
    /// `σ_φ = √k_φ / u`, rad².
    pub azimuth_scale: f64,
    /// `σ_θ = √k_θ / u`, rad².
    pub elevation_scale: f64,
    /// Sign applied to the clock offset in the distance residual `z_d + s·d_o − d`.
    pub clock_offset_sign: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        let one_degree = PI / 180.0;
        Self {
            sample_count: 128.0 * 1200.0,
            detection_threshold: db_to_linear(12.0),
            max_distance: 150.0,
            distance_scale: distance_scale_from_bandwidth(18e6),
            azimuth_scale: angle_scale_from_reference(one_degree, 10.0),
            elevation_scale: angle_scale_from_reference(one_degree, 10.0),
            clock_offset_sign: 1.0,
        }
    }
}

impl NoiseProfile {
    /// Amplitude floor `√u_de`.
    pub fn amplitude_floor(&self) -> f64 {
        self.detection_threshold.sqrt()
    }

    /// False-alarm probability `exp(−u_de)`.
    pub fn false_alarm_probability(&self) -> f64 {
        (-self.detection_threshold).exp()
    }

    /// Rician scale `σ_u` at amplitude `u`.
    pub fn amplitude_std(&self, u: f64) -> f64 {
        (0.5 + u * u / (4.0 * self.sample_count)).sqrt()
    }

    /// Detection probability `Q1(u/σ_u, √u_de/σ_u)`.
    pub fn detection_probability(&self, u: f64) -> f64 {
        let s = self.amplitude_std(u);
        marcum_q1(u / s, self.amplitude_floor() / s)
    }

    /// Truncated Rician density of amplitude `z` given true amplitude `u`.
    pub fn amplitude_likelihood(&self, z: f64, u: f64) -> Result<f64, MeasurementError> {
        Ok(self.ln_amplitude_likelihood(z, u)?.exp())
    }

    pub fn ln_amplitude_likelihood(&self, z: f64, u: f64) -> Result<f64, MeasurementError> {
        self.check_floor(z)?;
        Ok(self.ln_rician(z, u) - self.detection_probability(u).ln())
    }

    /// Log of the untruncated Rician density.
    fn ln_rician(&self, z: f64, u: f64) -> f64 {
        let var = self.amplitude_std(u).powi(2);
        (z / var).ln() - (z - u) * (z - u) / (2.0 * var) + bessel_i0e(z * u / var).ln()
    }

    fn check_floor(&self, z: f64) -> Result<(), MeasurementError> {
        let floor = self.amplitude_floor();
        if z > floor {
            Ok(())
        } else {
            Err(MeasurementError::BelowThreshold { z, floor })
        }
    }

    /// Measurement standard deviations at amplitude `u`.
    pub fn dispersion(&self, u: f64) -> Result<Dispersion, MeasurementError> {
        if u <= 0.0 {
            return Err(MeasurementError::ZeroAmplitude);
        }
        Ok(Dispersion {
            distance: self.distance_scale.sqrt() / u,
            azimuth: self.azimuth_scale.sqrt() / u,
            elevation: self.elevation_scale.sqrt() / u,
        })
    }

    /// Residuals `(distance, azimuth, elevation)` of `z` against a feature.
    pub fn residuals(
        &self,
        z: &Measurement,
        agent: &AgentPose,
        feature: Position,
        clock_offset: f64,
    ) -> Result<[f64; 3], MeasurementError> {
        let g = mpc_geometry(agent, feature, 0.0)?;
        Ok([
            z.distance + self.clock_offset_sign * clock_offset - g.distance,
            wrap_angle(z.azimuth - g.azimuth),
            z.elevation - g.elevation,
        ])
    }

    /// Full likelihood `f(z | x, q)`: three Gaussian kernels times the amplitude density.
    pub fn likelihood(
        &self,
        z: &Measurement,
        agent: &AgentPose,
        feature: Position,
        amplitude: f64,
        clock_offset: f64,
    ) -> Result<f64, MeasurementError> {
        Ok(self
            .ln_likelihood(z, agent, feature, amplitude, clock_offset)?
            .exp())
    }

    pub fn ln_likelihood(
        &self,
        z: &Measurement,
        agent: &AgentPose,
        feature: Position,
        amplitude: f64,
        clock_offset: f64,
    ) -> Result<f64, MeasurementError> {
        let r = self.residuals(z, agent, feature, clock_offset)?;
        let s = self.dispersion(amplitude)?;
        let ln_amp = self.ln_amplitude_likelihood(z.amplitude, amplitude)?;
        Ok(ln_gauss(r[0], s.distance) + ln_gauss(r[1], s.azimuth) + ln_gauss(r[2], s.elevation) + ln_amp)
    }

    /// Clutter density; zero outside the distance and amplitude supports.
    pub fn false_alarm_density(&self, z: &Measurement) -> f64 {
        let ln = self.ln_false_alarm_density(z);
        if ln.is_finite() {
            ln.exp()
        } else {
            0.0
        }
    }

    pub fn ln_false_alarm_density(&self, z: &Measurement) -> f64 {
        if !(0.0..=self.max_distance).contains(&z.distance) || z.amplitude <= self.amplitude_floor() {
            return f64::NEG_INFINITY;
        }
        -(self.max_distance * 2.0 * PI * PI).ln() + self.ln_false_alarm_amplitude(z.amplitude)
    }

    /// Log of the truncated Rayleigh clutter amplitude density `2z e^{−z²} / p_fa`.
    pub fn ln_false_alarm_amplitude(&self, z: f64) -> f64 {
        (2.0 * z).ln() - z * z + self.detection_threshold
    }
}

/// Log of a zero-mean Gaussian density at `r` with std `s`.
pub fn ln_gauss(r: f64, s: f64) -> f64 {
    -0.5 * (r / s).powi(2) - s.ln() - LN_SQRT_2PI
}

/// Tabulated detection probability for hot loops.
///
/// Linear interpolation on a uniform amplitude grid; beyond the grid the
/// probability has saturated to 1 or is evaluated exactly.
#[derive(Debug, Clone)]
pub struct DetectionTable {
    profile: NoiseProfile,
    step: f64,
    values: Vec<f64>,
    saturated: bool,
}

impl DetectionTable {
    const STEP: f64 = 5e-4;
    const MAX_AMPLITUDE: f64 = 200.0;

    pub fn new(profile: &NoiseProfile) -> Self {
        let step = Self::STEP;
        let mut values = Vec::new();
        let mut saturated = false;
        let mut u = 0.0;
        while u <= Self::MAX_AMPLITUDE {
            let p = profile.detection_probability(u);
            values.push(p);
            if p >= 1.0 {
                saturated = true;
                break;
            }
            u += step;
        }
        Self {
            profile: *profile,
            step,
            values,
            saturated,
        }
    }

    pub fn probability(&self, u: f64) -> f64 {
        let x = u.max(0.0) / self.step;
        let i = x as usize;
        if i + 1 < self.values.len() {
            let t = x - i as f64;
            self.values[i] + t * (self.values[i + 1] - self.values[i])
        } else if self.saturated {
            1.0
        } else {
            self.profile.detection_probability(u)
        }
    }
}

/// Precomputed per-measurement terms for repeated likelihood evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PreparedMeasurement {
    pub z: Measurement,
    /// `ln(μ_fa f_fa(z))`.
    pub ln_clutter: f64,
}

impl PreparedMeasurement {
    pub fn new(z: Measurement, profile: &NoiseProfile, clutter_mean: f64) -> Self {
        Self {
            z,
            ln_clutter: clutter_mean.ln() + profile.ln_false_alarm_density(&z),
        }
    }
}

/// Fast evaluation of `ln f(z | x, q)` given raw components.
#[derive(Debug, Clone)]
pub struct LikelihoodKernel {
    pub profile: NoiseProfile,
    pub detection: DetectionTable,
    sd_scale: [f64; 3],
}

impl LikelihoodKernel {
    pub fn new(profile: &NoiseProfile) -> Self {
        Self {
            profile: *profile,
            detection: DetectionTable::new(profile),
            sd_scale: [
                profile.distance_scale.sqrt(),
                profile.azimuth_scale.sqrt(),
                profile.elevation_scale.sqrt(),
            ],
        }
    }

    /// `ln f(z_u | u)` without the `P_d(u)` truncation normalizer.
    #[inline]
    pub fn ln_rician(&self, z: f64, u: f64) -> f64 {
        let var = 0.5 + u * u / (4.0 * self.profile.sample_count);
        (z / var).ln() - (z - u) * (z - u) / (2.0 * var) + bessel_i0e(z * u / var).ln()
    }

    /// Geometric part `ln Π N(residual; 0, σ(u))` from precomputed residuals.
    #[inline]
    pub fn ln_geometric(&self, residuals: [f64; 3], u: f64) -> f64 {
        let inv_u = 1.0 / u;
        let mut acc = 0.0;
        for d in 0..3 {
            let s = self.sd_scale[d] * inv_u;
            acc += ln_gauss(residuals[d], s);
        }
        acc
    }

    /// Sum of log-std terms `ln σ_d σ_φ σ_θ` at amplitude `u`.
    #[inline]
    pub fn ln_std_product(&self, u: f64) -> f64 {
        (self.sd_scale[0] * self.sd_scale[1] * self.sd_scale[2]).ln() - 3.0 * u.ln()
    }

    pub fn std(&self, u: f64) -> [f64; 3] {
        [
            self.sd_scale[0] / u,
            self.sd_scale[1] / u,
            self.sd_scale[2] / u,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn profile() -> NoiseProfile {
        NoiseProfile::default()
    }

    #[test]
    fn amplitude_std_examples() {
        let mut p = profile();
        assert!((p.amplitude_std(0.0) - 0.5f64.sqrt()).abs() < 1e-15);
        p.sample_count = 1.0;
        assert!((p.amplitude_std(10.0) - 25.5f64.sqrt()).abs() < 1e-14);
        p.sample_count = 1e300;
        assert!((p.amplitude_std(1e3) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn detection_at_zero_is_false_alarm_probability() {
        let p = profile();
        let want = (-p.detection_threshold).exp();
        assert!((p.detection_probability(0.0) - want).abs() < 1e-12 * want.max(1e-300) + 1e-18);
        assert!(p.detection_probability(60.0) > 1.0 - 1e-12);
    }

    #[test]
    fn dispersion_scaling() {
        let p = profile();
        let a = p.dispersion(10.0).unwrap();
        let b = p.dispersion(20.0).unwrap();
        assert!((a.distance / b.distance - 2.0).abs() < 1e-12);
        assert!((a.azimuth / b.azimuth - 2.0).abs() < 1e-12);
        let bw = SPEED_OF_LIGHT / (8f64.sqrt() * PI * 18e6 * 10.0);
        assert!((a.distance - bw).abs() < 1e-12);
        assert!((a.distance - 0.1876).abs() < 5e-4);
        assert!((a.azimuth - PI / 180.0).abs() < 1e-15);
        assert_eq!(p.dispersion(0.0), Err(MeasurementError::ZeroAmplitude));
    }

    #[test]
    fn amplitude_likelihood_rejects_sub_floor() {
        let p = profile();
        let floor = p.amplitude_floor();
        assert!(matches!(
            p.amplitude_likelihood(floor, 5.0),
            Err(MeasurementError::BelowThreshold { .. })
        ));
    }

    #[test]
    fn zero_amplitude_is_truncated_rayleigh() {
        let p = profile();
        let z = p.amplitude_floor() + 0.7;
        let var = 0.5;
        let direct = z / var * (-(z * z) / (2.0 * var)).exp() / p.detection_probability(0.0);
        let got = p.amplitude_likelihood(z, 0.0).unwrap();
        assert!(((got - direct) / direct).abs() < 1e-12);
    }

    #[test]
    fn likelihood_peak_and_shape() {
        let p = profile();
        let agent = AgentPose::new(Vec3::ZERO, 0.3);
        let mf = Vec3::new(30.0, 20.0, 10.0);
        let u = 8.0;
        let g = mpc_geometry(&agent, mf, 0.0).unwrap();
        let mut z = Measurement {
            distance: g.distance,
            azimuth: g.azimuth,
            elevation: g.elevation,
            amplitude: u,
        };
        let s = p.dispersion(u).unwrap();
        let c = |sd: f64| 1.0 / ((2.0 * PI).sqrt() * sd);
        let peak = c(s.distance) * c(s.azimuth) * c(s.elevation) * p.amplitude_likelihood(u, u).unwrap();
        let got = p.likelihood(&z, &agent, mf, u, 0.0).unwrap();
        assert!(((got - peak) / peak).abs() < 1e-12);

        z.azimuth += 2.0 * PI;
        let wrapped = p.likelihood(&z, &agent, mf, u, 0.0).unwrap();
        assert!(((wrapped - peak) / peak).abs() < 1e-12);

        z.azimuth -= 2.0 * PI;
        z.distance += s.distance;
        let shifted = p.likelihood(&z, &agent, mf, u, 0.0).unwrap();
        assert!((shifted / peak - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn false_alarm_density_examples() {
        let p = profile();
        let floor = p.amplitude_floor();
        let z = Measurement {
            distance: 10.0,
            azimuth: 0.0,
            elevation: 0.0,
            amplitude: floor * (1.0 + 1e-12),
        };
        let geo = 1.0 / (p.max_distance * 2.0 * PI * PI);
        let amp = p.false_alarm_density(&z) / geo;
        assert!((amp - 2.0 * floor).abs() < 1e-9);
        let far = Measurement { distance: 151.0, ..z };
        assert_eq!(p.false_alarm_density(&far), 0.0);
        let other = Measurement { distance: 90.0, azimuth: 2.0, elevation: -1.0, ..z };
        assert!((p.false_alarm_density(&other) - p.false_alarm_density(&z)).abs() < 1e-15);
    }

    #[test]
    fn detection_table_tracks_exact_values() {
        let p = profile();
        let t = DetectionTable::new(&p);
        for i in 0..400 {
            let u = i as f64 * 0.0371;
            assert!((t.probability(u) - p.detection_probability(u)).abs() < 1e-7, "u={u}");
        }
        assert_eq!(t.probability(500.0), 1.0);
    }

    #[test]
    fn kernel_matches_reference_likelihood() {
        let p = profile();
        let k = LikelihoodKernel::new(&p);
        let agent = AgentPose::new(Vec3::new(1.0, 2.0, 0.0), -0.4);
        let mf = Vec3::new(24.0, 46.0, 23.0);
        let z = Measurement { distance: 52.0, azimuth: 1.5, elevation: 0.4, amplitude: 6.0 };
        let u = 5.5;
        let r = p.residuals(&z, &agent, mf, 0.0).unwrap();
        let fast = k.ln_geometric(r, u) + k.ln_rician(z.amplitude, u) - k.detection.probability(u).ln();
        let exact = p.ln_likelihood(&z, &agent, mf, u, 0.0).unwrap();
        assert!((fast - exact).abs() < 1e-6);
    }
}
