//! FMCW waveform model and wavenumber bookkeeping.
//!
//! A linear chirp sweeps from the carrier `f0` over `bandwidth` during one
//! sweep of duration `chirp_duration`. After dechirping, each point echo
//! contributes a complex beat sample whose phase is affine in time with slope
//! set by the round-trip delay. The reconstruction never works in the time
//! domain directly; it samples the sweep at `n_freq` uniform frequency points
//! and carries the corresponding wavenumbers `k = 2*pi*f/c`.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Propagation speed used throughout (m/s).
pub const SPEED_OF_LIGHT: f64 = 2.99792458e8;

/// One dechirped I/Q sample. Real and imaginary parts are dimensionless.
pub type ComplexSample = Complex64;

/// FMCW waveform parameters.
///
/// `slope` is always `bandwidth / chirp_duration`; use [`RadarConfig::new`]
/// to keep the fields consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarConfig {
    /// Carrier frequency at sweep start (Hz).
    pub f0: f64,
    /// Sweep bandwidth (Hz).
    pub bandwidth: f64,
    /// Chirp duration (s).
    pub chirp_duration: f64,
    /// Frequency slope B/T (Hz/s).
    pub slope: f64,
    /// Number of sampled frequency points per sweep.
    pub n_freq: usize,
    /// Propagation speed (m/s).
    pub c: f64,
}

impl RadarConfig {
    /// Validate parameters and derive the slope.
    pub fn new(f0: f64, bandwidth: f64, chirp_duration: f64, n_freq: usize) -> Result<Self> {
        if !(f0 > 0.0) || !f0.is_finite() {
            return Err(Error::config(format!("carrier frequency must be positive, got {f0}")));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if !(chirp_duration > 0.0) || !chirp_duration.is_finite() {
            return Err(Error::config(format!(
                "chirp duration must be positive, got {chirp_duration}"
            )));
        }
        if n_freq < 2 {
            return Err(Error::config(format!("need at least 2 frequency points, got {n_freq}")));
        }
        Ok(RadarConfig {
            f0,
            bandwidth,
            chirp_duration,
            slope: bandwidth / chirp_duration,
            n_freq,
            c: SPEED_OF_LIGHT,
        })
    }

    /// Default desk-scale band: 77-81 GHz, 32 frequency points.
    pub fn default_band() -> Self {
        RadarConfig::new(77e9, 4e9, 1e-3, 32).expect("default band is valid")
    }

    /// Wavelength at the carrier (m).
    pub fn carrier_wavelength(&self) -> f64 {
        self.c / self.f0
    }

    /// Sampled sweep frequencies, linearly spaced over `[f0, f0 + B]` (Hz).
    pub fn frequencies(&self) -> Vec<f64> {
        let step = self.bandwidth / (self.n_freq - 1) as f64;
        (0..self.n_freq).map(|j| self.f0 + j as f64 * step).collect()
    }
}

/// One point echo: round-trip delay and complex reflectivity.
///
/// The reflectivity magnitude carries both scattering strength and amplitude
/// decay; its phase is the scattering phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Echo {
    /// Round-trip delay (s), `tau = 2R/c` for a monostatic reflector at range R.
    pub tau: f64,
    /// Complex reflectivity (dimensionless).
    pub sigma: Complex64,
}

impl Echo {
    pub fn new(tau: f64, sigma: Complex64) -> Result<Self> {
        if !(tau >= 0.0) {
            return Err(Error::domain(format!("echo delay must be non-negative, got {tau}")));
        }
        if !sigma.re.is_finite() || !sigma.im.is_finite() {
            return Err(Error::domain("echo reflectivity must be finite"));
        }
        Ok(Echo { tau, sigma })
    }
}

fn check_sweep_time(t: f64, cfg: &RadarConfig) -> Result<()> {
    if !(0.0..=cfg.chirp_duration).contains(&t) {
        return Err(Error::domain(format!(
            "sample time {t} outside sweep [0, {}]",
            cfg.chirp_duration
        )));
    }
    Ok(())
}

/// Transmitted chirp amplitude `cos(2*pi*(f0*t + 0.5*K*t^2))` at time `t`.
pub fn chirp_sample(t: f64, cfg: &RadarConfig) -> Result<f64> {
    check_sweep_time(t, cfg)?;
    Ok((2.0 * PI * (cfg.f0 * t + 0.5 * cfg.slope * t * t)).cos())
}

/// Dechirped beat sample for one echo at time `t`:
/// `sigma * exp(-j*2*pi*(f0*tau + K*tau*t - 0.5*K*tau^2))`.
///
/// The phase is affine in `t` with slope `-2*pi*K*tau`; the quadratic
/// residual video phase term `0.5*K*tau^2` is kept.
pub fn beat_sample(echo: &Echo, t: f64, cfg: &RadarConfig) -> Result<ComplexSample> {
    check_sweep_time(t, cfg)?;
    let phase =
        -2.0 * PI * (cfg.f0 * echo.tau + cfg.slope * echo.tau * t - 0.5 * cfg.slope * echo.tau * echo.tau);
    Ok(echo.sigma * Complex64::from_polar(1.0, phase))
}

/// Wavenumbers `k_j = 2*pi*f_j/c` (rad/m) for the sampled sweep frequencies.
///
/// The grid is strictly increasing with constant spacing.
pub fn wavenumber_grid(cfg: &RadarConfig) -> Vec<f64> {
    cfg.frequencies().iter().map(|f| 2.0 * PI * f / cfg.c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_77ghz() -> RadarConfig {
        RadarConfig::new(77e9, 4e9, 1e-3, 32).unwrap()
    }

    #[test]
    fn config_rejects_bad_parameters() {
        assert!(RadarConfig::new(0.0, 4e9, 1e-3, 32).is_err());
        assert!(RadarConfig::new(77e9, -1.0, 1e-3, 32).is_err());
        assert!(RadarConfig::new(77e9, 4e9, 0.0, 32).is_err());
        assert!(RadarConfig::new(77e9, 4e9, 1e-3, 1).is_err());
    }

    #[test]
    fn config_derives_slope() {
        let cfg = cfg_77ghz();
        assert_eq!(cfg.slope, 4e9 / 1e-3);
    }

    #[test]
    fn chirp_at_zero_is_one() {
        let cfg = cfg_77ghz();
        assert_eq!(chirp_sample(0.0, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn chirp_with_zero_phase_everywhere() {
        // Degenerate waveform: no carrier, no sweep. Constructed directly
        // because the validating constructor requires positive values.
        let cfg = RadarConfig {
            f0: 0.0,
            bandwidth: 0.0,
            chirp_duration: 1e-3,
            slope: 0.0,
            n_freq: 2,
            c: SPEED_OF_LIGHT,
        };
        assert_eq!(chirp_sample(0.5e-3, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn chirp_matches_high_precision_reference() {
        // cos(2*pi*(77e9*1e-6 + 0.5*4e12*1e-12)) evaluated at 50 decimal
        // digits. The argument is exactly 77002 cycles, so the reference
        // value is 1 to far below f64 resolution.
        let cfg = cfg_77ghz();
        let v = chirp_sample(1e-6, &cfg).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn chirp_matches_high_precision_reference_generic_time() {
        // Same 50-digit evaluation at t = 2.025e-6, a non-integer number of
        // carrier cycles so the cosine sits away from an extremum.
        let cfg = cfg_77ghz();
        let v = chirp_sample(2.025e-6, &cfg).unwrap();
        let reference = 0.30153795994449568_f64;
        assert!(
            (v - reference).abs() < 1e-7,
            "got {v}, reference {reference}"
        );
    }

    #[test]
    fn chirp_rejects_time_outside_sweep() {
        let cfg = cfg_77ghz();
        assert!(matches!(chirp_sample(-1e-9, &cfg), Err(Error::Domain(_))));
        assert!(matches!(chirp_sample(1.1e-3, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn beat_zero_delay_is_unity() {
        let cfg = cfg_77ghz();
        let echo = Echo::new(0.0, Complex64::new(1.0, 0.0)).unwrap();
        for &t in &[0.0, 1e-5, 5e-4, 1e-3] {
            let s = beat_sample(&echo, t, &cfg).unwrap();
            assert_eq!(s, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn beat_null_reflector_is_zero() {
        let cfg = cfg_77ghz();
        let echo = Echo::new(3e-9, Complex64::new(0.0, 0.0)).unwrap();
        let s = beat_sample(&echo, 1e-4, &cfg).unwrap();
        assert_eq!(s, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn beat_phase_advance_matches_finite_difference_oracle() {
        // Echo at range 0.25 m. The phase advance between consecutive
        // samples must equal -2*pi*K*tau*dt; the oracle takes the discrete
        // phase difference of the evaluated samples.
        let cfg = cfg_77ghz();
        let range_m = 0.25;
        let tau = 2.0 * range_m / cfg.c;
        let echo = Echo::new(tau, Complex64::new(1.0, 0.0)).unwrap();
        let dt = 1e-6;
        let expected = -2.0 * PI * cfg.slope * tau * dt;
        for i in 0..20 {
            let t = i as f64 * dt;
            let a = beat_sample(&echo, t, &cfg).unwrap();
            let b = beat_sample(&echo, t + dt, &cfg).unwrap();
            let measured = (b / a).arg();
            assert!(
                (measured - expected).abs() < 1e-12,
                "step {i}: measured {measured}, expected {expected}"
            );
        }
    }

    #[test]
    fn beat_magnitude_equals_reflectivity_magnitude() {
        let cfg = cfg_77ghz();
        let sigma = Complex64::new(0.3, -0.4);
        let echo = Echo::new(1.8e-9, sigma).unwrap();
        for i in 0..50 {
            let t = i as f64 * (cfg.chirp_duration / 49.0);
            let s = beat_sample(&echo, t, &cfg).unwrap();
            assert!((s.norm() - sigma.norm()).abs() < 1e-14);
        }
    }

    #[test]
    fn beat_phase_is_affine_in_time() {
        // Three equally spaced samples: arg(s2/s1) == arg(s3/s2) to 1e-9
        // relative, i.e. the phase is collinear in t.
        let cfg = cfg_77ghz();
        let echo = Echo::new(2.1e-9, Complex64::from_polar(0.7, 0.9)).unwrap();
        let (t1, t2, t3) = (1e-5, 2e-5, 3e-5);
        let s1 = beat_sample(&echo, t1, &cfg).unwrap();
        let s2 = beat_sample(&echo, t2, &cfg).unwrap();
        let s3 = beat_sample(&echo, t3, &cfg).unwrap();
        let d1 = (s2 / s1).arg();
        let d2 = (s3 / s2).arg();
        assert!((d1 - d2).abs() <= 1e-9 * d1.abs().max(d2.abs()));
    }

    #[test]
    fn wavenumber_grid_endpoints() {
        let cfg = RadarConfig::new(77e9, 4e9, 1e-3, 2).unwrap();
        let k = wavenumber_grid(&cfg);
        assert_eq!(k.len(), 2);
        assert_eq!(k[0], 2.0 * PI * 77e9 / SPEED_OF_LIGHT);
        assert_eq!(k[1], 2.0 * PI * 81e9 / SPEED_OF_LIGHT);
    }

    #[test]
    fn wavenumber_grid_midpoint_is_mean() {
        let cfg = RadarConfig::new(77e9, 4e9, 1e-3, 3).unwrap();
        let k = wavenumber_grid(&cfg);
        assert_eq!(k.len(), 3);
        assert!((k[1] - 0.5 * (k[0] + k[2])).abs() < 1e-9 * k[1]);
    }

    #[test]
    fn wavenumber_grid_spans_default_band() {
        // 77 GHz sweep start, 81 GHz sweep end.
        let k = wavenumber_grid(&RadarConfig::default_band());
        assert!((k[0] * SPEED_OF_LIGHT / (2.0 * PI) - 77e9).abs() < 1.0);
        assert!((k[31] * SPEED_OF_LIGHT / (2.0 * PI) - 81e9).abs() < 1.0);
    }

    #[test]
    fn wavenumber_grid_is_uniform_and_increasing() {
        let cfg = RadarConfig::new(77e9, 4e9, 1e-3, 64).unwrap();
        let k = wavenumber_grid(&cfg);
        let d0 = k[1] - k[0];
        for w in k.windows(2) {
            let d = w[1] - w[0];
            assert!(d > 0.0);
            assert!((d - d0).abs() <= 1e-12 * d0);
        }
    }
}
