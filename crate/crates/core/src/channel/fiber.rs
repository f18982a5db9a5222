use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Standard single-mode fiber span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberParams {
    /// ps/(nm·km)
    pub dispersion: f64,
    /// dB/km
    pub attenuation_db: f64,
    /// km
    pub length_km: f64,
    /// nm
    pub wavelength_nm: f64,
}

impl Default for FiberParams {
    fn default() -> Self {
        Self {
            dispersion: 17.0,
            attenuation_db: 0.2,
            length_km: 30.0,
            wavelength_nm: 1550.0,
        }
    }
}

impl FiberParams {
    /// Group-velocity dispersion β₂ in s²/m.
    pub fn beta2(&self) -> f64 {
        let lambda = self.wavelength_nm * 1e-9;
        // ps/(nm·km) -> s/m²
        let d = self.dispersion * 1e-6;
        -lambda * lambda * d / (2.0 * PI * SPEED_OF_LIGHT)
    }

    /// β₂ in ps²/km, the unit fiber data sheets use.
    pub fn beta2_ps2_per_km(&self) -> f64 {
        self.beta2() * 1e24 * 1e3
    }

    /// Power attenuation in Np/km.
    pub fn attenuation_np(&self) -> f64 {
        self.attenuation_db * std::f64::consts::LN_10 / 10.0
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.length_km >= 0.0
            && self.wavelength_nm > 0.0
            && self.attenuation_db >= 0.0
            && self.dispersion.is_finite();
        if ok {
            Ok(())
        } else {
            Err(crate::Error::config(format!("invalid fiber parameters {self:?}")))
        }
    }

    /// Field transfer function H(f) at a single frequency in Hz.
    pub fn response_at(&self, f: f64) -> Complex64 {
        let length_m = self.length_km * 1e3;
        let loss = -0.5 * self.attenuation_np() * self.length_km;
        let phase = 2.0 * PI * PI * self.beta2() * f * f * length_m;
        Complex64::from_polar(loss.exp(), phase)
    }

    /// Delay spread in seconds accumulated over the span by a signal of
    /// two-sided bandwidth `bandwidth_hz`.
    pub fn delay_spread(&self, bandwidth_hz: f64) -> f64 {
        2.0 * PI * self.beta2().abs() * self.length_km * 1e3 * bandwidth_hz
    }
}

/// Chromatic-dispersion frequency response sampled on `freq_grid` (Hz).
pub fn cd_frequency_response(fiber: &FiberParams, freq_grid: &[f64]) -> Vec<Complex64> {
    freq_grid.iter().map(|&f| fiber.response_at(f)).collect()
}

/// FFT bin frequencies in natural (unshifted) order.
pub fn fft_frequencies(n: usize, sample_rate: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            k * sample_rate / n as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta2_of_standard_fiber() {
        // −λ²D/(2πc) = −(1550e-9)²·17e-6/(2π·299792458) s²/m = −21.68262 ps²/km
        let beta2 = FiberParams::default().beta2_ps2_per_km();
        assert!((beta2 - (-21.682619391414892)).abs() < 1e-9, "{beta2}");
    }

    #[test]
    fn dc_response_is_real_attenuation() {
        let fiber = FiberParams::default();
        let h = fiber.response_at(0.0);
        let expected = (-0.5 * 0.2 * std::f64::consts::LN_10 / 10.0 * 30.0).exp();
        assert_eq!(h.im, 0.0);
        assert!((h.re - expected).abs() < 1e-15);
        // 6 dB of power loss halves the field amplitude.
        assert!((h.re - 0.5011872336272722).abs() < 1e-12);
    }

    #[test]
    fn magnitude_is_flat_and_even() {
        let fiber = FiberParams::default();
        let grid: Vec<f64> = (-50..=50).map(|k| k as f64 * 1e9).collect();
        let h = cd_frequency_response(&fiber, &grid);
        let h0 = fiber.response_at(0.0).norm();
        for (f, hf) in grid.iter().zip(&h) {
            assert!((hf.norm() / h0 - 1.0).abs() < 1e-12);
            let mirrored = fiber.response_at(-f);
            assert_eq!(*hf, mirrored);
        }
    }

    #[test]
    fn frequency_grid_layout() {
        let f = fft_frequencies(8, 8.0);
        assert_eq!(f, vec![0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0]);
    }
}
