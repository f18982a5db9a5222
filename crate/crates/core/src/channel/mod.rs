//! IM/DD channel: transmitter, RC pulse shaping, chromatic dispersion,
//! square-law detection and additive white Gaussian noise.
//!
//! The simulated chain is
//!
//! ```text
//! x ─► levels ─► ↑2 ─► h_ps ─► H_cd(f) ─► |·|² ─► (+) ─► y
//!                                                  ▲
//!                                                  n
//! ```
//!
//! Transmit levels are nonnegative field amplitudes. The equalizer does not
//! reproduce those levels; it targets a zero-mean, unit-spaced constellation
//! (`ModulationScheme::alphabet`) on which decisions and the unsupervised
//! losses operate.

mod decision;
mod fiber;
mod pulse;

pub use decision::{ber, bit_errors, hard_decision};
pub use fiber::{cd_frequency_response, fft_frequencies, FiberParams, SPEED_OF_LIGHT};
pub use pulse::{raised_cosine, rc_taps};

use crate::rng;
use crate::{Error, Result};
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Oversampling factor of the whole chain.
pub const SAMPLES_PER_SYMBOL: usize = 2;

/// PAM constellation with transmit levels, equalizer targets and bit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationScheme {
    alphabet: Vec<f64>,
    tx_levels: Vec<f64>,
    labels: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Pam2,
    Pam4,
}

impl Modulation {
    pub fn scheme(self) -> ModulationScheme {
        match self {
            Modulation::Pam2 => ModulationScheme::pam2(),
            Modulation::Pam4 => ModulationScheme::pam4(),
        }
    }
}

impl ModulationScheme {
    pub fn new(alphabet: Vec<f64>, tx_levels: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let m = alphabet.len();
        if !(m == 2 || m == 4) {
            return Err(Error::config(format!("unsupported constellation size {m}")));
        }
        if tx_levels.len() != m || labels.len() != m {
            return Err(Error::config("alphabet, levels and labels differ in size"));
        }
        if alphabet.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("alphabet must be strictly increasing"));
        }
        if tx_levels.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(Error::config("intensity modulation needs nonnegative levels"));
        }
        let mut seen = vec![false; m];
        for &l in &labels {
            match seen.get_mut(l as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::config("bit labels must be a bijection")),
            }
        }
        Ok(Self {
            alphabet,
            tx_levels,
            labels,
        })
    }

    /// On-off keying, equalized onto {−1, +1}.
    pub fn pam2() -> Self {
        Self::new(vec![-1.0, 1.0], vec![0.0, 1.0], vec![0, 1]).expect("valid PAM-2")
    }

    /// Four field levels {0, 1/3, 2/3, 1}, equalized onto {−1.5, −0.5, 0.5, 1.5}
    /// with Gray labels 00, 01, 11, 10.
    pub fn pam4() -> Self {
        Self::new(
            vec![-1.5, -0.5, 0.5, 1.5],
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            vec![0b00, 0b01, 0b11, 0b10],
        )
        .expect("valid PAM-4")
    }

    pub fn order(&self) -> usize {
        self.alphabet.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.order().trailing_zeros() as usize
    }

    /// Equalizer target points A_1 < … < A_M.
    pub fn alphabet(&self) -> &[f64] {
        &self.alphabet
    }

    pub fn tx_levels(&self) -> &[f64] {
        &self.tx_levels
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    /// Equalizer targets for a symbol sequence.
    pub fn targets(&self, symbols: &SymbolSequence) -> Vec<f64> {
        symbols.indices().iter().map(|&i| self.alphabet[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    indices: Vec<usize>,
    order: usize,
}

impl SymbolSequence {
    pub fn new(indices: Vec<usize>, order: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= order) {
            return Err(Error::config(format!("symbol index {bad} >= order {order}")));
        }
        Ok(Self { indices, order })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    pub samples: Vec<f64>,
    /// samples per second
    pub rate: f64,
}

impl SampleSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Conditioning applied to the detected, noisy samples before they reach
/// the equalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontEnd {
    /// Detector output plus noise, untouched.
    #[default]
    Raw,
    /// Per-sequence mean removed, then scaled to unit RMS.
    AcNormalized,
}

impl FrontEnd {
    pub fn apply(&self, samples: &mut [f64]) {
        match self {
            FrontEnd::Raw => {}
            FrontEnd::AcNormalized => {
                if samples.is_empty() {
                    return;
                }
                let n = samples.len() as f64;
                let mean = samples.iter().sum::<f64>() / n;
                let rms = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
                samples.iter_mut().for_each(|v| *v = (*v - mean) * scale);
            }
        }
    }
}

/// Transmit pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseShape {
    RaisedCosine { rolloff: f64, span: usize },
    /// Unit impulse; the shaping stage passes samples through.
    Impulse,
}

impl Default for PulseShape {
    fn default() -> Self {
        PulseShape::RaisedCosine {
            rolloff: 0.2,
            span: 15,
        }
    }
}

impl PulseShape {
    pub fn taps(&self) -> Result<Vec<f64>> {
        match *self {
            PulseShape::RaisedCosine { rolloff, span } => rc_taps(rolloff, span, SAMPLES_PER_SYMBOL),
            PulseShape::Impulse => Ok(vec![1.0]),
        }
    }

    fn excess_bandwidth(&self) -> f64 {
        match *self {
            PulseShape::RaisedCosine { rolloff, .. } => rolloff,
            PulseShape::Impulse => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default)]
    pub fiber: FiberParams,
    pub modulation: Modulation,
    /// GBd
    pub symbol_rate_gbd: f64,
    #[serde(default)]
    pub pulse: PulseShape,
    /// Signal-to-noise ratio in dB; `inf` disables the noise source.
    pub snr_db: f64,
    /// FFT length of the dispersion stage; when absent, the smallest power
    /// of two holding the sequence plus the guard.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fft_size: Option<usize>,
    #[serde(default)]
    pub front_end: FrontEnd,
}

impl ChannelConfig {
    /// 25 GBd PAM-2 over 30 km of standard fiber at 20 dB SNR, with an
    /// AC-coupled, RMS-normalized receiver.
    pub fn pam2_default() -> Self {
        Self {
            fiber: FiberParams::default(),
            modulation: Modulation::Pam2,
            symbol_rate_gbd: 25.0,
            pulse: PulseShape::default(),
            snr_db: 20.0,
            fft_size: None,
            front_end: FrontEnd::AcNormalized,
        }
    }

    /// 20 GBd PAM-4 over the same link.
    pub fn pam4_default() -> Self {
        Self {
            modulation: Modulation::Pam4,
            symbol_rate_gbd: 20.0,
            ..Self::pam2_default()
        }
    }

    pub fn scheme(&self) -> ModulationScheme {
        self.modulation.scheme()
    }

    pub fn sample_rate(&self) -> f64 {
        self.symbol_rate_gbd * 1e9 * SAMPLES_PER_SYMBOL as f64
    }

    pub fn with_dispersion(&self, dispersion: f64) -> Self {
        let mut cfg = self.clone();
        cfg.fiber.dispersion = dispersion;
        cfg
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        let mut cfg = self.clone();
        cfg.snr_db = snr_db;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.fiber.validate()?;
        if !(self.symbol_rate_gbd > 0.0 && self.symbol_rate_gbd.is_finite()) {
            return Err(Error::config("symbol rate must be positive"));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::config("snr_db must be a number or +inf"));
        }
        self.pulse.taps()?;
        if let Some(n) = self.fft_size {
            if !n.is_power_of_two() {
                return Err(Error::config(format!("fft_size {n} is not a power of two")));
            }
        }
        Ok(())
    }

    /// Zero-padding appended before the dispersion FFT: four times the
    /// dispersion-induced delay spread, in samples.
    pub fn guard_samples(&self) -> usize {
        let bandwidth = self.symbol_rate_gbd * 1e9 * (1.0 + self.pulse.excess_bandwidth());
        let spread = self.fiber.delay_spread(bandwidth) * self.sample_rate();
        4 * spread.ceil() as usize
    }

    /// FFT length for a sequence of `n_samples`.
    pub fn resolve_fft_size(&self, n_samples: usize) -> Result<usize> {
        let needed = n_samples + self.guard_samples();
        match self.fft_size {
            None => Ok(needed.next_power_of_two()),
            Some(n) if n >= needed => Ok(n),
            Some(n) => Err(Error::config(format!(
                "fft_size {n} too small: {n_samples} samples plus {} guard samples need {needed}",
                self.guard_samples()
            ))),
        }
    }
}

/// `n` i.i.d. uniform symbol indices.
pub fn generate_symbols(n: usize, scheme: &ModulationScheme, seed: u64) -> Result<SymbolSequence> {
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mut rng = rng::seeded(seed);
    let m = scheme.order();
    let indices = (0..n).map(|_| rng.random_range(0..m)).collect();
    SymbolSequence::new(indices, m)
}

/// Zero-stuffing upsampler: symbol n lands on sample `sps·n`.
pub fn upsample(values: &[f64], sps: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len() * sps];
    for (n, &v) in values.iter().enumerate() {
        out[n * sps] = v;
    }
    out
}

/// Linear convolution with an odd-length filter, trimmed so the output is
/// aligned with the input (the filter's center tap has zero delay).
pub fn filter_centered(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let c = taps.len() / 2;
    let n = signal.len();
    (0..n)
        .map(|m| {
            let mut acc = 0.0;
            for (j, &h) in taps.iter().enumerate() {
                // output[m] = Σ_j h[j]·x[m + c − j]
                let idx = m + c;
                if idx >= j && idx - j < n {
                    acc += h * signal[idx - j];
                }
            }
            acc
        })
        .collect()
}

/// Applies H_cd to a real baseband field. Returns the full circular result
/// of length `fft_size`; the caller keeps the leading samples.
pub fn disperse(field: &[f64], fiber: &FiberParams, sample_rate: f64, fft_size: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(fft_size, Complex64::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(fft_size).process(&mut buf);
    let freqs = fft_frequencies(fft_size, sample_rate);
    for (b, f) in buf.iter_mut().zip(freqs) {
        *b *= fiber.response_at(f);
    }
    planner.plan_fft_inverse(fft_size).process(&mut buf);
    let scale = 1.0 / fft_size as f64;
    buf.iter_mut().for_each(|b| *b *= scale);
    buf
}

/// Noise-free part of the chain: levels, upsampling, shaping, dispersion
/// and square-law detection.
pub fn detect_noiseless(x: &SymbolSequence, cfg: &ChannelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    let scheme = cfg.scheme();
    if x.order() != scheme.order() {
        return Err(Error::config("symbol order does not match the modulation"));
    }
    let levels: Vec<f64> = x.indices().iter().map(|&i| scheme.tx_levels()[i]).collect();
    let upsampled = upsample(&levels, SAMPLES_PER_SYMBOL);
    let shaped = filter_centered(&upsampled, &cfg.pulse.taps()?);
    let n = shaped.len();
    let fft_size = cfg.resolve_fft_size(n)?;
    let field = disperse(&shaped, &cfg.fiber, cfg.sample_rate(), fft_size);
    Ok(field[..n].iter().map(|v| v.norm_sqr()).collect())
}

/// Runs the full chain of symbols through the channel; `seed` drives the noise.
pub fn apply_channel(x: &SymbolSequence, cfg: &ChannelConfig, seed: u64) -> Result<SampleSequence> {
    let detected = detect_noiseless(x, cfg)?;
    let rate = cfg.sample_rate();
    let mut out = awgn(&SampleSequence { samples: detected, rate }, cfg.snr_db, seed)?;
    cfg.front_end.apply(&mut out.samples);
    Ok(out)
}

/// Adds zero-mean Gaussian noise with variance mean(s²)/10^(snr_db/10).
pub fn awgn(s: &SampleSequence, snr_db: f64, seed: u64) -> Result<SampleSequence> {
    if s.is_empty() {
        return Err(Error::EmptySequence);
    }
    if snr_db == f64::INFINITY {
        return Ok(s.clone());
    }
    let power = s.samples.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = rng::seeded(seed);
    let samples = s
        .samples
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + sigma * n
        })
        .collect();
    Ok(SampleSequence {
        samples,
        rate: s.rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate(modulation: Modulation) -> ChannelConfig {
        ChannelConfig {
            fiber: FiberParams {
                length_km: 0.0,
                ..FiberParams::default()
            },
            modulation,
            symbol_rate_gbd: 25.0,
            pulse: PulseShape::Impulse,
            snr_db: f64::INFINITY,
            fft_size: None,
            front_end: FrontEnd::Raw,
        }
    }

    #[test]
    fn symbols_are_deterministic_and_in_range() {
        let pam2 = ModulationScheme::pam2();
        let a = generate_symbols(4, &pam2, 11).unwrap();
        let b = generate_symbols(4, &pam2, 11).unwrap();
        assert_eq!(a, b);
        let pam4 = ModulationScheme::pam4();
        let one = generate_symbols(1, &pam4, 3).unwrap();
        assert!(one.indices()[0] < 4);
        assert!(matches!(generate_symbols(0, &pam2, 1), Err(Error::EmptySequence)));
    }

    #[test]
    fn symbol_frequencies_are_uniform() {
        let pam2 = ModulationScheme::pam2();
        let x = generate_symbols(100_000, &pam2, 5).unwrap();
        let ones = x.indices().iter().filter(|&&i| i == 1).count() as f64 / 1e5;
        assert!((0.48..=0.52).contains(&ones), "{ones}");
    }

    #[test]
    fn modulation_invariants_are_checked() {
        assert!(ModulationScheme::new(vec![1.0, -1.0], vec![0.0, 1.0], vec![0, 1]).is_err());
        assert!(ModulationScheme::new(vec![-1.0, 1.0], vec![-1.0, 1.0], vec![0, 1]).is_err());
        assert!(ModulationScheme::new(vec![-1.0, 1.0], vec![0.0, 1.0], vec![1, 1]).is_err());
        assert!(ModulationScheme::new(vec![-1.0, 0.0, 1.0], vec![0.0; 3], vec![0, 1, 2]).is_err());
    }

    #[test]
    fn degenerate_chain_squares_upsampled_levels() {
        for modulation in [Modulation::Pam2, Modulation::Pam4] {
            let cfg = degenerate(modulation);
            let scheme = cfg.scheme();
            let x = generate_symbols(50, &scheme, 9).unwrap();
            let y = apply_channel(&x, &cfg, 1).unwrap();
            assert_eq!(y.len(), 100);
            for (n, &i) in x.indices().iter().enumerate() {
                let a = scheme.tx_levels()[i];
                assert!((y.samples[2 * n] - a * a).abs() < 1e-12);
                assert!(y.samples[2 * n + 1].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ac_front_end_gives_zero_mean_unit_rms() {
        let cfg = ChannelConfig::pam2_default();
        let x = generate_symbols(400, &cfg.scheme(), 6).unwrap();
        let y = apply_channel(&x, &cfg, 2).unwrap();
        let n = y.len() as f64;
        let mean = y.samples.iter().sum::<f64>() / n;
        let rms = (y.samples.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((rms - 1.0).abs() < 1e-12);

        let mut flat = vec![2.0; 5];
        FrontEnd::AcNormalized.apply(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
        let mut raw = vec![2.0, 3.0];
        FrontEnd::Raw.apply(&mut raw);
        assert_eq!(raw, vec![2.0, 3.0]);
    }

    #[test]
    fn lossless_dispersion_conserves_energy() {
        let mut cfg = ChannelConfig::pam2_default();
        cfg.fiber.attenuation_db = 0.0;
        let x = generate_symbols(300, &cfg.scheme(), 2).unwrap();
        let levels: Vec<f64> = x.indices().iter().map(|&i| cfg.scheme().tx_levels()[i]).collect();
        let shaped = filter_centered(&upsample(&levels, 2), &cfg.pulse.taps().unwrap());
        let n_fft = cfg.resolve_fft_size(shaped.len()).unwrap();
        let field = disperse(&shaped, &cfg.fiber, cfg.sample_rate(), n_fft);
        let before: f64 = shaped.iter().map(|v| v * v).sum();
        let after: f64 = field.iter().map(|v| v.norm_sqr()).sum();
        assert!(((after - before) / before).abs() < 1e-9);
    }

    #[test]
    fn detector_output_is_nonnegative_before_noise() {
        let cfg = ChannelConfig::pam4_default();
        let x = generate_symbols(500, &cfg.scheme(), 4).unwrap();
        let y = detect_noiseless(&x, &cfg).unwrap();
        assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn small_fixed_fft_is_rejected() {
        let mut cfg = ChannelConfig::pam2_default();
        cfg.fft_size = Some(256);
        let x = generate_symbols(128, &cfg.scheme(), 1).unwrap();
        let err = apply_channel(&x, &cfg, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        cfg.fft_size = Some(512);
        assert!(apply_channel(&x, &cfg, 1).is_ok());
    }

    #[test]
    fn channel_is_deterministic_per_seed() {
        let cfg = ChannelConfig::pam2_default();
        let x = generate_symbols(256, &cfg.scheme(), 8).unwrap();
        let a = apply_channel(&x, &cfg, 3).unwrap();
        let b = apply_channel(&x, &cfg, 3).unwrap();
        let c = apply_channel(&x, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn awgn_infinite_snr_is_identity() {
        let s = SampleSequence {
            samples: vec![0.5, 1.0, 0.0],
            rate: 1.0,
        };
        assert_eq!(awgn(&s, f64::INFINITY, 1).unwrap(), s);
    }

    #[test]
    fn awgn_variance_at_zero_db() {
        let s = SampleSequence {
            samples: (0..100_000).map(|k| ((k % 7) as f64 - 2.0) * 0.3).collect(),
            rate: 1.0,
        };
        let power = s.samples.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        let out = awgn(&s, 0.0, 42).unwrap();
        let diff: Vec<f64> = out.samples.iter().zip(&s.samples).map(|(a, b)| a - b).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diff.len() as f64;
        assert!((var / power - 1.0).abs() < 0.05, "{var} vs {power}");
        let other = awgn(&s, 0.0, 43).unwrap();
        assert_ne!(out, other);
    }
}
