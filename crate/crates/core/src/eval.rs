//! BER measurement of an equalizer over the simulated channel.

use crate::channel::{apply_channel, bit_errors, generate_symbols, hard_decision, ChannelConfig};
use crate::rng::substream;
use crate::Result;

/// Anything that turns received samples into one soft output per symbol.
pub trait Equalizer {
    fn equalize(&self, y: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BerEstimate {
    pub errors: u64,
    pub bits: u64,
}

impl BerEstimate {
    pub fn ber(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.errors as f64 / self.bits as f64
        }
    }

    /// BER, or 1/bits when no error was observed.
    pub fn ber_or_floor(&self) -> f64 {
        if self.errors == 0 {
            1.0 / self.bits.max(1) as f64
        } else {
            self.ber()
        }
    }

    /// Wilson score interval at 95 % confidence.
    pub fn confidence_interval(&self) -> (f64, f64) {
        let n = self.bits as f64;
        if n == 0.0 {
            return (0.0, 1.0);
        }
        let z = 1.959_963_984_540_054;
        let p = self.ber();
        let denom = 1.0 + z * z / n;
        let center = (p + z * z / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
        let lo = if self.errors == 0 { 0.0 } else { (center - half).max(0.0) };
        (lo, (center + half).min(1.0))
    }

    pub fn merge(self, other: BerEstimate) -> BerEstimate {
        BerEstimate {
            errors: self.errors + other.errors,
            bits: self.bits + other.bits,
        }
    }
}

/// Sends `symbols` fresh symbols through `channel`, equalizes and slices.
pub fn evaluate_ber<E: Equalizer + ?Sized>(
    eq: &E,
    channel: &ChannelConfig,
    symbols: usize,
    seed: u64,
) -> Result<BerEstimate> {
    let scheme = channel.scheme();
    let x = generate_symbols(symbols, &scheme, substream(seed, 0xE5))?;
    let y = apply_channel(&x, channel, substream(seed, 0xE6))?;
    let z = eq.equalize(&y.samples)?;
    let rx = hard_decision(&z, &scheme);
    let errors = bit_errors(&x, &rx, &scheme)?;
    Ok(BerEstimate {
        errors,
        bits: (symbols * scheme.bits_per_symbol()) as u64,
    })
}
