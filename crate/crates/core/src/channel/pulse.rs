use crate::{Error, Result};
use std::f64::consts::PI;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Raised-cosine impulse response evaluated at `t` measured in symbol periods.
pub fn raised_cosine(t: f64, rolloff: f64) -> f64 {
    let x = 2.0 * rolloff * t;
    let denom = 1.0 - x * x;
    if denom.abs() < 1e-12 {
        // t = ±T/(2·rolloff): removable singularity.
        PI / 4.0 * sinc(1.0 / (2.0 * rolloff))
    } else {
        sinc(t) * (PI * rolloff * t).cos() / denom
    }
}

/// Symmetric raised-cosine taps spanning `span` symbols at `sps` samples
/// per symbol, peak-normalized so the center tap is exactly 1.
pub fn rc_taps(rolloff: f64, span: usize, sps: usize) -> Result<Vec<f64>> {
    if !(rolloff > 0.0 && rolloff <= 1.0) {
        return Err(Error::config(format!("rc rolloff {rolloff} outside (0, 1]")));
    }
    if span % 2 == 0 {
        return Err(Error::config(format!("rc span {span} must be odd")));
    }
    if sps == 0 {
        return Err(Error::config("samples per symbol must be positive"));
    }
    let n = span * sps + 1;
    let center = (n / 2) as f64;
    let taps = (0..n)
        .map(|j| raised_cosine((j as f64 - center) / sps as f64, rolloff))
        .collect();
    Ok(taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_tap_is_one() {
        let taps = rc_taps(0.2, 15, 2).unwrap();
        assert_eq!(taps.len(), 31);
        assert_eq!(taps[15], 1.0);
    }

    #[test]
    fn zero_crossings_at_symbol_offsets() {
        for &rolloff in &[0.1, 0.2, 0.5, 1.0] {
            let sps = 4;
            let taps = rc_taps(rolloff, 9, sps).unwrap();
            let c = taps.len() / 2;
            for k in 1..=4 {
                assert!(taps[c + k * sps].abs() < 1e-12, "rolloff {rolloff} k {k}");
                assert!(taps[c - k * sps].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric() {
        let taps = rc_taps(0.35, 11, 2).unwrap();
        let n = taps.len();
        for j in 0..n {
            assert_eq!(taps[j], taps[n - 1 - j]);
        }
    }

    #[test]
    fn full_rolloff_matches_textbook_formula() {
        // rolloff = 1: h(t) = sinc(t)·cos(πt)/(1 − 4t²); t = ±1/2 hits the
        // singularity, whose limit is π/4·sinc(1/2) = 1/2.
        let taps = rc_taps(1.0, 8 + 1, 2).unwrap();
        let c = taps.len() / 2;
        for (j, &tap) in taps.iter().enumerate() {
            let t = (j as f64 - c as f64) / 2.0;
            let expected = if (t.abs() - 0.5).abs() < 1e-15 {
                0.5
            } else if t == 0.0 {
                1.0
            } else {
                let s = (PI * t).sin() / (PI * t);
                s * (PI * t).cos() / (1.0 - 4.0 * t * t)
            };
            assert!((tap - expected).abs() < 1e-14, "j={j} {tap} vs {expected}");
        }
    }

    #[test]
    fn span_must_be_odd() {
        assert!(rc_taps(0.2, 8, 2).is_err());
        assert!(rc_taps(0.0, 9, 2).is_err());
    }
}
