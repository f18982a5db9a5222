use super::{ModulationScheme, SymbolSequence};
use crate::{Error, Result};

/// Minimum-distance slicer. Ties go to the lower index.
pub fn hard_decision(z: &[f64], scheme: &ModulationScheme) -> SymbolSequence {
    let alphabet = scheme.alphabet();
    let indices = z
        .iter()
        .map(|&v| {
            let mut best = 0;
            let mut best_dist = (v - alphabet[0]).abs();
            for (i, &a) in alphabet.iter().enumerate().skip(1) {
                let d = (v - a).abs();
                if d < best_dist {
                    best = i;
                    best_dist = d;
                }
            }
            best
        })
        .collect();
    SymbolSequence::new(indices, scheme.order()).expect("indices bounded by alphabet")
}

pub fn bit_errors(tx: &SymbolSequence, rx: &SymbolSequence, scheme: &ModulationScheme) -> Result<u64> {
    if tx.len() != rx.len() {
        return Err(Error::LengthMismatch {
            expected: tx.len(),
            actual: rx.len(),
        });
    }
    Ok(tx
        .indices()
        .iter()
        .zip(rx.indices())
        .map(|(&a, &b)| (scheme.label(a) ^ scheme.label(b)).count_ones() as u64)
        .sum())
}

/// Bit errors over transmitted bits.
pub fn ber(tx: &SymbolSequence, rx: &SymbolSequence, scheme: &ModulationScheme) -> Result<f64> {
    let errors = bit_errors(tx, rx, scheme)?;
    let bits = tx.len() * scheme.bits_per_symbol();
    if bits == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(errors as f64 / bits as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_symbols;
    use proptest::prelude::*;

    #[test]
    fn slicer_examples() {
        let pam2 = ModulationScheme::pam2();
        assert_eq!(hard_decision(&[0.9, -1.2], &pam2).indices(), &[1, 0]);
        assert_eq!(hard_decision(&[0.0], &pam2).indices(), &[0]);
        let pam4 = ModulationScheme::pam4();
        assert_eq!(hard_decision(&[-1.0, 0.0, 1.0], &pam4).indices(), &[0, 1, 2]);
    }

    #[test]
    fn ber_examples() {
        let pam4 = ModulationScheme::pam4();
        let tx = generate_symbols(100, &pam4, 1).unwrap();
        assert_eq!(ber(&tx, &tx, &pam4).unwrap(), 0.0);
        let mut idx = tx.indices().to_vec();
        idx[17] = if idx[17] == 3 { 2 } else { idx[17] + 1 };
        let rx = SymbolSequence::new(idx, 4).unwrap();
        assert_eq!(ber(&tx, &rx, &pam4).unwrap(), 1.0 / 200.0);
        let short = SymbolSequence::new(vec![0; 3], 4).unwrap();
        assert!(ber(&tx, &short, &pam4).is_err());
    }

    proptest! {
        #[test]
        fn slicer_matches_exhaustive_search(z in prop::collection::vec(-3.0f64..3.0, 1..50), pam4 in any::<bool>()) {
            let scheme = if pam4 { ModulationScheme::pam4() } else { ModulationScheme::pam2() };
            let got = hard_decision(&z, &scheme);
            for (v, &i) in z.iter().zip(got.indices()) {
                let dists: Vec<f64> = scheme.alphabet().iter().map(|a| (v - a).abs()).collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let first = dists.iter().position(|&d| d == min).unwrap();
                prop_assert_eq!(i, first);
            }
        }

        #[test]
        fn ber_matches_naive_bit_count(a in prop::collection::vec(0usize..4, 1..64), seed in any::<u64>()) {
            let scheme = ModulationScheme::pam4();
            let n = a.len();
            let tx = SymbolSequence::new(a, 4).unwrap();
            let rx = generate_symbols(n, &scheme, seed).unwrap();
            let mut errors = 0;
            for (&s, &r) in tx.indices().iter().zip(rx.indices()) {
                for bit in 0..2 {
                    if (scheme.label(s) >> bit) & 1 != (scheme.label(r) >> bit) & 1 {
                        errors += 1;
                    }
                }
            }
            prop_assert_eq!(ber(&tx, &rx, &scheme).unwrap(), errors as f64 / (2 * n) as f64);
        }
    }
}
