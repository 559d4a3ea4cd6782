use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Adds white Gaussian noise whose mean-square power sits exactly
/// `snr_db` decibels below the signal's. `snr_db = +∞` returns the input
/// unchanged.
pub fn add_noise_at_snr(signal: &[f64], snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::Empty("signal"));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(format!("snr_db {snr_db}")));
    }
    let signal_power = power(signal);
    if signal_power <= 0.0 {
        return Err(Error::ZeroPowerSignal);
    }
    if snr_db == f64::INFINITY {
        return Ok(signal.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..signal.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let drawn = power(&noise);
    if drawn == 0.0 {
        return Err(Error::InvalidArgument("degenerate all-zero noise draw".into()));
    }
    let target = signal_power / 10f64.powf(snr_db / 10.0);
    let gain = (target / drawn).sqrt();
    Ok(signal.iter().zip(&noise).map(|(s, n)| s + gain * n).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn realized_snr(signal: &[f64], noisy: &[f64]) -> f64 {
        let noise: Vec<f64> = noisy.iter().zip(signal).map(|(a, b)| a - b).collect();
        10.0 * (power(signal) / power(&noise)).log10()
    }

    fn ratio(signal: &[f64], noisy: &[f64]) -> f64 {
        let noise: Vec<f64> = noisy.iter().zip(signal).map(|(a, b)| a - b).collect();
        power(signal) / power(&noise)
    }

    #[test]
    fn zero_db_means_equal_power() {
        let s: Vec<f64> = (0..500).map(|i| (i as f64 * 0.05).sin()).collect();
        let noisy = add_noise_at_snr(&s, 0.0, 3).unwrap();
        assert!((ratio(&s, &noisy) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn twenty_db_is_factor_hundred() {
        let s: Vec<f64> = (0..500).map(|i| (i as f64 * 0.05).cos() + 0.2).collect();
        let noisy = add_noise_at_snr(&s, 20.0, 4).unwrap();
        assert!((ratio(&s, &noisy) / 100.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn white_input_at_six_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noisy = add_noise_at_snr(&s, 6.0, 11).unwrap();
        assert!((ratio(&s, &noisy) - 10f64.powf(0.6)).abs() < 1e-9);
    }

    #[test]
    fn zero_signal_is_rejected() {
        assert!(matches!(add_noise_at_snr(&[0.0; 8], 3.0, 0), Err(Error::ZeroPowerSignal)));
    }

    #[test]
    fn infinite_snr_is_identity_and_seed_is_deterministic() {
        let s = vec![1.0, -2.0, 3.0];
        assert_eq!(add_noise_at_snr(&s, f64::INFINITY, 0).unwrap(), s);
        assert_eq!(add_noise_at_snr(&s, 5.0, 9).unwrap(), add_noise_at_snr(&s, 5.0, 9).unwrap());
        assert_ne!(add_noise_at_snr(&s, 5.0, 9).unwrap(), add_noise_at_snr(&s, 5.0, 10).unwrap());
    }

    proptest! {
        #[test]
        fn realized_snr_matches_request(
            signal in proptest::collection::vec(-10.0f64..10.0, 1..200),
            snr in -10.0f64..30.0,
            seed in any::<u64>(),
        ) {
            prop_assume!(power(&signal) > 1e-6);
            let noisy = add_noise_at_snr(&signal, snr, seed).unwrap();
            prop_assert!((realized_snr(&signal, &noisy) - snr).abs() < 1e-6);
        }
    }
}
