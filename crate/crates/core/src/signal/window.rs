use crate::error::{Error, Result};

/// Cuts `signal` into windows of `window_len` samples starting every `hop`
/// samples. The tail that does not fill a whole window is dropped.
pub fn slide_windows(signal: &[f64], window_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if window_len == 0 || hop == 0 {
        return Err(Error::InvalidArgument(format!(
            "window_len {window_len} and hop {hop} must be positive"
        )));
    }
    if window_len > signal.len() {
        return Err(Error::WindowTooLong {
            window_len,
            signal_len: signal.len(),
        });
    }
    let count = (signal.len() - window_len) / hop + 1;
    Ok((0..count)
        .map(|i| signal[i * hop..i * hop + window_len].to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn default_geometry_yields_five_windows() {
        let signal = vec![0.0; 1200];
        assert_eq!(slide_windows(&signal, 400, 200).unwrap().len(), 5);
    }

    #[test]
    fn exact_fit_is_the_signal_itself() {
        let signal: Vec<f64> = (0..400).map(f64::from).collect();
        let windows = slide_windows(&signal, 400, 200).unwrap();
        assert_eq!(windows, vec![signal]);
    }

    #[test]
    fn small_example_start_offsets() {
        let signal: Vec<f64> = (0..10).map(f64::from).collect();
        let windows = slide_windows(&signal, 4, 2).unwrap();
        let starts: Vec<f64> = windows.iter().map(|w| w[0]).collect();
        assert_eq!(starts, vec![0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn window_longer_than_signal_is_rejected() {
        let err = slide_windows(&[0.0; 3], 4, 1).unwrap_err();
        assert!(matches!(err, Error::WindowTooLong { window_len: 4, signal_len: 3 }));
        assert!(slide_windows(&[0.0; 3], 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn count_matches_naive_enumeration(len in 1usize..300, window in 1usize..300, hop in 1usize..50) {
            prop_assume!(window <= len);
            let signal: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let windows = slide_windows(&signal, window, hop).unwrap();
            let naive: Vec<usize> = (0..len).step_by(hop).filter(|s| s + window <= len).collect();
            prop_assert_eq!(windows.len(), naive.len());
            for (w, s) in windows.iter().zip(&naive) {
                prop_assert_eq!(w.len(), window);
                prop_assert_eq!(w[0], *s as f64);
            }
        }
    }
}
