//! Per-series feature and label formulas.

use crate::error::{Error, Result};

/// Rolling z-scores with the sample standard deviation of the trailing
/// window `[t - window + 1, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RollingZ {
    /// `None` until a full window is available.
    pub values: Vec<Option<f64>>,
    /// Windows whose standard deviation was zero (value forced to 0).
    pub degenerate: Vec<bool>,
}

pub fn rolling_zscore(x: &[f64], window: usize) -> RollingZ {
    let n = x.len();
    let mut values = vec![None; n];
    let mut degenerate = vec![false; n];
    if window == 0 {
        return RollingZ { values, degenerate };
    }
    for t in window.saturating_sub(1)..n {
        let w = &x[t + 1 - window..=t];
        let m = w.iter().sum::<f64>() / window as f64;
        let var = if window > 1 {
            w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (window - 1) as f64
        } else {
            0.0
        };
        let sd = var.sqrt();
        // Flat windows (up to rounding) carry no scale information.
        if sd <= 1e-12 * m.abs().max(1.0) {
            values[t] = Some(0.0);
            degenerate[t] = true;
        } else {
            values[t] = Some((x[t] - m) / sd);
        }
    }
    RollingZ { values, degenerate }
}

/// `mean(close[t-k+1..=t]) / close[t] − 1`.
pub fn ma_ratio(close: &[f64], k: usize) -> Result<Vec<Option<f64>>> {
    if let Some(i) = close.iter().position(|&c| c <= 0.0 || c.is_nan()) {
        return Err(Error::data(format!(
            "non-positive close {} at index {i}",
            close[i]
        )));
    }
    if k == 0 {
        return Err(Error::config("moving-average length must be positive"));
    }
    let mut out = vec![None; close.len()];
    for t in k - 1..close.len() {
        let ma = close[t + 1 - k..=t].iter().sum::<f64>() / k as f64;
        out[t] = Some(ma / close[t] - 1.0);
    }
    Ok(out)
}

/// `(close[t+q-1] − close[t]) / close[t]`; `None` where the horizon runs
/// past the series.
pub fn make_label(close: &[f64], q: usize) -> Result<Vec<Option<f64>>> {
    if q == 0 {
        return Err(Error::config("label horizon must be at least 1"));
    }
    Ok((0..close.len())
        .map(|t| close.get(t + q - 1).map(|&fwd| (fwd - close[t]) / close[t]))
        .collect())
}

/// Simple return from `t` to `t + 1`.
pub fn next_day_returns(close: &[f64]) -> Vec<Option<f64>> {
    (0..close.len())
        .map(|t| close.get(t + 1).map(|&n| n / close[t] - 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_constant_is_flagged_zero() {
        let z = rolling_zscore(&[5.0; 30], 20);
        assert!(z.values[..19].iter().all(Option::is_none));
        assert!(z.values[19..].iter().all(|v| *v == Some(0.0)));
        assert!(z.degenerate[19..].iter().all(|&d| d));
    }

    #[test]
    fn zscore_closed_form_for_one_to_twenty() {
        let x: Vec<f64> = (1..=20).map(f64::from).collect();
        let z = rolling_zscore(&x, 20);
        // mean 10.5, sample variance n(n+1)/12 = 35
        let want = (20.0 - 10.5) / 35f64.sqrt();
        assert!((z.values[19].unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn zscore_location_invariant() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 123.0).collect();
        let (a, b) = (rolling_zscore(&x, 20), rolling_zscore(&y, 20));
        for (p, q) in a.values.iter().zip(&b.values) {
            match (p, q) {
                (Some(p), Some(q)) => assert!((p - q).abs() < 1e-9),
                (None, None) => {}
                _ => panic!("validity differs"),
            }
        }
    }

    #[test]
    fn ma_ratio_examples() {
        assert!(ma_ratio(&[3.0; 25], 5).unwrap()[4..]
            .iter()
            .all(|v| *v == Some(0.0)));
        let r = ma_ratio(&[1.0, 2.0, 3.0, 4.0, 100.0], 5).unwrap();
        assert!((r[4].unwrap() + 0.78).abs() < 1e-12);
        let c = [1.0, 4.0, 2.0];
        assert!(ma_ratio(&c, 1).unwrap().iter().all(|v| *v == Some(0.0)));
        assert!(ma_ratio(&[1.0, 0.0], 1).is_err());
    }

    #[test]
    fn label_examples() {
        let mut close = vec![100.0; 8];
        close[4] = 110.0;
        let y = make_label(&close, 5).unwrap();
        assert!((y[0].unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(y[4..].iter().filter(|v| v.is_none()).count(), 4);
        assert!(make_label(&[1.0; 6], 5)
            .unwrap()
            .iter()
            .flatten()
            .all(|&v| v == 0.0));
        assert!(make_label(&[1.0, 2.0, 3.0], 1)
            .unwrap()
            .iter()
            .all(|v| *v == Some(0.0)));
    }
}
