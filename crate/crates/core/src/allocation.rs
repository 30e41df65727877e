//! Risk-based raw weights (inverse historical VaR or Sharpe ratio) and their
//! normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::ReturnWindow;

/// Lower clip applied to non-positive VaR estimates.
pub const VAR_FLOOR: f64 = 0.001;
/// VaR assigned to series with insufficient or unusable history.
pub const VAR_PENALTY: f64 = 10.0;
/// Volatility below which a Sharpe ratio is treated as undefined.
pub const MIN_VOLATILITY: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocationError {
    #[error("return series is empty")]
    EmptySeries,
    #[error("tail fraction must lie in (0, 0.5], got {0}")]
    InvalidAlpha(f64),
    #[error("need at least 2 returns, got {0}")]
    TooShort(usize),
}

/// Rank of the empirical `alpha`-quantile, `⌈alpha·n⌉` (1-based).
///
/// `alpha·n` is snapped to the nearest integer when within 1e-9 of it, so
/// that e.g. `0.05 × 120` (6.000000000000001 in binary) counts as 6.
pub fn quantile_rank(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (k as usize).clamp(1, n.max(1))
}

/// The `⌈alpha·n⌉`-th smallest value, no interpolation.
pub fn empirical_quantile(returns: &[f64], alpha: f64) -> Result<f64, AllocationError> {
    if returns.is_empty() {
        return Err(AllocationError::EmptySeries);
    }
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(AllocationError::InvalidAlpha(alpha));
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_rank(alpha, sorted.len()) - 1])
}

/// Historical VaR `-q_alpha(R)`, clipped to `[VAR_FLOOR, VAR_PENALTY]`.
///
/// Series shorter than `min_len` or holding non-finite values get the
/// penalty value.
pub fn historical_var(returns: &[f64], alpha: f64, min_len: usize) -> Result<f64, AllocationError> {
    let q = empirical_quantile(returns, alpha)?;
    if returns.len() < min_len || returns.iter().any(|r| !r.is_finite()) {
        return Ok(VAR_PENALTY);
    }
    let raw = -q;
    Ok(if raw <= 0.0 {
        VAR_FLOOR
    } else {
        raw.clamp(VAR_FLOOR, VAR_PENALTY)
    })
}

/// `(mean - risk_free) / sd` with the `n - 1` sample deviation; zero when
/// the deviation is below [`MIN_VOLATILITY`].
pub fn sharpe_ratio(returns: &[f64], risk_free: f64) -> Result<f64, AllocationError> {
    let n = returns.len();
    if n < 2 {
        return Err(AllocationError::TooShort(n));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd.is_nan() || sd < MIN_VOLATILITY {
        return Ok(0.0);
    }
    Ok((mean - risk_free) / sd)
}

/// Per-stock risk summary over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub ticker: String,
    pub var_value: f64,
    pub sharpe_value: f64,
    pub window_length: usize,
}

pub fn risk_estimate(
    ticker: &str,
    window: &ReturnWindow<'_>,
    alpha: f64,
    min_len: usize,
    risk_free: f64,
) -> Result<RiskEstimate, AllocationError> {
    let (var_value, sharpe_value) = match window.series_of(ticker) {
        Some(s) => (
            historical_var(&s, alpha, min_len)?,
            sharpe_ratio(&s, risk_free).unwrap_or(0.0),
        ),
        None => (VAR_PENALTY, 0.0),
    };
    Ok(RiskEstimate {
        ticker: ticker.to_string(),
        var_value,
        sharpe_value,
        window_length: window.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub ticker: String,
    pub raw: f64,
    pub normalized: f64,
}

/// Ordered raw and normalized weights. Normalized weights sum to one, or
/// are all zero when every raw weight is zero (stay in cash).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightVector {
    pub entries: Vec<WeightEntry>,
}

impl WeightVector {
    /// Normalizes raw weights. Negative raw values are floored at zero.
    pub fn from_raw<I, S>(raw: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut entries: Vec<WeightEntry> = raw
            .into_iter()
            .map(|(t, w)| WeightEntry {
                ticker: t.into(),
                raw: if w > 0.0 { w } else { 0.0 },
                normalized: 0.0,
            })
            .collect();
        let total: f64 = entries.iter().map(|e| e.raw).sum();
        if total > 0.0 && total.is_finite() {
            for e in &mut entries {
                e.normalized = e.raw / total;
            }
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.entries.iter().all(|e| e.normalized == 0.0)
    }

    pub fn tickers(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.ticker.as_str())
    }

    pub fn normalized(&self, ticker: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.ticker == ticker).map(|e| e.normalized)
    }
}

/// Inverse-VaR weights for `stocks` over `window`. Masked or short series
/// receive the penalty VaR and therefore a near-zero weight.
pub fn var_weights(
    stocks: &[String],
    window: &ReturnWindow<'_>,
    alpha: f64,
    min_len: usize,
) -> Result<WeightVector, AllocationError> {
    let raw = stocks
        .iter()
        .map(|t| {
            let var = match window.series_of(t) {
                Some(s) => historical_var(&s, alpha, min_len)?,
                None => VAR_PENALTY,
            };
            Ok((t.clone(), 1.0 / var))
        })
        .collect::<Result<Vec<_>, AllocationError>>()?;
    Ok(WeightVector::from_raw(raw))
}

/// Long-only Sharpe weights: `max(sharpe, 0)` per stock, then normalized.
pub fn sharpe_weights(stocks: &[String], window: &ReturnWindow<'_>, risk_free: f64) -> WeightVector {
    WeightVector::from_raw(stocks.iter().map(|t| {
        let s = window
            .series_of(t)
            .and_then(|s| sharpe_ratio(&s, risk_free).ok())
            .unwrap_or(0.0);
        (t.clone(), s.max(0.0))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::ReturnMatrix;
    use chrono::NaiveDate;

    #[test]
    fn quantile_takes_order_statistic() {
        let mut r: Vec<f64> = (0..20).map(|i| 0.001 * i as f64 - 0.005).collect();
        r[7] = -0.08;
        assert_eq!(empirical_quantile(&r, 0.05).unwrap(), -0.08);
        assert!((historical_var(&r, 0.05, 20).unwrap() - 0.08).abs() < 1e-15);
        assert_eq!(quantile_rank(0.05, 120), 6);
        assert_eq!(quantile_rank(0.05, 121), 7);
        assert_eq!(quantile_rank(0.05, 10), 1);
    }

    #[test]
    fn clipping() {
        assert_eq!(historical_var(&[0.01; 120], 0.05, 120).unwrap(), VAR_FLOOR);
        assert_eq!(historical_var(&[-0.01; 10], 0.05, 120).unwrap(), VAR_PENALTY);
        assert_eq!(historical_var(&[f64::NAN, -0.5], 0.05, 1).unwrap(), VAR_PENALTY);
        assert_eq!(historical_var(&[], 0.05, 1), Err(AllocationError::EmptySeries));
        assert_eq!(
            historical_var(&[0.1], 0.6, 1),
            Err(AllocationError::InvalidAlpha(0.6))
        );
    }

    #[test]
    fn sharpe_arithmetic() {
        // Two-point series with mean 0.001 and sample sd 0.02.
        let a = 0.02 / 2f64.sqrt();
        let s = sharpe_ratio(&[0.001 + a, 0.001 - a], 0.0).unwrap();
        assert!((s - 0.05).abs() < 1e-12);
        let b = 0.01 / 2f64.sqrt();
        let s = sharpe_ratio(&[-0.002 + b, -0.002 - b], 0.0).unwrap();
        assert!((s + 0.2).abs() < 1e-12);
        assert_eq!(sharpe_ratio(&[0.003; 50], 0.0).unwrap(), 0.0);
        assert_eq!(sharpe_ratio(&[0.1], 0.0), Err(AllocationError::TooShort(1)));
    }

    #[test]
    fn normalization_cases() {
        let w = WeightVector::from_raw([("A", 50.0), ("B", 25.0)]);
        assert!((w.entries[0].normalized - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.entries[1].normalized - 1.0 / 3.0).abs() < 1e-15);

        let w = WeightVector::from_raw([("A", 0.05), ("B", 0.15)]);
        assert!((w.entries[0].normalized - 0.25).abs() < 1e-15);
        assert!((w.entries[1].normalized - 0.75).abs() < 1e-15);

        let w = WeightVector::from_raw([("A", 0.1), ("B", -0.3)]);
        assert_eq!((w.entries[0].normalized, w.entries[1].normalized), (1.0, 0.0));

        let w = WeightVector::from_raw([("A", -0.1), ("B", -0.3)]);
        assert!(w.is_all_zero());
    }

    #[test]
    fn penalized_stock_is_minimized() {
        let k = 5;
        let mut raw: Vec<(String, f64)> = (0..k - 1).map(|i| (format!("S{i}"), 1.0 / 0.02)).collect();
        raw.push(("P".into(), 1.0 / VAR_PENALTY));
        let w = WeightVector::from_raw(raw);
        let expect = 0.1 / (50.0 * (k - 1) as f64 + 0.1);
        assert!((w.normalized("P").unwrap() - expect).abs() < 1e-15);
    }

    fn window_matrix(cols: &[Vec<f64>]) -> ReturnMatrix {
        let t = cols[0].len();
        let dates = (0..t)
            .map(|i| NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(i as u64))
            .collect();
        let tickers = (0..cols.len()).map(|i| format!("S{i}")).collect();
        let rows = (0..t).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
        ReturnMatrix::from_rows(dates, tickers, rows).unwrap()
    }

    #[test]
    fn equal_var_gives_equal_weights() {
        let col: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 * 0.001 - 0.004).collect();
        let m = window_matrix(&vec![col; 5]);
        let w = m.window(39, 40).unwrap();
        let stocks: Vec<String> = m.tickers().to_vec();
        let vw = var_weights(&stocks, &w, 0.05, 40).unwrap();
        for e in &vw.entries {
            assert!((e.normalized - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_series_is_penalized() {
        let mut a: Vec<f64> = (0..40).map(|i| ((i * 3) % 7) as f64 * 0.002 - 0.006).collect();
        let b = a.clone();
        a[10] = f64::NAN;
        let m = window_matrix(&[a, b]);
        let w = m.window(39, 40).unwrap();
        let est = risk_estimate("S0", &w, 0.05, 40, 0.0).unwrap();
        assert_eq!(est.var_value, VAR_PENALTY);
        assert_eq!(est.sharpe_value, 0.0);
        let sw = sharpe_weights(m.tickers(), &w, 0.0);
        assert_eq!(sw.entries[0].raw, 0.0);
    }
}
