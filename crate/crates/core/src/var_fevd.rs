//! Pairwise VAR(1) estimation, forecast error variance decomposition and
//! the influence / cost matrices built from it.
//!
//! Every unordered ticker pair gets one bivariate VAR(1) fit. The FEVD of
//! that fit fills both directed cells of the influence matrix, so an
//! `N`-ticker window costs `N(N-1)/2` regressions.

use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::ReturnWindow;

pub type Mat2 = [[f64; 2]; 2];

const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarError {
    #[error("series of length {len} is shorter than the minimum window {min}")]
    TooShort { len: usize, min: usize },
    #[error("paired series differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("series contains masked or non-finite values")]
    NonFinite,
    #[error("regressor matrix is rank deficient")]
    DegenerateWindow,
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("need at least 2 tickers, got {0}")]
    TooFewTickers(usize),
    #[error("VAR estimation failed for every pair in the window")]
    AllPairsFailed,
}

/// Bivariate VAR(1) estimate `y_t = a0 + A1 y_{t-1} + u_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub intercept: [f64; 2],
    pub coef: Mat2,
    /// Residual covariance, divisor `n_obs - 3`.
    pub sigma_u: Mat2,
    pub n_obs: usize,
}

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Per-equation OLS of each series on a constant and one lag of both.
///
/// `yi` is variable 0 and `yj` variable 1 of the resulting model.
pub fn fit_var1(yi: &[f64], yj: &[f64], min_len: usize) -> Result<VarModel, VarError> {
    if yi.len() != yj.len() {
        return Err(VarError::LengthMismatch(yi.len(), yj.len()));
    }
    let w = yi.len();
    let min = min_len.max(5);
    if w < min {
        return Err(VarError::TooShort { len: w, min });
    }
    if yi.iter().chain(yj).any(|v| !v.is_finite()) {
        return Err(VarError::NonFinite);
    }
    let n = w - 1;
    let nf = n as f64;

    // Regressors x = (yi[t-1], yj[t-1]), targets z = (yi[t], yj[t]), t = 1..w.
    let (mut mx, mut mz) = ([0.0; 2], [0.0; 2]);
    for t in 1..w {
        mx[0] += yi[t - 1];
        mx[1] += yj[t - 1];
        mz[0] += yi[t];
        mz[1] += yj[t];
    }
    for k in 0..2 {
        mx[k] /= nf;
        mz[k] /= nf;
    }
    let (mut sxx, mut sxz) = ([[0.0; 2]; 2], [[0.0; 2]; 2]);
    for t in 1..w {
        let dx = [yi[t - 1] - mx[0], yj[t - 1] - mx[1]];
        let dz = [yi[t] - mz[0], yj[t] - mz[1]];
        for a in 0..2 {
            for b in 0..2 {
                sxx[a][b] += dx[a] * dx[b];
                // sxz[eq][regressor]
                sxz[a][b] += dz[a] * dx[b];
            }
        }
    }
    let det = sxx[0][0] * sxx[1][1] - sxx[0][1] * sxx[1][0];
    if sxx[0][0] <= 0.0 || sxx[1][1] <= 0.0 || det <= 1e-10 * sxx[0][0] * sxx[1][1] {
        return Err(VarError::DegenerateWindow);
    }

    let mut coef = [[0.0; 2]; 2];
    let mut intercept = [0.0; 2];
    for eq in 0..2 {
        let (q0, q1) = (sxz[eq][0], sxz[eq][1]);
        coef[eq][0] = (sxx[1][1] * q0 - sxx[0][1] * q1) / det;
        coef[eq][1] = (sxx[0][0] * q1 - sxx[1][0] * q0) / det;
        intercept[eq] = mz[eq] - coef[eq][0] * mx[0] - coef[eq][1] * mx[1];
    }

    let mut sigma_u = [[0.0; 2]; 2];
    for t in 1..w {
        let x = [yi[t - 1], yj[t - 1]];
        let z = [yi[t], yj[t]];
        let u = [
            z[0] - intercept[0] - coef[0][0] * x[0] - coef[0][1] * x[1],
            z[1] - intercept[1] - coef[1][0] * x[0] - coef[1][1] * x[1],
        ];
        sigma_u[0][0] += u[0] * u[0];
        sigma_u[0][1] += u[0] * u[1];
        sigma_u[1][1] += u[1] * u[1];
    }
    let dof = (n - 3) as f64;
    sigma_u[0][0] /= dof;
    sigma_u[0][1] /= dof;
    sigma_u[1][1] /= dof;
    sigma_u[1][0] = sigma_u[0][1];

    Ok(VarModel {
        intercept,
        coef,
        sigma_u,
        n_obs: n,
    })
}

/// `Φ_0 .. Φ_{h-1}` with `Φ_s = A1^s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponses {
    pub horizon: usize,
    pub phis: Vec<Mat2>,
}

pub fn impulse_responses(model: &VarModel, h: usize) -> Result<ImpulseResponses, VarError> {
    if h == 0 {
        return Err(VarError::InvalidHorizon);
    }
    let mut phis = Vec::with_capacity(h);
    phis.push(IDENTITY);
    for s in 1..h {
        let next = mat_mul(&model.coef, &phis[s - 1]);
        phis.push(next);
    }
    Ok(ImpulseResponses { horizon: h, phis })
}

/// How the FEVD numerator treats residual correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FevdMode {
    /// Numerator `(e_j' Φ_s P e_i)^2` with `P` the lower Cholesky factor of
    /// `Σ_u`; shares per responding variable sum to one.
    #[default]
    Orthogonalized,
    /// Numerator `(e_j' Φ_s e_i)^2` with no covariance factor; shares are
    /// clamped to `[0, 1]` and need not sum to one.
    AsWritten,
}

/// FEVD shares of a bivariate model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FevdShares {
    /// `shares[r][c]`: fraction of variable `r`'s forecast error variance
    /// attributed to shocks in variable `c`.
    pub shares: Mat2,
    /// Set when orthogonalized mode was requested but `Σ_u` was not
    /// positive definite and the as-written form was used instead.
    pub fell_back: bool,
}

fn cholesky(s: &Mat2) -> Option<Mat2> {
    if s[0][0].is_nan() || s[0][0] <= 0.0 {
        return None;
    }
    let l00 = s[0][0].sqrt();
    let l10 = s[1][0] / l00;
    let rem = s[1][1] - l10 * l10;
    if rem.is_nan() || rem <= 0.0 {
        return None;
    }
    Some([[l00, 0.0], [l10, rem.sqrt()]])
}

pub fn fevd(model: &VarModel, h: usize, mode: FevdMode) -> Result<FevdShares, VarError> {
    let irf = impulse_responses(model, h)?;
    if mode == FevdMode::Orthogonalized {
        if let Some(p) = cholesky(&model.sigma_u) {
            let mut num = [[0.0; 2]; 2];
            for phi in &irf.phis {
                let theta = mat_mul(phi, &p);
                for r in 0..2 {
                    for c in 0..2 {
                        num[r][c] += theta[r][c] * theta[r][c];
                    }
                }
            }
            let mut shares = [[0.0; 2]; 2];
            for r in 0..2 {
                // Σ_c (Φ P)_{rc}^2 = (Φ Σ Φ')_{rr} since P P' = Σ.
                let den = num[r][0] + num[r][1];
                for c in 0..2 {
                    shares[r][c] = if den > 0.0 {
                        (num[r][c] / den).clamp(0.0, 1.0)
                    } else if r == c {
                        1.0
                    } else {
                        0.0
                    };
                }
            }
            return Ok(FevdShares {
                shares,
                fell_back: false,
            });
        }
    }

    let s = &model.sigma_u;
    let mut num = [[0.0; 2]; 2];
    let mut den = [0.0; 2];
    for phi in &irf.phis {
        for r in 0..2 {
            for c in 0..2 {
                num[r][c] += phi[r][c] * phi[r][c];
            }
            let row = phi[r];
            den[r] += row[0] * (s[0][0] * row[0] + s[0][1] * row[1])
                + row[1] * (s[1][0] * row[0] + s[1][1] * row[1]);
        }
    }
    let mut shares = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let v = num[r][c] / den[r];
            shares[r][c] = if den[r] > 0.0 && !v.is_nan() {
                v.clamp(0.0, 1.0)
            } else if r == c {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(FevdShares {
        shares,
        fell_back: mode == FevdMode::Orthogonalized,
    })
}

/// Estimation knobs for one network window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FevdSettings {
    pub horizon: usize,
    pub mode: FevdMode,
    pub min_window: usize,
}

impl Default for FevdSettings {
    fn default() -> Self {
        Self {
            horizon: 10,
            mode: FevdMode::Orthogonalized,
            min_window: 30,
        }
    }
}

/// Directed influence shares; `get(j, i)` is `θ_{j←i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    tickers: Vec<String>,
    theta: Vec<f64>,
    /// Pairs whose VAR could not be estimated (influence 0 both ways).
    pub failed_pairs: usize,
    /// Pairs that fell back from orthogonalized to as-written FEVD.
    pub fallback_pairs: usize,
}

impl InfluenceMatrix {
    /// Wraps a row-major `N × N` matrix of `θ_{row←col}` values.
    pub fn from_rows(tickers: Vec<String>, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), tickers.len() * tickers.len(), "theta must be N x N");
        Self {
            tickers,
            theta,
            failed_pairs: 0,
            fallback_pairs: 0,
        }
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn len(&self) -> usize {
        self.tickers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tickers.is_empty()
    }

    /// `θ_{responder←source}`.
    pub fn get(&self, responder: usize, source: usize) -> f64 {
        self.theta[responder * self.tickers.len() + source]
    }
}

/// All unordered index pairs, each oriented so the lexicographically smaller
/// ticker comes first.
fn ordered_pairs(tickers: &[String]) -> Vec<(usize, usize)> {
    let n = tickers.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            if tickers[a] <= tickers[b] {
                pairs.push((a, b));
            } else {
                pairs.push((b, a));
            }
        }
    }
    pairs
}

/// Fits every ticker pair of the window and assembles `θ_{j←i}(h)`.
///
/// Pairs that cannot be estimated (masked cells, constant series, collinear
/// regressors) contribute zero influence in both directions.
pub fn influence_matrix(window: &ReturnWindow<'_>, settings: &FevdSettings) -> Result<InfluenceMatrix, VarError> {
    let tickers = window.tickers();
    let n = tickers.len();
    if n < 2 {
        return Err(VarError::TooFewTickers(n));
    }
    if settings.horizon == 0 {
        return Err(VarError::InvalidHorizon);
    }
    let series: Vec<Option<Vec<f64>>> = (0..n).map(|i| window.series(i)).collect();
    let pairs = ordered_pairs(tickers);

    let fits: Vec<Option<FevdShares>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (ya, yb) = (series[a].as_ref()?, series[b].as_ref()?);
            let model = fit_var1(ya, yb, settings.min_window).ok()?;
            fevd(&model, settings.horizon, settings.mode).ok()
        })
        .collect();

    let mut theta = vec![0.0; n * n];
    let (mut failed, mut fallback) = (0, 0);
    for (&(a, b), fit) in pairs.iter().zip(&fits) {
        match fit {
            Some(f) => {
                // variable 0 = a, variable 1 = b
                theta[b * n + a] = f.shares[1][0];
                theta[a * n + b] = f.shares[0][1];
                fallback += usize::from(f.fell_back);
            }
            None => failed += 1,
        }
    }
    if failed == pairs.len() {
        return Err(VarError::AllPairsFailed);
    }
    Ok(InfluenceMatrix {
        tickers: tickers.to_vec(),
        theta,
        failed_pairs: failed,
        fallback_pairs: fallback,
    })
}

/// Directed and symmetrized edge costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    tickers: Vec<String>,
    directed: Vec<f64>,
    symmetric: Vec<f64>,
}

impl CostMatrix {
    /// Builds a matrix directly from a symmetric cost panel (the directed
    /// part is set equal to it). Diagonal entries are forced to `+∞`.
    pub fn from_symmetric(tickers: Vec<String>, mut symmetric: Vec<f64>) -> Self {
        let n = tickers.len();
        assert_eq!(symmetric.len(), n * n, "cost matrix must be N x N");
        for i in 0..n {
            symmetric[i * n + i] = f64::INFINITY;
        }
        Self {
            tickers,
            directed: symmetric.clone(),
            symmetric,
        }
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn len(&self) -> usize {
        self.tickers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tickers.is_empty()
    }

    /// `C_{from→to}`.
    pub fn directed(&self, from: usize, to: usize) -> f64 {
        self.directed[from * self.tickers.len() + to]
    }

    pub fn symmetric(&self, i: usize, j: usize) -> f64 {
        self.symmetric[i * self.tickers.len() + j]
    }

    /// Writes the upper triangle of the symmetric costs as
    /// `window_end,ticker_i,ticker_j,cost` rows (header included).
    pub fn write_csv<W: Write>(&self, window_end: NaiveDate, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["window_end", "ticker_i", "ticker_j", "cost"])?;
        let end = window_end.format("%Y-%m-%d").to_string();
        let n = self.tickers.len();
        for i in 0..n {
            for j in i + 1..n {
                let cost = format!("{}", self.symmetric(i, j));
                w.write_record([end.as_str(), &self.tickers[i], &self.tickers[j], &cost])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `C_{i→j} = 1 - θ_{j←i}`, symmetrized by taking the smaller direction.
pub fn to_cost(theta: &InfluenceMatrix) -> CostMatrix {
    let n = theta.len();
    let mut directed = vec![f64::INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                directed[i * n + j] = 1.0 - theta.get(j, i);
            }
        }
    }
    let mut symmetric = vec![f64::INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                symmetric[i * n + j] = directed[i * n + j].min(directed[j * n + i]);
            }
        }
    }
    CostMatrix {
        tickers: theta.tickers().to_vec(),
        directed,
        symmetric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::ReturnMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.02..0.02)).collect()
    }

    fn model(coef: Mat2, sigma_u: Mat2) -> VarModel {
        VarModel {
            intercept: [0.0, 0.0],
            coef,
            sigma_u,
            n_obs: 100,
        }
    }

    #[test]
    fn exact_lagged_relation_is_recovered() {
        let yj = noise(200, 7);
        let mut yi = vec![0.0; 200];
        for t in 1..200 {
            yi[t] = 0.5 * yj[t - 1];
        }
        let m = fit_var1(&yi, &yj, 30).unwrap();
        assert!(m.coef[0][0].abs() < 1e-10);
        assert!((m.coef[0][1] - 0.5).abs() < 1e-10);
        assert!(m.intercept[0].abs() < 1e-10);
        assert!(m.sigma_u[0][0].abs() < 1e-10);
        assert_eq!(m.n_obs, 199);
        assert_eq!(m.sigma_u[0][1], m.sigma_u[1][0]);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let c = vec![0.0; 60];
        assert_eq!(fit_var1(&c, &c, 30), Err(VarError::DegenerateWindow));
        let other = noise(60, 1);
        assert_eq!(fit_var1(&c, &other, 30), Err(VarError::DegenerateWindow));
    }

    #[test]
    fn short_and_masked_inputs() {
        let a = noise(20, 1);
        assert!(matches!(fit_var1(&a, &a, 30), Err(VarError::TooShort { .. })));
        let mut b = noise(40, 2);
        b[3] = f64::NAN;
        assert_eq!(fit_var1(&noise(40, 3), &b, 30), Err(VarError::NonFinite));
    }

    #[test]
    fn impulse_response_powers() {
        let m = model([[0.5, 0.0], [0.0, 0.5]], IDENTITY);
        let irf = impulse_responses(&m, 3).unwrap();
        assert_eq!(irf.phis[0], IDENTITY);
        assert_eq!(irf.phis[2], [[0.25, 0.0], [0.0, 0.25]]);

        let m = model([[0.3, 0.2], [0.1, 0.4]], IDENTITY);
        let phi2 = impulse_responses(&m, 3).unwrap().phis[2];
        let expect = [[0.11, 0.14], [0.07, 0.18]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((phi2[r][c] - expect[r][c]).abs() < 1e-15);
            }
        }
        assert_eq!(impulse_responses(&m, 0), Err(VarError::InvalidHorizon));
    }

    #[test]
    fn no_dynamics_no_spillover() {
        let m = model([[0.0; 2]; 2], [[0.04, 0.0], [0.0, 0.01]]);
        for mode in [FevdMode::Orthogonalized, FevdMode::AsWritten] {
            for h in [1, 5, 10] {
                let f = fevd(&m, h, mode).unwrap();
                assert_eq!(f.shares, IDENTITY);
            }
        }
    }

    #[test]
    fn explicit_two_horizon_sum() {
        let a = [[0.3, 0.2], [0.1, 0.4]];
        let m = model(a, [[0.01, 0.0], [0.0, 0.01]]);
        let f = fevd(&m, 2, FevdMode::Orthogonalized).unwrap();
        // P = 0.1 I; sum s = 0 (identity) and s = 1 (A) by hand.
        let num = |r: usize, c: usize| {
            let s0 = if r == c { 0.1f64 } else { 0.0 };
            let s1 = a[r][c] * 0.1;
            s0 * s0 + s1 * s1
        };
        for r in 0..2 {
            let den = num(r, 0) + num(r, 1);
            for c in 0..2 {
                assert!((f.shares[r][c] - num(r, c) / den).abs() < 1e-14);
            }
        }
        assert!(!f.fell_back);
    }

    #[test]
    fn singular_covariance_falls_back() {
        let m = model([[0.2, 0.1], [0.0, 0.3]], [[0.0, 0.0], [0.0, 0.01]]);
        let f = fevd(&m, 10, FevdMode::Orthogonalized).unwrap();
        assert!(f.fell_back);
        for r in 0..2 {
            for c in 0..2 {
                assert!((0.0..=1.0).contains(&f.shares[r][c]));
            }
        }
    }

    #[test]
    fn cost_rules() {
        let theta = InfluenceMatrix::from_rows(
            vec!["A".into(), "B".into()],
            // θ_{A←B} = 0.6, θ_{B←A} = 0.25
            vec![0.0, 0.6, 0.25, 0.0],
        );
        let c = to_cost(&theta);
        assert_eq!(c.directed(0, 1), 0.75);
        assert!((c.directed(1, 0) - 0.4).abs() < 1e-15);
        assert_eq!(c.symmetric(0, 1), c.symmetric(1, 0));
        assert!((c.symmetric(0, 1) - 0.4).abs() < 1e-15);
        assert_eq!(c.symmetric(0, 0), f64::INFINITY);

        let ends = InfluenceMatrix::from_rows(vec!["A".into(), "B".into()], vec![0.0, 1.0, 0.0, 0.0]);
        let c = to_cost(&ends);
        assert_eq!(c.directed(1, 0), 0.0);
        assert_eq!(c.directed(0, 1), 1.0);
    }

    fn matrix(cols: Vec<Vec<f64>>) -> ReturnMatrix {
        let t = cols[0].len();
        let n = cols.len();
        let dates = (0..t)
            .map(|i| NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(i as u64))
            .collect();
        let tickers = (0..n).map(|i| format!("T{i}")).collect();
        let mut rows = Vec::with_capacity(t * n);
        for r in 0..t {
            for c in &cols {
                rows.push(c[r]);
            }
        }
        ReturnMatrix::from_rows(dates, tickers, rows).unwrap()
    }

    #[test]
    fn two_tickers_one_fit() {
        let m = matrix(vec![noise(60, 1), noise(60, 2)]);
        let w = m.window(59, 60).unwrap();
        let inf = influence_matrix(&w, &FevdSettings::default()).unwrap();
        assert_eq!(inf.failed_pairs, 0);
        assert!(inf.get(0, 1) > 0.0 && inf.get(1, 0) > 0.0);
        assert_eq!(inf.get(0, 0), 0.0);
    }

    #[test]
    fn degenerate_column_is_isolated() {
        let healthy = matrix(vec![noise(80, 1), noise(80, 2), noise(80, 3)]);
        let with_flat = matrix(vec![noise(80, 1), noise(80, 2), vec![0.0; 80], noise(80, 3)]);
        let s = FevdSettings::default();
        let a = influence_matrix(&healthy.window(79, 80).unwrap(), &s).unwrap();
        let b = influence_matrix(&with_flat.window(79, 80).unwrap(), &s).unwrap();
        assert_eq!(b.failed_pairs, 3);
        for k in 0..4 {
            assert_eq!(b.get(2, k), 0.0);
            assert_eq!(b.get(k, 2), 0.0);
        }
        let map = [0, 1, 3];
        for (x, &bx) in map.iter().enumerate() {
            for (y, &by) in map.iter().enumerate() {
                assert_eq!(a.get(x, y), b.get(bx, by));
            }
        }
    }

    #[test]
    fn all_pairs_failing_is_an_error() {
        let m = matrix(vec![vec![0.0; 50], vec![0.0; 50]]);
        let w = m.window(49, 50).unwrap();
        assert_eq!(
            influence_matrix(&w, &FevdSettings::default()),
            Err(VarError::AllPairsFailed)
        );
    }

    #[test]
    fn cost_csv_layout() {
        let theta = InfluenceMatrix::from_rows(vec!["A".into(), "B".into()], vec![0.0, 0.5, 0.25, 0.0]);
        let mut buf = Vec::new();
        to_cost(&theta)
            .write_csv(NaiveDate::from_ymd_opt(2024, 3, 1).unwrap(), &mut buf)
            .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "window_end,ticker_i,ticker_j,cost\n2024-03-01,A,B,0.5\n"
        );
    }
}
