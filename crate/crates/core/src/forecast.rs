//! One-step-ahead return forecasts (ARIMA and NNAR) and their conversion
//! into trading signals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Forecasts with magnitude below this map to a zero signal.
pub const SIGNAL_DEAD_ZONE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("series of length {len} is too short (need {min})")]
    TooShort { len: usize, min: usize },
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("expected {expected} lagged values, got {got}")]
    WrongLagCount { expected: usize, got: usize },
    #[error("training diverged for seeds {0} and {1}")]
    Diverged(u64, u64),
    #[error("cannot derive a signal from a non-finite forecast")]
    NonFiniteForecast,
}

pub type Result<T> = std::result::Result<T, ForecastError>;

/// Forecasting model applied to each candidate stock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Forecaster {
    None,
    Arima,
    Nnar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub ticker: String,
    pub r_hat: f64,
    pub signal: i8,
}

impl Forecast {
    pub fn new(ticker: impl Into<String>, r_hat: f64) -> Result<Self> {
        Ok(Self {
            ticker: ticker.into(),
            r_hat,
            signal: to_signal(r_hat)?,
        })
    }
}

/// Strict sign with a `1e-12` dead zone around zero.
pub fn to_signal(r_hat: f64) -> Result<i8> {
    if !r_hat.is_finite() {
        return Err(ForecastError::NonFiniteForecast);
    }
    Ok(if r_hat.abs() < SIGNAL_DEAD_ZONE {
        0
    } else if r_hat > 0.0 {
        1
    } else {
        -1
    })
}

/// Mixes a global seed with a ticker and window index so every forecasting
/// task owns an independent, schedule-free RNG stream.
pub fn derive_seed(seed: u64, ticker: &str, window_index: usize) -> u64 {
    // FNV-1a over the ticker bytes, then splitmix64 finalisation.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in ticker.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed
        .wrapping_add(h.rotate_left(17))
        .wrapping_add((window_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Least squares
// ---------------------------------------------------------------------------

/// Householder QR least squares on a column-major design. `None` when a
/// column is (numerically) a combination of earlier ones.
fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let m = y.len();
    let k = columns.len();
    if m < k || k == 0 {
        return None;
    }
    let norms: Vec<f64> = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut b = y.to_vec();
    for j in 0..k {
        let alpha = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norms[j] == 0.0 || alpha <= 1e-10 * norms[j] {
            return None;
        }
        let alpha = if a[j][j] > 0.0 { -alpha } else { alpha };
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for col in a.iter_mut().skip(j) {
            let dot: f64 = v.iter().zip(&col[j..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            for (x, vi) in col[j..].iter_mut().zip(&v) {
                *x -= f * vi;
            }
        }
        let dot: f64 = v.iter().zip(&b[j..]).map(|(p, q)| p * q).sum();
        let f = 2.0 * dot / vnorm2;
        for (x, vi) in b[j..].iter_mut().zip(&v) {
            *x -= f * vi;
        }
    }
    let mut beta = vec![0.0; k];
    for j in (0..k).rev() {
        let mut s = b[j];
        for l in j + 1..k {
            s -= a[l][j] * beta[l];
        }
        beta[j] = s / a[j][j];
    }
    beta.iter().all(|v| v.is_finite()).then_some(beta)
}

// ---------------------------------------------------------------------------
// ARIMA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArimaSettings {
    pub max_p: usize,
    pub max_d: usize,
    pub max_q: usize,
    pub min_len: usize,
}

impl Default for ArimaSettings {
    fn default() -> Self {
        Self {
            max_p: 2,
            max_d: 1,
            max_q: 2,
            min_len: 30,
        }
    }
}

impl ArimaSettings {
    /// First level-series index scored by AIC. Shared by every candidate so
    /// all scores cover the same target dates.
    pub fn burn_in(&self) -> usize {
        self.max_p + self.max_d + 2 * self.max_q + 1
    }

    pub fn grid(&self) -> impl Iterator<Item = ArimaOrder> + '_ {
        (0..=self.max_p).flat_map(move |p| {
            (0..=self.max_d).flat_map(move |d| (0..=self.max_q).map(move |q| ArimaOrder::new(p, d, q)))
        })
    }
}

/// `Φ(B) ∇^d Y_t = c + Θ(B) ε_t` fitted by conditional least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub intercept: f64,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    /// Recursive residuals on the differenced series.
    pub residuals: Vec<f64>,
    pub aic: f64,
    /// Set when every grid candidate failed and the sample-mean model was
    /// substituted.
    pub fallback: bool,
}

fn difference(y: &[f64], d: usize) -> Vec<f64> {
    let mut x = y.to_vec();
    for _ in 0..d {
        x = x.windows(2).map(|w| w[1] - w[0]).collect();
    }
    x
}

/// `ε_t = x_t - c - Σ φ_l x_{t-l} - Σ θ_l ε_{t-l}` for `t >= p`; earlier
/// residuals are zero.
fn recursive_residuals(x: &[f64], intercept: f64, phi: &[f64], theta: &[f64]) -> Vec<f64> {
    let p = phi.len();
    let mut eps = vec![0.0; x.len()];
    for t in p..x.len() {
        let mut pred = intercept;
        for (l, f) in phi.iter().enumerate() {
            pred += f * x[t - l - 1];
        }
        for (l, th) in theta.iter().enumerate() {
            if t > l {
                pred += th * eps[t - l - 1];
            }
        }
        eps[t] = x[t] - pred;
    }
    eps
}

fn lag_column(x: &[f64], start: usize, lag: usize) -> Vec<f64> {
    x[start - lag..x.len() - lag].to_vec()
}

/// Conditional least squares for one order: AR terms by regression, MA
/// terms by regressing on residuals of a long autoregression.
fn estimate(x: &[f64], order: ArimaOrder) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let ArimaOrder { p, q, .. } = order;
    let n = x.len();
    let (innov, start) = if q == 0 {
        (Vec::new(), p)
    } else {
        let long = (n / 4).clamp(p + q + 1, 8);
        if n <= long + q + p + q + 2 {
            return None;
        }
        let mut cols = vec![vec![1.0; n - long]];
        cols.extend((1..=long).map(|l| lag_column(x, long, l)));
        let beta = least_squares(&cols, &x[long..])?;
        let mut e = vec![0.0; n];
        for t in long..n {
            let mut pred = beta[0];
            for l in 1..=long {
                pred += beta[l] * x[t - l];
            }
            e[t] = x[t] - pred;
        }
        (e, long + q)
    };
    let start = start.max(p);
    if n <= start + p + q + 1 {
        return None;
    }
    let mut cols = vec![vec![1.0; n - start]];
    cols.extend((1..=p).map(|l| lag_column(x, start, l)));
    cols.extend((1..=q).map(|l| lag_column(&innov, start, l)));
    let beta = least_squares(&cols, &x[start..])?;
    Some((beta[0], beta[1..=p].to_vec(), beta[p + 1..].to_vec()))
}

/// Fits a single order, scoring AIC on level indices `burn_in..n`.
pub fn arima_fit_order(series: &[f64], order: ArimaOrder, burn_in: usize) -> Option<ArimaModel> {
    if series.iter().any(|v| !v.is_finite()) || burn_in < order.d || burn_in >= series.len() {
        return None;
    }
    let x = difference(series, order.d);
    let (intercept, phi, theta) = estimate(&x, order)?;
    let residuals = recursive_residuals(&x, intercept, &phi, &theta);
    let scored = &residuals[burn_in - order.d..];
    let m = scored.len() as f64;
    let sse: f64 = scored.iter().map(|e| e * e).sum();
    if !sse.is_finite() {
        return None;
    }
    let aic = m * (sse / m).ln() + 2.0 * (order.p + order.q + 1) as f64;
    if aic.is_nan() {
        return None;
    }
    Some(ArimaModel {
        order,
        intercept,
        phi,
        theta,
        residuals,
        aic,
        fallback: false,
    })
}

/// Grid search over `p <= max_p, d <= max_d, q <= max_q`, keeping the lowest
/// AIC; ties go to the smaller `p + d + q`.
pub fn arima_fit(series: &[f64], settings: &ArimaSettings) -> Result<ArimaModel> {
    let min = settings.min_len.max(settings.burn_in() + 2);
    if series.len() < min {
        return Err(ForecastError::TooShort {
            len: series.len(),
            min,
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(ForecastError::NonFinite);
    }
    let burn_in = settings.burn_in();
    let best = settings
        .grid()
        .filter_map(|order| arima_fit_order(series, order, burn_in))
        .min_by(|a, b| {
            a.aic
                .total_cmp(&b.aic)
                .then_with(|| {
                    let s = |o: ArimaOrder| o.p + o.d + o.q;
                    s(a.order).cmp(&s(b.order))
                })
                .then_with(|| (a.order.p, a.order.d, a.order.q).cmp(&(b.order.p, b.order.d, b.order.q)))
        });
    Ok(best.unwrap_or_else(|| {
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        ArimaModel {
            order: ArimaOrder::new(0, 0, 0),
            intercept: mean,
            phi: Vec::new(),
            theta: Vec::new(),
            residuals: series.iter().map(|v| v - mean).collect(),
            aic: f64::NAN,
            fallback: true,
        }
    }))
}

/// One-step conditional expectation given the observed level series. For
/// `d = 1` the differenced forecast is added back to the last level.
pub fn arima_forecast(model: &ArimaModel, series: &[f64]) -> f64 {
    let x = difference(series, model.order.d);
    let eps = recursive_residuals(&x, model.intercept, &model.phi, &model.theta);
    let n = x.len();
    let mut next = model.intercept;
    for (l, f) in model.phi.iter().enumerate() {
        if n > l {
            next += f * x[n - l - 1];
        }
    }
    for (l, th) in model.theta.iter().enumerate() {
        if n > l {
            next += th * eps[n - l - 1];
        }
    }
    let mut level = next;
    if model.order.d == 1 {
        level += series.last().copied().unwrap_or(0.0);
    }
    level
}

// ---------------------------------------------------------------------------
// NNAR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnarSettings {
    /// Lagged inputs.
    pub p: usize,
    /// Hidden sigmoid units.
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop when the loss improved by less than `tolerance` over this many
    /// epochs.
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for NnarSettings {
    fn default() -> Self {
        Self {
            p: 5,
            k: 3,
            learning_rate: 0.01,
            epochs: 500,
            patience: 25,
            tolerance: 1e-9,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Network parameters: `out = Σ_j v_j σ(Σ_i w_ji x_i + b_j) + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnarParams {
    pub p: usize,
    pub k: usize,
    /// Row-major `k × p`; `w[j * p + i]` links input `i` to hidden unit `j`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
    pub c: f64,
}

impl NnarParams {
    pub fn zeros(p: usize, k: usize) -> Self {
        Self {
            p,
            k,
            w: vec![0.0; p * k],
            b: vec![0.0; k],
            v: vec![0.0; k],
            c: 0.0,
        }
    }

    /// Uniform(-0.5, 0.5) draws in the order `w`, `b`, `v`, `c`.
    pub fn random(p: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.5..0.5)).collect() };
        let w = draw(p * k);
        let b = draw(k);
        let v = draw(k);
        let c = draw(1)[0];
        Self { p, k, w, b, v, c }
    }

    /// Flattened as `w, b, v, c`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(&self.w);
        out.extend(&self.b);
        out.extend(&self.v);
        out.push(self.c);
        out
    }

    pub fn from_vec(p: usize, k: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), p * k + 2 * k + 1, "parameter vector length");
        let (w, rest) = flat.split_at(p * k);
        let (b, rest) = rest.split_at(k);
        let (v, c) = rest.split_at(k);
        Self {
            p,
            k,
            w: w.to_vec(),
            b: b.to_vec(),
            v: v.to_vec(),
            c: c[0],
        }
    }

    pub fn len(&self) -> usize {
        self.p * self.k + 2 * self.k + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn all_finite(&self) -> bool {
        self.w.iter().chain(&self.b).chain(&self.v).all(|x| x.is_finite()) && self.c.is_finite()
    }

    /// Network output for one input vector (standardized units).
    pub fn output(&self, x: &[f64]) -> f64 {
        let mut out = self.c;
        for j in 0..self.k {
            let row = &self.w[j * self.p..(j + 1) * self.p];
            let pre: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b[j];
            out += self.v[j] * sigmoid(pre);
        }
        out
    }

    /// Mean squared error over a training set.
    pub fn mse(&self, data: &TrainingSet) -> f64 {
        let n = data.len();
        (0..n)
            .map(|r| {
                let e = self.output(data.input(r)) - data.targets[r];
                e * e
            })
            .sum::<f64>()
            / n as f64
    }

    /// MSE and its gradient by backpropagation.
    #[allow(clippy::needless_range_loop)]
    pub fn mse_gradient(&self, data: &TrainingSet) -> (f64, NnarParams) {
        let (p, k) = (self.p, self.k);
        let n = data.len();
        let scale = 2.0 / n as f64;
        let mut grad = NnarParams::zeros(p, k);
        let mut loss = 0.0;
        let mut hidden = vec![0.0; k];
        for r in 0..n {
            let x = data.input(r);
            let mut out = self.c;
            for j in 0..k {
                let row = &self.w[j * p..(j + 1) * p];
                let pre: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b[j];
                hidden[j] = sigmoid(pre);
                out += self.v[j] * hidden[j];
            }
            let e = out - data.targets[r];
            loss += e * e;
            let d_out = scale * e;
            grad.c += d_out;
            for j in 0..k {
                grad.v[j] += d_out * hidden[j];
                let d_pre = d_out * self.v[j] * hidden[j] * (1.0 - hidden[j]);
                grad.b[j] += d_pre;
                for (g, xi) in grad.w[j * p..(j + 1) * p].iter_mut().zip(x) {
                    *g += d_pre * xi;
                }
            }
        }
        (loss / n as f64, grad)
    }

    fn step(&mut self, grad: &NnarParams, lr: f64) {
        for (a, g) in self.w.iter_mut().zip(&grad.w) {
            *a -= lr * g;
        }
        for (a, g) in self.b.iter_mut().zip(&grad.b) {
            *a -= lr * g;
        }
        for (a, g) in self.v.iter_mut().zip(&grad.v) {
            *a -= lr * g;
        }
        self.c -= lr * grad.c;
    }
}

/// Lagged input rows and next-value targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub p: usize,
    /// Row-major `N × p`; column `i` holds lag `i + 1`.
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TrainingSet {
    /// Builds `(z_{t-1}, .., z_{t-p}) -> z_t` pairs for every `t >= p`.
    pub fn from_series(z: &[f64], p: usize) -> Self {
        let mut inputs = Vec::with_capacity(z.len().saturating_sub(p) * p);
        let mut targets = Vec::with_capacity(z.len().saturating_sub(p));
        for t in p..z.len() {
            inputs.extend((1..=p).map(|l| z[t - l]));
            targets.push(z[t]);
        }
        Self { p, inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, row: usize) -> &[f64] {
        &self.inputs[row * self.p..(row + 1) * self.p]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnarModel {
    pub params: NnarParams,
    pub mean: f64,
    pub scale: f64,
    /// Seed that produced the accepted initialization.
    pub seed: u64,
    pub final_mse: f64,
    /// Loss before each accepted update, plus the final loss.
    pub loss_history: Vec<f64>,
}

impl NnarModel {
    /// Wraps hand-set parameters with an explicit standardization.
    pub fn from_params(params: NnarParams, mean: f64, scale: f64) -> Self {
        Self {
            params,
            mean,
            scale,
            seed: 0,
            final_mse: f64::NAN,
            loss_history: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.params.p
    }
}

fn train(data: &TrainingSet, settings: &NnarSettings, seed: u64) -> Option<(NnarParams, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NnarParams::random(settings.p, settings.k, &mut rng);
    let mut history = Vec::with_capacity(settings.epochs + 1);
    for epoch in 0..settings.epochs {
        let (loss, grad) = params.mse_gradient(data);
        if !loss.is_finite() {
            return None;
        }
        history.push(loss);
        if epoch >= settings.patience && history[epoch - settings.patience] - loss < settings.tolerance {
            break;
        }
        params.step(&grad, settings.learning_rate);
    }
    let last = params.mse(data);
    if !last.is_finite() || !params.all_finite() {
        return None;
    }
    if history.last() != Some(&last) {
        history.push(last);
    }
    Some((params, history))
}

/// Trains an NNAR(p, k) on the standardized series by full-batch gradient
/// descent. A diverged run is retried once with `seed + 1`.
pub fn nnar_fit(series: &[f64], settings: &NnarSettings, seed: u64) -> Result<NnarModel> {
    let min = settings.p + 20;
    if series.len() < min {
        return Err(ForecastError::TooShort {
            len: series.len(),
            min,
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(ForecastError::NonFinite);
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let scale = if sd > 1e-12 { sd } else { 1.0 };
    let z: Vec<f64> = series.iter().map(|v| (v - mean) / scale).collect();
    let data = TrainingSet::from_series(&z, settings.p);

    let retry = seed.wrapping_add(1);
    let (params, history, used) = match train(&data, settings, seed) {
        Some((p, h)) => (p, h, seed),
        None => {
            let (p, h) = train(&data, settings, retry).ok_or(ForecastError::Diverged(seed, retry))?;
            (p, h, retry)
        }
    };
    Ok(NnarModel {
        final_mse: *history.last().expect("at least one loss recorded"),
        params,
        mean,
        scale,
        seed: used,
        loss_history: history,
    })
}

/// Evaluates the network on the last `p` observations, given oldest first,
/// and returns the forecast in the units of the training series.
pub fn nnar_forecast(model: &NnarModel, last_p_values: &[f64]) -> Result<f64> {
    let p = model.p();
    if last_p_values.len() != p {
        return Err(ForecastError::WrongLagCount {
            expected: p,
            got: last_p_values.len(),
        });
    }
    let x: Vec<f64> = (1..=p).map(|l| (last_p_values[p - l] - model.mean) / model.scale).collect();
    Ok(model.mean + model.scale * model.params.output(&x))
}

/// Fits the chosen model on `series` and returns its one-step forecast.
/// [`Forecaster::None`] always forecasts zero.
pub fn forecast_next(
    forecaster: Forecaster,
    series: &[f64],
    arima: &ArimaSettings,
    nnar: &NnarSettings,
    seed: u64,
) -> Result<f64> {
    match forecaster {
        Forecaster::None => Ok(0.0),
        Forecaster::Arima => {
            let model = arima_fit(series, arima)?;
            Ok(arima_forecast(&model, series))
        }
        Forecaster::Nnar => {
            let model = nnar_fit(series, nnar, seed)?;
            nnar_forecast(&model, &series[series.len() - nnar.p..])
        }
    }
}
