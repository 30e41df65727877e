//! Python bindings for `netfolio-core`.
//!
//! Markets load from CSV or from plain lists, simulations return one
//! `SimulationResult` per (seed, strategy) and the lower-level estimators are
//! exposed as functions on lists of floats.

use std::path::PathBuf;

use chrono::NaiveDate;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use netfolio_core::allocation;
use netfolio_core::backtest::{self, Strategy, StrategyConfig, WeightingRule};
use netfolio_core::forecast::{self, ArimaSettings, NnarSettings};
use netfolio_core::market_data::{load_prices, PriceFormat, PriceTable};
use netfolio_core::network::{export_dot, select_top_k};
use netfolio_core::var_fevd::{self, FevdMode, FevdSettings};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn fevd_mode(s: &str) -> PyResult<FevdMode> {
    match s {
        "orthogonalized" => Ok(FevdMode::Orthogonalized),
        "as_written" => Ok(FevdMode::AsWritten),
        other => Err(value_err(format!("unknown fevd mode {other:?}"))),
    }
}

fn price_format(s: &str) -> PyResult<PriceFormat> {
    match s {
        "long" => Ok(PriceFormat::Long),
        "wide" => Ok(PriceFormat::Wide),
        other => Err(value_err(format!("unknown price format {other:?}"))),
    }
}

fn flatten(rows: Vec<Vec<f64>>, width: usize, what: &str) -> PyResult<Vec<f64>> {
    if let Some(r) = rows.iter().position(|r| r.len() != width) {
        return Err(value_err(format!("{what} row {r} has {} cells, expected {width}", rows[r].len())));
    }
    Ok(rows.into_iter().flatten().collect())
}

/// Universe prices and returns, with an optional benchmark column split off.
#[pyclass(name = "Market", module = "netfolio", frozen)]
struct PyMarket {
    inner: backtest::Market,
}

#[pymethods]
impl PyMarket {
    /// Reads a long (`date,ticker,open,adj_close`) or wide price CSV.
    #[staticmethod]
    #[pyo3(signature = (path, format = "long", benchmark = None, max_missing_frac = None))]
    fn load(path: PathBuf, format: &str, benchmark: Option<&str>, max_missing_frac: Option<f64>) -> PyResult<Self> {
        let table = load_prices(&path, price_format(format)?).map_err(value_err)?;
        let inner = backtest::Market::filtered(table, benchmark, max_missing_frac).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Builds a market from row-major closes (one row per date). Missing
    /// prices may be given as NaN.
    #[staticmethod]
    #[pyo3(signature = (dates, tickers, closes, opens = None, benchmark = None))]
    fn from_prices(
        dates: Vec<String>,
        tickers: Vec<String>,
        closes: Vec<Vec<f64>>,
        opens: Option<Vec<Vec<f64>>>,
        benchmark: Option<&str>,
    ) -> PyResult<Self> {
        let dates = dates
            .iter()
            .map(|d| d.parse::<NaiveDate>().map_err(|_| value_err(format!("bad date {d:?}"))))
            .collect::<PyResult<Vec<_>>>()?;
        let n = tickers.len();
        let close = flatten(closes, n, "closes")?;
        let open = opens.map(|o| flatten(o, n, "opens")).transpose()?;
        let table = PriceTable::new(dates, tickers, close, open).map_err(value_err)?;
        let inner = backtest::Market::new(table, benchmark).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn tickers(&self) -> Vec<String> {
        self.inner.prices().tickers().to_vec()
    }

    #[getter]
    fn dates(&self) -> Vec<String> {
        self.inner.prices().dates().iter().map(|d| d.to_string()).collect()
    }

    #[getter]
    fn benchmark(&self) -> Option<String> {
        self.inner.benchmark().map(|(t, _)| t.to_string())
    }

    /// Simple returns, one row per date after the first; masked cells are None.
    fn returns(&self) -> Vec<Vec<Option<f64>>> {
        let r = self.inner.returns();
        (0..r.n_rows())
            .map(|row| (0..r.n_tickers()).map(|i| r.get(row, i)).collect())
            .collect()
    }

    /// Influence network over the `window` return rows ending at `end_row`.
    #[pyo3(signature = (end_row, window = 120, horizon = 10, k = 5, mode = "orthogonalized"))]
    fn network(&self, end_row: usize, window: usize, horizon: usize, k: usize, mode: &str) -> PyResult<PyNetwork> {
        let settings = FevdSettings {
            horizon,
            mode: fevd_mode(mode)?,
            ..Default::default()
        };
        let w = self.inner.returns().window(end_row, window).map_err(value_err)?;
        let snap = backtest::network_snapshot(&w, &settings).map_err(value_err)?;
        let n = snap.influence.len();
        Ok(PyNetwork {
            window_end: snap.window_end.to_string(),
            tickers: snap.influence.tickers().to_vec(),
            influence: (0..n).map(|i| (0..n).map(|j| snap.influence.get(i, j)).collect()).collect(),
            edges: snap
                .tree
                .edges
                .iter()
                .map(|e| (e.source.clone(), e.target.clone(), e.cost))
                .collect(),
            total_cost: snap.tree.total_cost,
            ranking: snap.ranking.ranking.clone(),
            selection: select_top_k(&snap.ranking, k),
            dot: export_dot(&snap.tree, None),
        })
    }

    fn __repr__(&self) -> String {
        let p = self.inner.prices();
        format!("Market({} tickers, {} dates)", p.n_tickers(), p.n_dates())
    }
}

/// Influence matrix, spanning tree and centrality of one window.
#[pyclass(name = "Network", module = "netfolio", frozen, get_all)]
struct PyNetwork {
    window_end: String,
    tickers: Vec<String>,
    /// `influence[i][j]`: share of ticker i's forecast error variance due to j.
    influence: Vec<Vec<f64>>,
    edges: Vec<(String, String, f64)>,
    total_cost: f64,
    ranking: Vec<(String, usize)>,
    selection: Vec<String>,
    dot: String,
}

/// Strategy parameters shared by all strategies of a run.
#[pyclass(name = "Config", module = "netfolio", from_py_object, get_all, set_all)]
#[derive(Clone)]
struct PyConfig {
    window: usize,
    horizon: usize,
    k: usize,
    alpha: f64,
    initial_capital: f64,
    benchmark: Option<String>,
    risk_free: f64,
    rebalance_every: usize,
    fevd_mode: String,
    fixed_weighting: String,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (
        window = 120, horizon = 10, k = 5, alpha = 0.05, initial_capital = 100_000.0,
        benchmark = None, risk_free = 0.0, rebalance_every = 1,
        fevd_mode = "orthogonalized".to_string(), fixed_weighting = "var".to_string()
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        window: usize,
        horizon: usize,
        k: usize,
        alpha: f64,
        initial_capital: f64,
        benchmark: Option<String>,
        risk_free: f64,
        rebalance_every: usize,
        fevd_mode: String,
        fixed_weighting: String,
    ) -> PyResult<Self> {
        let c = Self {
            window,
            horizon,
            k,
            alpha,
            initial_capital,
            benchmark,
            risk_free,
            rebalance_every,
            fevd_mode,
            fixed_weighting,
        };
        c.to_core()?.validate().map_err(value_err)?;
        Ok(c)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(window={}, horizon={}, k={}, alpha={}, rebalance_every={})",
            self.window, self.horizon, self.k, self.alpha, self.rebalance_every
        )
    }
}

impl PyConfig {
    fn to_core(&self) -> PyResult<StrategyConfig> {
        let fixed_weighting = match self.fixed_weighting.as_str() {
            "var" => WeightingRule::Var,
            "sharpe" => WeightingRule::Sharpe,
            other => return Err(value_err(format!("unknown weighting {other:?}"))),
        };
        Ok(StrategyConfig {
            window: self.window,
            horizon: self.horizon,
            k: self.k,
            alpha: self.alpha,
            initial_capital: self.initial_capital,
            benchmark: self.benchmark.clone(),
            risk_free: self.risk_free,
            rebalance_every: self.rebalance_every,
            fevd_mode: fevd_mode(&self.fevd_mode)?,
            fixed_weighting,
            ..Default::default()
        })
    }
}

#[pyclass(name = "SimulationResult", module = "netfolio", frozen, get_all)]
struct PySimulationResult {
    strategy: String,
    seed: u64,
    dates: Vec<String>,
    values: Vec<f64>,
    signals: Vec<i8>,
    total_return_pct: f64,
    trade_count: usize,
}

#[pymethods]
impl PySimulationResult {
    fn __repr__(&self) -> String {
        format!(
            "SimulationResult({}, seed={}, total_return_pct={:.4})",
            self.strategy, self.seed, self.total_return_pct
        )
    }
}

/// Runs `strategies` (all eleven by default) for each seed. Results come
/// back seed-major.
#[pyfunction]
#[pyo3(signature = (market, config = None, strategies = None, seeds = vec![132]))]
fn simulate(
    py: Python<'_>,
    market: &PyMarket,
    config: Option<PyConfig>,
    strategies: Option<Vec<String>>,
    seeds: Vec<u64>,
) -> PyResult<Vec<PySimulationResult>> {
    let mut cfg = match config {
        Some(c) => c.to_core()?,
        None => StrategyConfig::default(),
    };
    if cfg.benchmark.is_none() {
        cfg.benchmark = market.inner.benchmark().map(|(t, _)| t.to_string());
    }
    let strategies: Vec<Strategy> = match strategies {
        Some(list) => list
            .iter()
            .map(|s| Strategy::from_slug(s).map_err(value_err))
            .collect::<PyResult<_>>()?,
        None => Strategy::ALL
            .into_iter()
            .filter(|s| *s != Strategy::BuyHold || market.inner.benchmark().is_some())
            .collect(),
    };
    let inner = &market.inner;
    let run = py
        .detach(|| backtest::run_multi_seed(&cfg, inner, &strategies, &seeds))
        .map_err(value_err)?;
    Ok(run
        .results
        .into_iter()
        .map(|r| PySimulationResult {
            strategy: r.strategy.slug().to_string(),
            seed: r.seed,
            dates: r.records.iter().map(|d| d.date.to_string()).collect(),
            values: r.values(),
            signals: r.records.iter().map(|d| d.signal).collect(),
            total_return_pct: r.total_return_pct,
            trade_count: r.trade_count,
        })
        .collect())
}

/// Names accepted by `simulate(strategies=...)`.
#[pyfunction]
fn strategy_names() -> Vec<&'static str> {
    Strategy::ALL.iter().map(|s| s.slug()).collect()
}

/// Pairwise VAR(1) fit: `(intercept, coef, sigma_u)`.
#[pyfunction]
#[pyo3(signature = (x, y, min_len = 30))]
#[allow(clippy::type_complexity)]
fn fit_var1(x: Vec<f64>, y: Vec<f64>, min_len: usize) -> PyResult<([f64; 2], [[f64; 2]; 2], [[f64; 2]; 2])> {
    let m = var_fevd::fit_var1(&x, &y, min_len).map_err(value_err)?;
    Ok((m.intercept, m.coef, m.sigma_u))
}

/// FEVD shares of a fitted pair, `shares[responder][source]`.
#[pyfunction]
#[pyo3(signature = (x, y, horizon = 10, mode = "orthogonalized"))]
fn fevd(x: Vec<f64>, y: Vec<f64>, horizon: usize, mode: &str) -> PyResult<[[f64; 2]; 2]> {
    let m = var_fevd::fit_var1(&x, &y, 30).map_err(value_err)?;
    Ok(var_fevd::fevd(&m, horizon, fevd_mode(mode)?).map_err(value_err)?.shares)
}

#[pyfunction]
#[pyo3(signature = (returns, alpha = 0.05, min_len = 30))]
fn historical_var(returns: Vec<f64>, alpha: f64, min_len: usize) -> PyResult<f64> {
    allocation::historical_var(&returns, alpha, min_len).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (returns, risk_free = 0.0))]
fn sharpe_ratio(returns: Vec<f64>, risk_free: f64) -> PyResult<f64> {
    allocation::sharpe_ratio(&returns, risk_free).map_err(value_err)
}

/// AIC-selected ARIMA one-step forecast: `((p, d, q), forecast)`.
#[pyfunction]
fn arima_forecast(series: Vec<f64>) -> PyResult<((usize, usize, usize), f64)> {
    let m = forecast::arima_fit(&series, &ArimaSettings::default()).map_err(value_err)?;
    let f = forecast::arima_forecast(&m, &series);
    Ok(((m.order.p, m.order.d, m.order.q), f))
}

/// NNAR(p, k) one-step forecast trained with the given seed.
#[pyfunction]
#[pyo3(signature = (series, seed, p = 5, k = 3))]
fn nnar_forecast(series: Vec<f64>, seed: u64, p: usize, k: usize) -> PyResult<f64> {
    let settings = NnarSettings {
        p,
        k,
        ..Default::default()
    };
    let m = forecast::nnar_fit(&series, &settings, seed).map_err(value_err)?;
    forecast::nnar_forecast(&m, &series[series.len() - p..]).map_err(value_err)
}

#[pymodule]
fn netfolio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMarket>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySimulationResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(strategy_names, m)?)?;
    m.add_function(wrap_pyfunction!(fit_var1, m)?)?;
    m.add_function(wrap_pyfunction!(fevd, m)?)?;
    m.add_function(wrap_pyfunction!(historical_var, m)?)?;
    m.add_function(wrap_pyfunction!(sharpe_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(arima_forecast, m)?)?;
    m.add_function(wrap_pyfunction!(nnar_forecast, m)?)?;
    Ok(())
}
