//! Daily rolling-window simulation of the strategy family, the all-agree
//! signal, whole-share execution and multi-seed summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{sharpe_weights, var_weights, AllocationError, WeightEntry, WeightVector};
use crate::forecast::{
    arima_fit, arima_forecast, derive_seed, nnar_fit, nnar_forecast, to_signal, ArimaSettings, Forecast, Forecaster,
    NnarSettings,
};
use crate::market_data::{compute_returns, quality_filter, MarketDataError, PriceTable, ReturnMatrix, ReturnWindow};
use crate::network::{degree_centrality, prim_mst, select_top_k, CentralityRanking, MstTree, NetworkError};
use crate::var_fevd::{influence_matrix, to_cost, CostMatrix, FevdMode, FevdSettings, InfluenceMatrix, VarError};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least {need} price dates, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("universe is empty")]
    EmptyUniverse,
    #[error("benchmark ticker {0} is not configured or not in the price table")]
    NoBenchmark(String),
    #[error("forecasts do not line up with weights ({0})")]
    Misaligned(String),
    #[error("signal must be -1, 0 or 1, got {0}")]
    InvalidSignal(i8),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("seed list is empty")]
    NoSeeds,
    #[error(transparent)]
    Market(#[from] MarketDataError),
    #[error(transparent)]
    Var(#[from] VarError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
}

pub type Result<T> = std::result::Result<T, BacktestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingRule {
    Var,
    Sharpe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    PerStockFilter,
    AllAgree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioMode {
    Dynamic,
    Fixed,
    DynamicVarOnly,
}

/// The eleven strategy variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    BuyHold,
    MstVar,
    MstSharpe,
    MstArimaVar,
    MstArimaSharpe,
    MstNnarVar,
    MstNnarSharpe,
    MstAllAgreeVar,
    MstAllAgreeSharpe,
    Fixed,
    DynamicVar,
}

impl Strategy {
    pub const ALL: [Strategy; 11] = [
        Strategy::BuyHold,
        Strategy::MstVar,
        Strategy::MstSharpe,
        Strategy::MstArimaVar,
        Strategy::MstArimaSharpe,
        Strategy::MstNnarVar,
        Strategy::MstNnarSharpe,
        Strategy::MstAllAgreeVar,
        Strategy::MstAllAgreeSharpe,
        Strategy::Fixed,
        Strategy::DynamicVar,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Strategy::BuyHold => "buy_hold",
            Strategy::MstVar => "mst_var",
            Strategy::MstSharpe => "mst_sharpe",
            Strategy::MstArimaVar => "mst_arima_var",
            Strategy::MstArimaSharpe => "mst_arima_sharpe",
            Strategy::MstNnarVar => "mst_nnar_var",
            Strategy::MstNnarSharpe => "mst_nnar_sharpe",
            Strategy::MstAllAgreeVar => "mst_allagree_var",
            Strategy::MstAllAgreeSharpe => "mst_allagree_sharpe",
            Strategy::Fixed => "fixed",
            Strategy::DynamicVar => "dynamic_var",
        }
    }

    pub fn from_slug(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.slug() == s)
            .ok_or_else(|| BacktestError::UnknownStrategy(s.to_string()))
    }

    pub fn weighting(self, config: &StrategyConfig) -> WeightingRule {
        match self {
            Strategy::MstSharpe | Strategy::MstArimaSharpe | Strategy::MstNnarSharpe | Strategy::MstAllAgreeSharpe => {
                WeightingRule::Sharpe
            }
            Strategy::Fixed => config.fixed_weighting,
            _ => WeightingRule::Var,
        }
    }

    pub fn forecaster(self) -> Forecaster {
        match self {
            Strategy::MstArimaVar | Strategy::MstArimaSharpe => Forecaster::Arima,
            Strategy::MstNnarVar | Strategy::MstNnarSharpe | Strategy::MstAllAgreeVar | Strategy::MstAllAgreeSharpe => {
                Forecaster::Nnar
            }
            _ => Forecaster::None,
        }
    }

    pub fn signal_mode(self) -> SignalMode {
        match self {
            Strategy::MstAllAgreeVar | Strategy::MstAllAgreeSharpe => SignalMode::AllAgree,
            _ => SignalMode::PerStockFilter,
        }
    }

    pub fn portfolio_mode(self) -> PortfolioMode {
        match self {
            Strategy::Fixed => PortfolioMode::Fixed,
            Strategy::DynamicVar => PortfolioMode::DynamicVarOnly,
            _ => PortfolioMode::Dynamic,
        }
    }

    /// Whether results depend on the seed.
    pub fn is_stochastic(self) -> bool {
        self.forecaster() == Forecaster::Nnar
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

/// Parameters shared by every strategy of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub window: usize,
    pub horizon: usize,
    pub k: usize,
    pub alpha: f64,
    pub initial_capital: f64,
    pub seeds: Vec<u64>,
    pub benchmark: Option<String>,
    pub risk_free: f64,
    pub fevd_mode: FevdMode,
    pub min_var_window: usize,
    pub rebalance_every: usize,
    pub fixed_weighting: WeightingRule,
    /// Reserved; only zero is accepted.
    pub fee_bps: f64,
    pub arima: ArimaSettings,
    pub nnar: NnarSettings,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            window: 120,
            horizon: 10,
            k: 5,
            alpha: 0.05,
            initial_capital: 100_000.0,
            seeds: vec![132],
            benchmark: None,
            risk_free: 0.0,
            fevd_mode: FevdMode::default(),
            min_var_window: 30,
            rebalance_every: 1,
            fixed_weighting: WeightingRule::Var,
            fee_bps: 0.0,
            arima: ArimaSettings::default(),
            nnar: NnarSettings::default(),
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(BacktestError::Config(m.to_string()));
        if self.window < 30 {
            return fail("window must be at least 30");
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return fail("alpha must lie in (0, 0.5]");
        }
        if !(self.initial_capital > 0.0 && self.initial_capital.is_finite()) {
            return fail("initial_capital must be positive");
        }
        if self.rebalance_every == 0 {
            return fail("rebalance_every must be at least 1");
        }
        if self.fee_bps != 0.0 {
            return fail("fee_bps is reserved and must be 0");
        }
        if !self.risk_free.is_finite() {
            return fail("risk_free must be finite");
        }
        if self.nnar.p == 0 || self.nnar.k == 0 || self.nnar.p + 20 > self.window {
            return fail("nnar needs p >= 1, k >= 1 and p + 20 <= window");
        }
        if self.arima.min_len > self.window {
            return fail("arima min_len exceeds window");
        }
        Ok(())
    }

    pub fn fevd_settings(&self) -> FevdSettings {
        FevdSettings {
            horizon: self.horizon,
            mode: self.fevd_mode,
            min_window: self.min_var_window,
        }
    }
}

// ---------------------------------------------------------------------------
// Signals, filtering and execution
// ---------------------------------------------------------------------------

/// Zeroes raw weights whose forecast is not strictly positive, then
/// renormalizes. Forecasts must be in the same ticker order.
pub fn filter_weights(weights: &WeightVector, forecasts: &[Forecast]) -> Result<WeightVector> {
    if weights.len() != forecasts.len() {
        return Err(BacktestError::Misaligned(format!(
            "{} weights, {} forecasts",
            weights.len(),
            forecasts.len()
        )));
    }
    let mut raw = Vec::with_capacity(weights.len());
    for (e, f) in weights.entries.iter().zip(forecasts) {
        if e.ticker != f.ticker {
            return Err(BacktestError::Misaligned(format!("{} vs {}", e.ticker, f.ticker)));
        }
        raw.push((e.ticker.clone(), if f.r_hat > 0.0 { e.raw } else { 0.0 }));
    }
    Ok(WeightVector::from_raw(raw))
}

/// Sign of the summed stock signals; a zero sum means hold.
pub fn aggregate_signal(signals: &[i8]) -> i8 {
    let sum: i64 = signals.iter().map(|&s| i64::from(s)).sum();
    sum.signum() as i8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub cash: f64,
    /// Whole share counts; tickers with zero shares are absent.
    pub holdings: BTreeMap<String, u64>,
    /// Last price each holding was valued at.
    pub marks: BTreeMap<String, f64>,
    pub value: f64,
    pub date_index: usize,
}

impl PortfolioState {
    pub fn new(capital: f64, date_index: usize) -> Self {
        Self {
            cash: capital,
            holdings: BTreeMap::new(),
            marks: BTreeMap::new(),
            value: capital,
            date_index,
        }
    }
}

/// Result of one execution step.
#[derive(Debug, Clone, PartialEq)]
pub struct DayOutcome {
    pub state: PortfolioState,
    pub traded: bool,
    /// A held or targeted ticker had no price and its last mark was used
    /// (or the target was skipped).
    pub stale: bool,
}

fn price_or_mark(state: &PortfolioState, prices: &BTreeMap<String, f64>, ticker: &str) -> (f64, bool) {
    match prices.get(ticker) {
        Some(&p) => (p, false),
        None => (state.marks.get(ticker).copied().unwrap_or(0.0), true),
    }
}

/// Applies the day's signal. `1` rebalances into `weights` with
/// `⌊w_i·C/p_i⌋` shares at `exec` prices, `-1` liquidates, `0` holds. The
/// resulting state is valued at `close` prices. Sums run in ticker order.
pub fn execute_day(
    state: &PortfolioState,
    signal: i8,
    weights: &WeightVector,
    exec: &BTreeMap<String, f64>,
    close: &BTreeMap<String, f64>,
) -> Result<DayOutcome> {
    let mut next = state.clone();
    let mut stale = false;
    let mut traded = false;
    match signal {
        0 => {}
        1 | -1 => {
            let mut wealth = state.cash;
            for (t, &s) in &state.holdings {
                let (p, missing) = price_or_mark(state, exec, t);
                stale |= missing;
                wealth += s as f64 * p;
            }
            let mut target: BTreeMap<String, u64> = BTreeMap::new();
            if signal == 1 {
                let mut sorted: Vec<&WeightEntry> = weights.entries.iter().filter(|e| e.normalized > 0.0).collect();
                sorted.sort_by(|a, b| a.ticker.cmp(&b.ticker));
                for e in sorted {
                    match exec.get(&e.ticker) {
                        Some(&p) if p > 0.0 => {
                            let shares = (e.normalized * wealth / p).floor();
                            if shares >= 1.0 {
                                target.insert(e.ticker.clone(), shares as u64);
                            }
                        }
                        _ => stale = true,
                    }
                }
                // Rounding in the weights can overshoot by a share.
                while cost_of(&target, exec) > wealth {
                    let last = target.keys().next_back().cloned().expect("non-empty when cost is positive");
                    let s = target.get_mut(&last).expect("present");
                    *s -= 1;
                    if *s == 0 {
                        target.remove(&last);
                    }
                }
            }
            if target != state.holdings {
                next.cash = wealth - cost_of(&target, exec);
                next.holdings = target;
                next.marks.retain(|t, _| next.holdings.contains_key(t));
                traded = true;
            }
        }
        other => return Err(BacktestError::InvalidSignal(other)),
    }
    let mut value = next.cash;
    let held: Vec<(String, u64)> = next.holdings.iter().map(|(t, &s)| (t.clone(), s)).collect();
    for (t, s) in held {
        let (p, missing) = match close.get(&t) {
            Some(&p) => (p, false),
            None => match exec.get(&t) {
                Some(&p) => (p, true),
                None => price_or_mark(&next, close, &t),
            },
        };
        stale |= missing;
        next.marks.insert(t, p);
        value += s as f64 * p;
    }
    next.value = value;
    next.date_index = state.date_index + 1;
    Ok(DayOutcome {
        state: next,
        traded,
        stale,
    })
}

fn cost_of(target: &BTreeMap<String, u64>, exec: &BTreeMap<String, f64>) -> f64 {
    let mut cost = 0.0;
    for (t, &s) in target {
        cost += s as f64 * exec[t];
    }
    cost
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyRecord {
    pub date: NaiveDate,
    pub value: f64,
    pub cash: f64,
    pub holdings: BTreeMap<String, u64>,
    pub selection: Vec<String>,
    /// Normalized target weights of the day, in selection order.
    pub weights: Vec<(String, f64)>,
    pub signal: i8,
    pub traded: bool,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<DailyRecord>,
    pub total_return_pct: f64,
    pub trade_count: usize,
}

impl SimulationResult {
    fn from_records(strategy: Strategy, seed: u64, records: Vec<DailyRecord>, initial: f64) -> Self {
        let last = records.last().map_or(initial, |r| r.value);
        let trade_count = records.iter().filter(|r| r.traded).count();
        Self {
            strategy,
            seed,
            records,
            total_return_pct: (last / initial - 1.0) * 100.0,
            trade_count,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.records.iter().map(|r| r.date).collect()
    }

    pub fn final_value(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.value)
    }

    /// `date,portfolio_value` CSV.
    pub fn values_csv(&self) -> String {
        let mut out = String::from("date,portfolio_value\n");
        for r in &self.records {
            writeln!(out, "{},{}", r.date, r.value).expect("writing to a String cannot fail");
        }
        out
    }
}

/// `C_t = C_0 · P_t / P_0` over the given dates. Masked prices carry the
/// previous value forward.
pub fn benchmark_buy_hold(dates: &[NaiveDate], prices: &[Option<f64>], initial: f64) -> Result<SimulationResult> {
    if dates.len() < 2 || dates.len() != prices.len() {
        return Err(BacktestError::InsufficientHistory {
            need: 2,
            have: dates.len().min(prices.len()),
        });
    }
    let base = prices[0].ok_or_else(|| BacktestError::Config("benchmark price missing on the first date".into()))?;
    let mut value = initial;
    let records = dates
        .iter()
        .zip(prices)
        .enumerate()
        .map(|(i, (&date, p))| {
            if let Some(p) = p {
                value = initial * (p / base);
            }
            DailyRecord {
                date,
                value,
                cash: 0.0,
                holdings: BTreeMap::new(),
                selection: Vec::new(),
                weights: Vec::new(),
                signal: i8::from(i == 0),
                traded: i == 0,
                stale: p.is_none(),
            }
        })
        .collect();
    Ok(SimulationResult::from_records(Strategy::BuyHold, 0, records, initial))
}

// ---------------------------------------------------------------------------
// Market and network snapshots
// ---------------------------------------------------------------------------

/// Universe prices and returns with the benchmark column split off.
#[derive(Debug, Clone)]
pub struct Market {
    prices: PriceTable,
    returns: ReturnMatrix,
    benchmark: Option<(String, Vec<Option<f64>>)>,
}

impl Market {
    pub fn new(prices: PriceTable, benchmark: Option<&str>) -> Result<Self> {
        Self::filtered(prices, benchmark, None)
    }

    /// Like [`Market::new`], applying the quality filter to the universe
    /// after the benchmark column is removed.
    pub fn filtered(prices: PriceTable, benchmark: Option<&str>, max_missing_frac: Option<f64>) -> Result<Self> {
        let (prices, benchmark) = match benchmark {
            Some(b) => {
                let (rest, single) = prices.split_off(b)?;
                (rest, Some((b.to_string(), single.close_column(0))))
            }
            None => (prices, None),
        };
        let prices = match max_missing_frac {
            Some(f) => quality_filter(&prices, f)?,
            None => prices,
        };
        if prices.n_tickers() == 0 {
            return Err(BacktestError::EmptyUniverse);
        }
        let returns = compute_returns(&prices)?;
        Ok(Self {
            prices,
            returns,
            benchmark,
        })
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn returns(&self) -> &ReturnMatrix {
        &self.returns
    }

    pub fn benchmark(&self) -> Option<(&str, &[Option<f64>])> {
        self.benchmark.as_ref().map(|(t, p)| (t.as_str(), p.as_slice()))
    }

    /// Execution price for a decision on return row `t`: the open of price
    /// date `t + 2`, else the close of price date `t + 1`.
    pub fn exec_price(&self, t: usize, ticker: usize) -> Option<f64> {
        self.prices.open(t + 2, ticker).or_else(|| self.prices.close(t + 1, ticker))
    }
}

#[derive(Debug, Clone)]
pub struct NetworkSnapshot {
    pub window_end: NaiveDate,
    pub influence: InfluenceMatrix,
    pub costs: CostMatrix,
    pub tree: MstTree,
    pub ranking: CentralityRanking,
}

/// Influence, costs, MST and centrality for one window. When no pair can be
/// estimated (e.g. a flat market) every influence is zero and all costs
/// tie at one.
pub fn network_snapshot(window: &ReturnWindow<'_>, settings: &FevdSettings) -> Result<NetworkSnapshot> {
    let n = window.tickers().len();
    if n == 0 {
        return Err(BacktestError::EmptyUniverse);
    }
    let influence = if n == 1 {
        InfluenceMatrix::from_rows(window.tickers().to_vec(), vec![0.0])
    } else {
        match influence_matrix(window, settings) {
            Ok(m) => m,
            Err(VarError::AllPairsFailed) => {
                log::warn!("no estimable pair in window ending {}", window.end_date());
                InfluenceMatrix::from_rows(window.tickers().to_vec(), vec![0.0; n * n])
            }
            Err(e) => return Err(e.into()),
        }
    };
    let costs = to_cost(&influence);
    let tree = prim_mst(&costs)?;
    let ranking = degree_centrality(&tree);
    Ok(NetworkSnapshot {
        window_end: window.end_date(),
        influence,
        costs,
        tree,
        ranking,
    })
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Seed-independent inputs of one decision day.
#[derive(Debug, Clone)]
struct DayPlan {
    t: usize,
    selection: Vec<String>,
    var_w: Option<WeightVector>,
    sharpe_w: Option<WeightVector>,
    arima: Option<Vec<Forecast>>,
    /// VaR weights over the first day's selection.
    initial_var_w: Option<WeightVector>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Needs {
    network: bool,
    var: bool,
    sharpe: bool,
    arima: bool,
    nnar: bool,
    dynamic_var: bool,
}

impl Needs {
    fn of(strategies: &[Strategy], config: &StrategyConfig) -> Self {
        let mut n = Needs::default();
        for &s in strategies {
            if s == Strategy::BuyHold {
                continue;
            }
            n.network = true;
            match s.portfolio_mode() {
                PortfolioMode::DynamicVarOnly => n.dynamic_var = true,
                PortfolioMode::Fixed => match s.weighting(config) {
                    WeightingRule::Var => n.var = true,
                    WeightingRule::Sharpe => n.sharpe = true,
                },
                PortfolioMode::Dynamic => match s.weighting(config) {
                    WeightingRule::Var => n.var = true,
                    WeightingRule::Sharpe => n.sharpe = true,
                },
            }
            match s.forecaster() {
                Forecaster::Arima => n.arima = true,
                Forecaster::Nnar => n.nnar = true,
                Forecaster::None => {}
            }
        }
        n
    }
}

/// Decision rows `w-1 ..= T-3` of a market with `T` price dates.
pub fn decision_rows(config: &StrategyConfig, market: &Market) -> std::ops::Range<usize> {
    let t_len = market.prices.n_dates();
    let first = config.window - 1;
    first..(t_len.saturating_sub(2)).max(first)
}

fn check_history(config: &StrategyConfig, market: &Market) -> Result<()> {
    let have = market.prices.n_dates();
    let need = config.window + 1;
    if have < need {
        return Err(BacktestError::InsufficientHistory { need, have });
    }
    Ok(())
}

/// Forecast for one series; failures degrade to a zero forecast.
fn forecast_one(forecaster: Forecaster, ticker: &str, series: Option<Vec<f64>>, config: &StrategyConfig, seed: u64) -> Forecast {
    let r_hat = series
        .and_then(|s| {
            let out = match forecaster {
                Forecaster::None => Ok(0.0),
                Forecaster::Arima => arima_fit(&s, &config.arima).map(|m| arima_forecast(&m, &s)),
                Forecaster::Nnar => nnar_fit(&s, &config.nnar, seed)
                    .and_then(|m| nnar_forecast(&m, &s[s.len() - config.nnar.p..])),
            };
            match out {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("{forecaster:?} forecast for {ticker} failed: {e}");
                    None
                }
            }
        })
        .unwrap_or(0.0);
    Forecast {
        ticker: ticker.to_string(),
        r_hat,
        signal: to_signal(r_hat).expect("finite by construction"),
    }
}

fn plan_days(config: &StrategyConfig, market: &Market, needs: Needs) -> Result<Vec<DayPlan>> {
    let rows: Vec<usize> = decision_rows(config, market).collect();
    if rows.is_empty() || !needs.network {
        return Ok(rows
            .into_iter()
            .map(|t| DayPlan {
                t,
                selection: Vec::new(),
                var_w: None,
                sharpe_w: None,
                arima: None,
                initial_var_w: None,
            })
            .collect());
    }
    let fevd = config.fevd_settings();
    let first = rows[0];
    let rebuild: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|t| (t - first).is_multiple_of(config.rebalance_every))
        .collect();
    let selections: Vec<Vec<String>> = rebuild
        .par_iter()
        .map(|&t| {
            let window = market.returns.window(t, config.window)?;
            let snap = network_snapshot(&window, &fevd)?;
            Ok(select_top_k(&snap.ranking, config.k))
        })
        .collect::<Result<_>>()?;
    let initial = selections[0].clone();

    rows.par_iter()
        .map(|&t| {
            let window = market.returns.window(t, config.window)?;
            let selection = selections[(t - first) / config.rebalance_every].clone();
            let var_w = if needs.var {
                Some(var_weights(&selection, &window, config.alpha, config.min_var_window)?)
            } else {
                None
            };
            let sharpe_w = needs
                .sharpe
                .then(|| sharpe_weights(&selection, &window, config.risk_free));
            let arima = needs.arima.then(|| {
                selection
                    .iter()
                    .map(|tk| forecast_one(Forecaster::Arima, tk, window.series_of(tk), config, 0))
                    .collect()
            });
            let initial_var_w = if needs.dynamic_var {
                Some(var_weights(&initial, &window, config.alpha, config.min_var_window)?)
            } else {
                None
            };
            Ok(DayPlan {
                t,
                selection,
                var_w,
                sharpe_w,
                arima,
                initial_var_w,
            })
        })
        .collect()
}

fn nnar_day_forecasts(config: &StrategyConfig, market: &Market, plans: &[DayPlan], seed: u64) -> Vec<Vec<Forecast>> {
    plans
        .par_iter()
        .map(|plan| {
            let window = market
                .returns
                .window(plan.t, config.window)
                .expect("planned windows are valid");
            plan.selection
                .par_iter()
                .map(|tk| {
                    let s = derive_seed(seed, tk, plan.t);
                    forecast_one(Forecaster::Nnar, tk, window.series_of(tk), config, s)
                })
                .collect()
        })
        .collect()
}

fn price_map(market: &Market, tickers: impl IntoIterator<Item = String>, f: impl Fn(usize) -> Option<f64>) -> BTreeMap<String, f64> {
    tickers
        .into_iter()
        .filter_map(|t| {
            let i = market.prices.ticker_index(&t)?;
            f(i).map(|p| (t, p))
        })
        .collect()
}

fn simulate_strategy(
    strategy: Strategy,
    seed: u64,
    config: &StrategyConfig,
    market: &Market,
    plans: &[DayPlan],
    nnar: Option<&[Vec<Forecast>]>,
) -> Result<SimulationResult> {
    let c0 = config.initial_capital;
    let dates = market.prices.dates();
    let start = config.window;
    if strategy == Strategy::BuyHold {
        let (name, col) = market
            .benchmark()
            .ok_or_else(|| BacktestError::NoBenchmark(config.benchmark.clone().unwrap_or_default()))?;
        let mut r = benchmark_buy_hold(&dates[start..], &col[start..], c0)
            .map_err(|_| BacktestError::NoBenchmark(name.to_string()))?;
        r.seed = seed;
        return Ok(r);
    }

    let mut state = PortfolioState::new(c0, start);
    let mut records = Vec::with_capacity(plans.len() + 1);
    records.push(DailyRecord {
        date: dates[start],
        value: c0,
        cash: c0,
        holdings: BTreeMap::new(),
        selection: Vec::new(),
        weights: Vec::new(),
        signal: 0,
        traded: false,
        stale: false,
    });

    for (day, plan) in plans.iter().enumerate() {
        let t = plan.t;
        let rule = strategy.weighting(config);
        let base = match (strategy.portfolio_mode(), rule) {
            (PortfolioMode::DynamicVarOnly, _) => plan.initial_var_w.clone(),
            (_, WeightingRule::Var) => plan.var_w.clone(),
            (_, WeightingRule::Sharpe) => plan.sharpe_w.clone(),
        }
        .expect("weights planned for every requested strategy");
        let forecasts: Option<&[Forecast]> = match strategy.forecaster() {
            Forecaster::None => None,
            Forecaster::Arima => plan.arima.as_deref(),
            Forecaster::Nnar => nnar.map(|n| n[day].as_slice()),
        };
        let weights = match forecasts {
            Some(f) => filter_weights(&base, f)?,
            None => base,
        };
        let signal = match strategy.portfolio_mode() {
            PortfolioMode::Fixed => i8::from(day == 0),
            _ => match strategy.signal_mode() {
                SignalMode::AllAgree => {
                    let signals: Vec<i8> = forecasts.unwrap_or(&[]).iter().map(|f| f.signal).collect();
                    aggregate_signal(&signals)
                }
                SignalMode::PerStockFilter => 1,
            },
        };
        let signal = if signal == 1 && weights.is_all_zero() { -1 } else { signal };

        let mut names: Vec<String> = weights.tickers().map(str::to_string).collect();
        names.extend(state.holdings.keys().cloned());
        let exec = price_map(market, names.clone(), |i| market.exec_price(t, i));
        let close = price_map(market, names, |i| market.prices.close(t + 2, i));
        let out = execute_day(&state, signal, &weights, &exec, &close)?;
        state = out.state;
        records.push(DailyRecord {
            date: dates[t + 2],
            value: state.value,
            cash: state.cash,
            holdings: state.holdings.clone(),
            selection: plan.selection.clone(),
            weights: weights.entries.iter().map(|e| (e.ticker.clone(), e.normalized)).collect(),
            signal,
            traded: out.traded,
            stale: out.stale,
        });
    }
    Ok(SimulationResult::from_records(strategy, seed, records, c0))
}

/// Runs `strategies` for one seed. Network, weights and ARIMA forecasts are
/// computed once per day and shared across strategies.
pub fn run_simulation(
    config: &StrategyConfig,
    market: &Market,
    strategies: &[Strategy],
    seed: u64,
) -> Result<Vec<SimulationResult>> {
    Ok(run_multi_seed(config, market, strategies, &[seed])?.results)
}

/// Per-seed results plus the seed table.
#[derive(Debug, Clone)]
pub struct MultiSeedRun {
    /// Seed-major: all strategies of the first seed, then the next seed.
    pub results: Vec<SimulationResult>,
    pub table: SeedTable,
}

pub fn run_multi_seed(
    config: &StrategyConfig,
    market: &Market,
    strategies: &[Strategy],
    seeds: &[u64],
) -> Result<MultiSeedRun> {
    config.validate()?;
    check_history(config, market)?;
    if seeds.is_empty() {
        return Err(BacktestError::NoSeeds);
    }
    let needs = Needs::of(strategies, config);
    let plans = plan_days(config, market, needs)?;

    let per_seed: Vec<Vec<SimulationResult>> = seeds
        .par_iter()
        .map(|&seed| {
            let nnar = needs.nnar.then(|| nnar_day_forecasts(config, market, &plans, seed));
            strategies
                .par_iter()
                .map(|&s| simulate_strategy(s, seed, config, market, &plans, nnar.as_deref()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let table = SeedTable::new(strategies, seeds, &per_seed);
    Ok(MultiSeedRun {
        results: per_seed.into_iter().flatten().collect(),
        table,
    })
}

/// Total return percent per seed (rows) and strategy (columns), with a
/// per-row mean and a final averages row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTable {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl SeedTable {
    fn new(strategies: &[Strategy], seeds: &[u64], per_seed: &[Vec<SimulationResult>]) -> Self {
        Self {
            strategies: strategies.to_vec(),
            seeds: seeds.to_vec(),
            cells: per_seed
                .iter()
                .map(|row| row.iter().map(|r| r.total_return_pct).collect())
                .collect(),
        }
    }

    pub fn row_mean(&self, row: usize) -> f64 {
        mean(&self.cells[row])
    }

    /// Column averages across seeds, followed by the mean of the row means.
    pub fn averages(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.strategies.len())
            .map(|c| mean(&self.cells.iter().map(|r| r[c]).collect::<Vec<_>>()))
            .collect();
        let rows: Vec<f64> = (0..self.seeds.len()).map(|r| self.row_mean(r)).collect();
        out.push(mean(&rows));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed");
        for s in &self.strategies {
            write!(out, ",{s}").expect("writing to a String cannot fail");
        }
        out.push_str(",row_mean\n");
        for (r, seed) in self.seeds.iter().enumerate() {
            write!(out, "{seed}").expect("writing to a String cannot fail");
            for v in &self.cells[r] {
                write!(out, ",{v}").expect("writing to a String cannot fail");
            }
            writeln!(out, ",{}", self.row_mean(r)).expect("writing to a String cannot fail");
        }
        out.push_str("average");
        for v in self.averages() {
            write!(out, ",{v}").expect("writing to a String cannot fail");
        }
        out.push('\n');
        out
    }
}
