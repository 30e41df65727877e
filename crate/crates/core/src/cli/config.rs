//! TOML run configuration with per-module sections.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::backtest::{Strategy, StrategyConfig, WeightingRule};
use crate::forecast::{ArimaSettings, NnarSettings};
use crate::market_data::PriceFormat;
use crate::var_fevd::FevdMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    data: RawData,
    network: RawNetwork,
    allocation: RawAllocation,
    forecast: RawForecast,
    backtest: RawBacktest,
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawData {
    prices: Option<PathBuf>,
    format: PriceFormat,
    benchmark: Option<String>,
    sectors: Option<PathBuf>,
    max_missing_frac: f64,
}

impl Default for RawData {
    fn default() -> Self {
        Self {
            prices: None,
            format: PriceFormat::Long,
            benchmark: None,
            sectors: None,
            max_missing_frac: 0.10,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawNetwork {
    horizon: usize,
    k: usize,
    fevd_mode: FevdMode,
    min_window: usize,
    rebalance_every: usize,
    write_costs: bool,
    write_dot: bool,
}

impl Default for RawNetwork {
    fn default() -> Self {
        Self {
            horizon: 10,
            k: 5,
            fevd_mode: FevdMode::default(),
            min_window: 30,
            rebalance_every: 1,
            write_costs: true,
            write_dot: true,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawAllocation {
    alpha: f64,
    risk_free: f64,
    fixed_weighting: WeightingRule,
}

impl Default for RawAllocation {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            risk_free: 0.0,
            fixed_weighting: WeightingRule::Var,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawForecast {
    arima_max_p: usize,
    arima_max_d: usize,
    arima_max_q: usize,
    arima_min_len: usize,
    nnar_p: usize,
    nnar_k: usize,
    nnar_learning_rate: f64,
    nnar_epochs: usize,
    nnar_patience: usize,
    nnar_tolerance: f64,
}

impl Default for RawForecast {
    fn default() -> Self {
        let a = ArimaSettings::default();
        let n = NnarSettings::default();
        Self {
            arima_max_p: a.max_p,
            arima_max_d: a.max_d,
            arima_max_q: a.max_q,
            arima_min_len: a.min_len,
            nnar_p: n.p,
            nnar_k: n.k,
            nnar_learning_rate: n.learning_rate,
            nnar_epochs: n.epochs,
            nnar_patience: n.patience,
            nnar_tolerance: n.tolerance,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawBacktest {
    window: usize,
    initial_capital: f64,
    seeds: Vec<u64>,
    strategies: Option<Vec<String>>,
    fee_bps: f64,
}

impl Default for RawBacktest {
    fn default() -> Self {
        Self {
            window: 120,
            initial_capital: 100_000.0,
            seeds: vec![132],
            strategies: None,
            fee_bps: 0.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawOutput {
    dir: PathBuf,
    verbosity: String,
}

impl Default for RawOutput {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            verbosity: "warn".into(),
        }
    }
}

/// Validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub prices: PathBuf,
    pub format: PriceFormat,
    pub sectors: Option<PathBuf>,
    pub max_missing_frac: f64,
    pub strategy: StrategyConfig,
    pub strategies: Vec<Strategy>,
    pub out_dir: PathBuf,
    pub write_costs: bool,
    pub write_dot: bool,
    pub verbosity: log::LevelFilter,
    /// The config file exactly as read.
    pub source_text: String,
}

/// Reads and validates a config file. Relative paths resolve against the
/// file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text)?;
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let d = raw.data;
    if !(0.0..1.0).contains(&d.max_missing_frac) {
        return Err(invalid("data.max_missing_frac", "must lie in [0, 1)"));
    }

    let n = raw.network;
    if n.horizon == 0 {
        return Err(invalid("network.horizon", "must be at least 1"));
    }
    if n.k == 0 {
        return Err(invalid("network.k", "must be at least 1"));
    }
    if n.min_window < 5 {
        return Err(invalid("network.min_window", "must be at least 5"));
    }
    if n.rebalance_every == 0 {
        return Err(invalid("network.rebalance_every", "must be at least 1"));
    }

    let a = raw.allocation;
    if !(a.alpha > 0.0 && a.alpha <= 0.5) {
        return Err(invalid("allocation.alpha", format!("{} is outside (0, 0.5]", a.alpha)));
    }
    if !a.risk_free.is_finite() {
        return Err(invalid("allocation.risk_free", "must be finite"));
    }

    let f = raw.forecast;
    let b = raw.backtest;
    if b.window < 30 {
        return Err(invalid("backtest.window", "must be at least 30"));
    }
    if !(b.initial_capital > 0.0 && b.initial_capital.is_finite()) {
        return Err(invalid("backtest.initial_capital", "must be positive"));
    }
    if b.seeds.is_empty() {
        return Err(invalid("backtest.seeds", "must not be empty"));
    }
    if b.fee_bps != 0.0 {
        return Err(invalid("backtest.fee_bps", "reserved; only 0 is supported"));
    }
    if f.nnar_p == 0 || f.nnar_k == 0 {
        return Err(invalid("forecast.nnar_p", "nnar_p and nnar_k must be at least 1"));
    }
    if f.nnar_p + 20 > b.window {
        return Err(invalid("forecast.nnar_p", "nnar_p + 20 must not exceed backtest.window"));
    }
    if !(f.nnar_learning_rate > 0.0 && f.nnar_learning_rate.is_finite()) {
        return Err(invalid("forecast.nnar_learning_rate", "must be positive"));
    }
    if f.arima_min_len > b.window {
        return Err(invalid("forecast.arima_min_len", "must not exceed backtest.window"));
    }

    let strategies = match b.strategies {
        Some(list) => {
            let s = parse_strategies(&list).map_err(|m| invalid("backtest.strategies", m))?;
            if s.contains(&Strategy::BuyHold) && d.benchmark.is_none() {
                return Err(invalid("data.benchmark", "buy_hold needs a benchmark ticker"));
            }
            s
        }
        // Without a benchmark the default list leaves out buy_hold.
        None => Strategy::ALL
            .into_iter()
            .filter(|s| *s != Strategy::BuyHold || d.benchmark.is_some())
            .collect(),
    };
    if f.arima_max_d > 1 {
        return Err(invalid("forecast.arima_max_d", "only 0 or 1 is supported"));
    }
    let verbosity = parse_verbosity(&raw.output.verbosity)?;

    let strategy = StrategyConfig {
        window: b.window,
        horizon: n.horizon,
        k: n.k,
        alpha: a.alpha,
        initial_capital: b.initial_capital,
        seeds: b.seeds,
        benchmark: d.benchmark,
        risk_free: a.risk_free,
        fevd_mode: n.fevd_mode,
        min_var_window: n.min_window,
        rebalance_every: n.rebalance_every,
        fixed_weighting: a.fixed_weighting,
        fee_bps: b.fee_bps,
        arima: ArimaSettings {
            max_p: f.arima_max_p,
            max_d: f.arima_max_d,
            max_q: f.arima_max_q,
            min_len: f.arima_min_len,
        },
        nnar: NnarSettings {
            p: f.nnar_p,
            k: f.nnar_k,
            learning_rate: f.nnar_learning_rate,
            epochs: f.nnar_epochs,
            patience: f.nnar_patience,
            tolerance: f.nnar_tolerance,
        },
    };
    // File checks last so parameter errors are reported even without data.
    let prices = d
        .prices
        .map(resolve)
        .ok_or_else(|| invalid("data.prices", "a price file is required"))?;
    if !prices.is_file() {
        return Err(invalid("data.prices", format!("{} does not exist", prices.display())));
    }
    let sectors = d.sectors.map(resolve);
    if let Some(s) = &sectors {
        if !s.is_file() {
            return Err(invalid("data.sectors", format!("{} does not exist", s.display())));
        }
    }

    Ok(RunConfig {
        prices,
        format: d.format,
        sectors,
        max_missing_frac: d.max_missing_frac,
        strategy,
        strategies,
        out_dir: resolve(raw.output.dir),
        write_costs: n.write_costs,
        write_dot: n.write_dot,
        verbosity,
        source_text: text.to_string(),
    })
}

fn parse_verbosity(s: &str) -> Result<log::LevelFilter, ConfigError> {
    s.parse()
        .map_err(|_| invalid("output.verbosity", format!("unknown level {s:?}")))
}

/// Comma-separated strategy slugs.
pub fn parse_strategies<S: AsRef<str>>(list: &[S]) -> Result<Vec<Strategy>, String> {
    let mut out = Vec::new();
    for s in list {
        let s = s.as_ref().trim();
        let st = Strategy::from_slug(s).map_err(|e| e.to_string())?;
        if !out.contains(&st) {
            out.push(st);
        }
    }
    if out.is_empty() {
        return Err("no strategies selected".into());
    }
    Ok(out)
}

/// Seeds as a comma-separated list of values and inclusive `a..b` ranges.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range {part:?}"))?;
                let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range {part:?}"))?;
                if a > b {
                    return Err(format!("empty seed range {part:?}"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}
