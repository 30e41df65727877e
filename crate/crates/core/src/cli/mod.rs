//! Command-line entry points: `ingest`, `network`, `simulate`, `report`.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{parse_config, parse_config_str, parse_seeds, parse_strategies, ConfigError, RunConfig};

use crate::backtest::{decision_rows, network_snapshot, run_multi_seed, Market, SeedTable, Strategy};
use crate::market_data::{load_prices, quality_filter, PriceTable};
use crate::network::{export_dot, select_top_k};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "netfolio", version, about = "FEVD network portfolio backtester")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seeds, e.g. `132` or `99..108,132`.
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    /// Comma-separated strategy names.
    #[arg(long, global = true, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Recompute the network every n decision days.
    #[arg(long, global = true)]
    pub rebalance_every: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Load and quality-check the price data.
    Ingest,
    /// Write cost matrices, MST graphs and selections per window.
    Network,
    /// Run the strategy simulations.
    Simulate,
    /// Re-render the seed table from a saved summary.json.
    Report,
}

/// Entry point used by the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Loads the config, applies command-line overrides and runs the command.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Report = cli.command {
        let out = match (&cli.out, &cli.config) {
            (Some(o), _) => o.clone(),
            (None, Some(c)) => parse_config(c)?.out_dir,
            (None, None) => bail!("report needs --out or --config"),
        };
        print!("{}", report(&out)?);
        return Ok(());
    }
    let path = cli.config.as_deref().context("--config is required")?;
    let mut config = parse_config(path)?;
    apply_overrides(&mut config, cli)?;
    let _ = env_logger::Builder::new()
        .filter_level(config.verbosity)
        .parse_default_env()
        .try_init();
    match cli.command {
        Command::Ingest => print!("{}", ingest(&config)?),
        Command::Network => {
            let files = network(&config)?;
            println!("wrote {} files to {}", files.len(), config.out_dir.display());
        }
        Command::Simulate => {
            let summary = simulate(&config)?;
            print!("{}", summary.table().to_csv());
        }
        Command::Report => unreachable!("handled above"),
    }
    Ok(())
}

fn apply_overrides(config: &mut RunConfig, cli: &Cli) -> anyhow::Result<()> {
    if let Some(s) = &cli.seeds {
        config.strategy.seeds = parse_seeds(s).map_err(anyhow::Error::msg).context("--seeds")?;
    }
    if let Some(list) = &cli.strategies {
        let s = parse_strategies(list).map_err(anyhow::Error::msg).context("--strategies")?;
        if s.contains(&Strategy::BuyHold) && config.strategy.benchmark.is_none() {
            bail!("--strategies: buy_hold needs data.benchmark");
        }
        config.strategies = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = o.clone();
    }
    if let Some(n) = cli.rebalance_every {
        if n == 0 {
            bail!("--rebalance-every must be at least 1");
        }
        config.strategy.rebalance_every = n;
    }
    Ok(())
}

fn load_table(config: &RunConfig) -> anyhow::Result<PriceTable> {
    load_prices(&config.prices, config.format).with_context(|| format!("loading {}", config.prices.display()))
}

fn load_market(config: &RunConfig) -> anyhow::Result<Market> {
    let table = load_table(config)?;
    Ok(Market::filtered(
        table,
        config.strategy.benchmark.as_deref(),
        Some(config.max_missing_frac),
    )?)
}

/// Validates the data and describes what survives the quality filter.
pub fn ingest(config: &RunConfig) -> anyhow::Result<String> {
    let table = load_table(config)?;
    let universe = match &config.strategy.benchmark {
        Some(b) => table.split_off(b).with_context(|| format!("benchmark {b}"))?.0,
        None => table.clone(),
    };
    let kept = quality_filter(&universe, config.max_missing_frac)?;
    let dropped: Vec<&String> = universe
        .tickers()
        .iter()
        .filter(|t| kept.ticker_index(t).is_none())
        .collect();
    let dates = table.dates();
    let mut out = String::new();
    out.push_str(&format!(
        "dates: {} ({} .. {})\n",
        dates.len(),
        dates[0],
        dates[dates.len() - 1]
    ));
    out.push_str(&format!("tickers: {} kept, {} dropped\n", kept.n_tickers(), dropped.len()));
    for t in dropped {
        let i = universe.ticker_index(t).expect("present");
        out.push_str(&format!("  dropped {t}: {:.1}% missing\n", 100.0 * universe.missing_fraction(i)));
    }
    out.push_str(&format!("masked cells: {}\n", table.masked_count()));
    out.push_str(&format!("opens: {}\n", if table.has_open() { "yes" } else { "no" }));
    if let Some(b) = &config.strategy.benchmark {
        out.push_str(&format!("benchmark: {b}\n"));
    }
    Ok(out)
}

fn load_sectors(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() < 2 {
            bail!("{}: expected ticker,sector rows", path.display());
        }
        out.insert(rec[0].trim().to_string(), rec[1].trim().to_string());
    }
    Ok(out)
}

/// Writes `costs_<date>.csv`, `mst_<date>.dot` and `selection_<date>.csv`
/// for every network recompute window. Returns the paths written.
pub fn network(config: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let market = load_market(config)?;
    let s = &config.strategy;
    s.validate()?;
    if market.prices().n_dates() < s.window + 1 {
        bail!(
            "need at least {} price dates, have {}",
            s.window + 1,
            market.prices().n_dates()
        );
    }
    let sectors = config.sectors.as_deref().map(load_sectors).transpose()?;
    fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    let rows: Vec<usize> = decision_rows(s, &market).step_by(s.rebalance_every).collect();
    let fevd = s.fevd_settings();
    let snaps = rows
        .par_iter()
        .map(|&t| network_snapshot(&market.returns().window(t, s.window)?, &fevd))
        .collect::<Result<Vec<_>, _>>()?;

    let mut files = Vec::new();
    for snap in &snaps {
        let date = snap.window_end;
        if config.write_costs {
            let path = config.out_dir.join(format!("costs_{date}.csv"));
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            snap.costs.write_csv(date, f)?;
            files.push(path);
        }
        if config.write_dot {
            let path = config.out_dir.join(format!("mst_{date}.dot"));
            fs::write(&path, export_dot(&snap.tree, sectors.as_ref()))?;
            files.push(path);
        }
        let mut sel = String::from("window_end,rank,ticker,degree\n");
        let top = select_top_k(&snap.ranking, s.k);
        for (rank, (ticker, degree)) in snap.ranking.ranking.iter().take(top.len()).enumerate() {
            sel.push_str(&format!("{date},{},{ticker},{degree}\n", rank + 1));
        }
        let path = config.out_dir.join(format!("selection_{date}.csv"));
        fs::write(&path, sel)?;
        files.push(path);
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub total_return_pct: f64,
    pub trade_count: usize,
    pub final_value: f64,
    pub days: usize,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub engine_version: String,
    /// The config file text, verbatim.
    pub config: String,
    /// Effective values of the settings that flags can override.
    pub overrides: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    pub runs: Vec<RunSummary>,
    pub mean_total_return_pct: BTreeMap<String, f64>,
}

impl Summary {
    /// Rebuilds the seed table from the stored runs.
    pub fn table(&self) -> SeedTable {
        let strategies: Vec<Strategy> = self
            .strategies
            .iter()
            .filter_map(|s| Strategy::from_slug(s).ok())
            .collect();
        let cells = self
            .seeds
            .iter()
            .map(|seed| {
                strategies
                    .iter()
                    .map(|st| {
                        self.runs
                            .iter()
                            .find(|r| r.seed == *seed && r.strategy == st.slug())
                            .map_or(f64::NAN, |r| r.total_return_pct)
                    })
                    .collect()
            })
            .collect();
        SeedTable {
            strategies,
            seeds: self.seeds.clone(),
            cells,
        }
    }
}

/// Runs every selected strategy for every seed and writes
/// `values_<strategy>_<seed>.csv`, `summary.json` and, for more than one
/// seed, `seeds_table.csv`.
pub fn simulate(config: &RunConfig) -> anyhow::Result<Summary> {
    let market = load_market(config)?;
    let s = &config.strategy;
    let run = run_multi_seed(s, &market, &config.strategies, &s.seeds)?;
    fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    for r in &run.results {
        let path = config.out_dir.join(format!("values_{}_{}.csv", r.strategy.slug(), r.seed));
        fs::write(&path, r.values_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    let table = &run.table;
    let averages = table.averages();
    let summary = Summary {
        engine_version: ENGINE_VERSION.to_string(),
        config: config.source_text.clone(),
        overrides: overrides_of(config),
        seeds: s.seeds.clone(),
        strategies: config.strategies.iter().map(|x| x.slug().to_string()).collect(),
        runs: run
            .results
            .iter()
            .map(|r| RunSummary {
                strategy: r.strategy.slug().to_string(),
                seed: r.seed,
                total_return_pct: r.total_return_pct,
                trade_count: r.trade_count,
                final_value: r.final_value(),
                days: r.records.len(),
            })
            .collect(),
        mean_total_return_pct: table
            .strategies
            .iter()
            .zip(&averages)
            .map(|(st, v)| (st.slug().to_string(), *v))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    fs::write(config.out_dir.join("summary.json"), json)?;
    if s.seeds.len() > 1 {
        fs::write(config.out_dir.join("seeds_table.csv"), table.to_csv())?;
    }
    Ok(summary)
}

fn overrides_of(config: &RunConfig) -> BTreeMap<String, String> {
    // Effective values of every overridable setting, so a summary is
    // self-describing even when flags were used.
    BTreeMap::from([
        ("rebalance_every".to_string(), config.strategy.rebalance_every.to_string()),
        (
            "seeds".to_string(),
            config
                .strategy
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "strategies".to_string(),
            config
                .strategies
                .iter()
                .map(|s| s.slug())
                .collect::<Vec<_>>()
                .join(","),
        ),
    ])
}

/// Reads `summary.json` from `out_dir`, rewrites `seeds_table.csv` and
/// returns a plain-text table.
pub fn report(out_dir: &Path) -> anyhow::Result<String> {
    let path = out_dir.join("summary.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary: Summary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let table = summary.table();
    fs::write(out_dir.join("seeds_table.csv"), table.to_csv())?;

    let width = table.strategies.iter().map(|s| s.slug().len()).max().unwrap_or(8).max(8);
    let mut out = format!("{:<width$}", "seed");
    for s in &table.strategies {
        out.push_str(&format!(" {:>width$}", s.slug()));
    }
    out.push_str(&format!(" {:>width$}\n", "row_mean"));
    for (r, seed) in table.seeds.iter().enumerate() {
        out.push_str(&format!("{seed:<width$}"));
        for v in &table.cells[r] {
            out.push_str(&format!(" {v:>width$.4}"));
        }
        out.push_str(&format!(" {:>width$.4}\n", table.row_mean(r)));
    }
    out.push_str(&format!("{:<width$}", "average"));
    for v in table.averages() {
        out.push_str(&format!(" {v:>width$.4}"));
    }
    out.push('\n');
    Ok(out)
}
