//! Price panels, validity masks, simple returns and rolling windows.
//!
//! Panels are stored row-major (date × ticker). A cell is *valid* when its
//! price parsed as a finite, strictly positive number; everything else is
//! masked and stored as `NaN` so that an accidental read poisons arithmetic
//! instead of silently producing a number.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("unparseable header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("unparseable date `{0}` (expected YYYY-MM-DD)")]
    Date(String),
    #[error("{0} contains no valid rows")]
    Empty(PathBuf),
    #[error("duplicate entry for ({date}, {ticker})")]
    Duplicate { date: NaiveDate, ticker: String },
    #[error("dates must be strictly increasing")]
    UnsortedDates,
    #[error("ticker {0} appears more than once")]
    DuplicateTicker(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing-data threshold must lie in [0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("every ticker was removed by the quality filter")]
    AllFiltered,
    #[error("need at least 2 dates to compute returns, got {0}")]
    TooFewDates(usize),
    #[error("insufficient history: window of {window} rows cannot end at row {end}")]
    InsufficientHistory { end: usize, window: usize },
    #[error("unknown ticker {0}")]
    UnknownTicker(String),
}

pub type Result<T> = std::result::Result<T, MarketDataError>;

/// On-disk layout of a price file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceFormat {
    /// `date,ticker,open,adj_close`, one row per observation.
    Long,
    /// `date,<TICKER1>,<TICKER2>,...` of adjusted closes, with an optional
    /// `<name>.open.csv` sibling holding opens in the same layout.
    Wide,
}

fn is_valid_price(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn parse_cell(s: &str) -> f64 {
    match s.trim().parse::<f64>() {
        Ok(v) if is_valid_price(v) => v,
        _ => f64::NAN,
    }
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| MarketDataError::Date(s.to_string()))
}

/// Aligned date × ticker panel of adjusted closes and optional opens.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    adj_close: Vec<f64>,
    open: Option<Vec<f64>>,
    valid: Vec<bool>,
}

impl PriceTable {
    /// Builds a table from row-major panels. Cells that are not finite and
    /// strictly positive are masked; when opens are supplied a cell is valid
    /// only if both its close and its open are.
    pub fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        adj_close: Vec<f64>,
        open: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MarketDataError::UnsortedDates);
        }
        let mut seen = BTreeSet::new();
        for t in &tickers {
            if !seen.insert(t.as_str()) {
                return Err(MarketDataError::DuplicateTicker(t.clone()));
            }
        }
        let cells = dates.len() * tickers.len();
        if adj_close.len() != cells {
            return Err(MarketDataError::Shape(format!(
                "adj_close has {} cells, expected {}",
                adj_close.len(),
                cells
            )));
        }
        if let Some(o) = &open {
            if o.len() != cells {
                return Err(MarketDataError::Shape(format!(
                    "open has {} cells, expected {}",
                    o.len(),
                    cells
                )));
            }
        }
        let valid: Vec<bool> = (0..cells)
            .map(|c| {
                is_valid_price(adj_close[c]) && open.as_ref().is_none_or(|o| is_valid_price(o[c]))
            })
            .collect();
        let mask = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter()
                .zip(&valid)
                .map(|(x, &ok)| if ok { x } else { f64::NAN })
                .collect()
        };
        Ok(Self {
            dates,
            tickers,
            adj_close: mask(adj_close),
            open: open.map(mask),
            valid,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn has_open(&self) -> bool {
        self.open.is_some()
    }

    pub fn ticker_index(&self, ticker: &str) -> Option<usize> {
        self.tickers.iter().position(|t| t == ticker)
    }

    pub fn is_valid(&self, date: usize, ticker: usize) -> bool {
        self.valid[date * self.tickers.len() + ticker]
    }

    pub fn close(&self, date: usize, ticker: usize) -> Option<f64> {
        let c = date * self.tickers.len() + ticker;
        self.valid[c].then(|| self.adj_close[c])
    }

    pub fn open(&self, date: usize, ticker: usize) -> Option<f64> {
        let c = date * self.tickers.len() + ticker;
        match &self.open {
            Some(o) if self.valid[c] => Some(o[c]),
            _ => None,
        }
    }

    /// Number of masked cells in the whole panel.
    pub fn masked_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    /// Fraction of masked cells in one ticker's column.
    pub fn missing_fraction(&self, ticker: usize) -> f64 {
        if self.dates.is_empty() {
            return 0.0;
        }
        let n = self.tickers.len();
        let missing = (0..self.dates.len()).filter(|d| !self.valid[d * n + ticker]).count();
        missing as f64 / self.dates.len() as f64
    }

    pub fn close_column(&self, ticker: usize) -> Vec<Option<f64>> {
        (0..self.dates.len()).map(|d| self.close(d, ticker)).collect()
    }

    /// Restricts the table to the given ticker columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> PriceTable {
        let n = self.tickers.len();
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..self.dates.len())
                .flat_map(|d| columns.iter().map(move |&i| v[d * n + i]))
                .collect()
        };
        PriceTable {
            dates: self.dates.clone(),
            tickers: columns.iter().map(|&i| self.tickers[i].clone()).collect(),
            adj_close: pick(&self.adj_close),
            open: self.open.as_deref().map(pick),
            valid: (0..self.dates.len())
                .flat_map(|d| columns.iter().map(move |&i| self.valid[d * n + i]))
                .collect(),
        }
    }

    /// Removes one ticker from the panel and returns it as a separate
    /// single-column table (used for the benchmark index).
    pub fn split_off(&self, ticker: &str) -> Result<(PriceTable, PriceTable)> {
        let idx = self
            .ticker_index(ticker)
            .ok_or_else(|| MarketDataError::UnknownTicker(ticker.to_string()))?;
        let rest: Vec<usize> = (0..self.tickers.len()).filter(|&i| i != idx).collect();
        Ok((self.select(&rest), self.select(&[idx])))
    }
}

/// Reads a price file in the given layout.
///
/// Dates come back ascending and tickers sorted lexicographically. Cells
/// that are absent, non-numeric or non-positive are masked rather than
/// rejected.
pub fn load_prices(path: &Path, format: PriceFormat) -> Result<PriceTable> {
    match format {
        PriceFormat::Long => load_long(path),
        PriceFormat::Wide => load_wide(path),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| MarketDataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> MarketDataError + '_ {
    move |source| MarketDataError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn load_long(path: &Path) -> Result<PriceTable> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let header_err = |reason: &str| MarketDataError::Header {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let date_col = col("date").ok_or_else(|| header_err("missing `date` column"))?;
    let ticker_col = col("ticker").ok_or_else(|| header_err("missing `ticker` column"))?;
    let close_col = col("adj_close").ok_or_else(|| header_err("missing `adj_close` column"))?;
    let open_col = col("open");

    let mut cells: BTreeMap<(NaiveDate, String), (f64, Option<f64>)> = BTreeMap::new();
    let mut any_open = false;
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let date = parse_date(&record[date_col])?;
        let ticker = record[ticker_col].to_string();
        if ticker.is_empty() {
            return Err(header_err("empty ticker field"));
        }
        let close = parse_cell(&record[close_col]);
        let open = open_col.and_then(|c| {
            let raw = record[c].trim();
            (!raw.is_empty()).then(|| parse_cell(raw))
        });
        any_open |= open.is_some();
        if cells.insert((date, ticker.clone()), (close, open)).is_some() {
            return Err(MarketDataError::Duplicate { date, ticker });
        }
    }
    if cells.is_empty() || cells.values().all(|(c, _)| !is_valid_price(*c)) {
        return Err(MarketDataError::Empty(path.to_path_buf()));
    }

    let dates: Vec<NaiveDate> = cells.keys().map(|(d, _)| *d).collect::<BTreeSet<_>>().into_iter().collect();
    let tickers: Vec<String> = cells
        .keys()
        .map(|(_, t)| t.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let date_idx: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let ticker_idx: HashMap<&str, usize> = tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let n = tickers.len();
    let mut adj_close = vec![f64::NAN; dates.len() * n];
    let mut open = any_open.then(|| vec![f64::NAN; dates.len() * n]);
    for ((date, ticker), (c, o)) in &cells {
        let cell = date_idx[date] * n + ticker_idx[ticker.as_str()];
        adj_close[cell] = *c;
        if let (Some(panel), Some(o)) = (open.as_mut(), o) {
            panel[cell] = *o;
        }
    }
    PriceTable::new(dates, tickers, adj_close, open)
}

struct WidePanel {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    values: Vec<f64>,
}

fn read_wide_panel(path: &Path) -> Result<WidePanel> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    let header_err = |reason: String| MarketDataError::Header {
        path: path.to_path_buf(),
        reason,
    };
    match headers.get(0) {
        Some(h) if h.eq_ignore_ascii_case("date") => {}
        _ => return Err(header_err("first column must be `date`".into())),
    }
    let raw_tickers: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if raw_tickers.is_empty() {
        return Err(header_err("no ticker columns".into()));
    }
    if raw_tickers.iter().any(String::is_empty) {
        return Err(header_err("empty ticker column name".into()));
    }
    let mut order: Vec<usize> = (0..raw_tickers.len()).collect();
    order.sort_by(|&a, &b| raw_tickers[a].cmp(&raw_tickers[b]));
    for w in order.windows(2) {
        if raw_tickers[w[0]] == raw_tickers[w[1]] {
            return Err(MarketDataError::DuplicateTicker(raw_tickers[w[0]].clone()));
        }
    }

    let mut rows: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let date = parse_date(&record[0])?;
        let row: Vec<f64> = order.iter().map(|&c| parse_cell(&record[c + 1])).collect();
        if rows.insert(date, row).is_some() {
            return Err(MarketDataError::Duplicate {
                date,
                ticker: "*".into(),
            });
        }
    }
    if rows.is_empty() {
        return Err(MarketDataError::Empty(path.to_path_buf()));
    }
    Ok(WidePanel {
        dates: rows.keys().copied().collect(),
        tickers: order.iter().map(|&c| raw_tickers[c].clone()).collect(),
        values: rows.into_values().flatten().collect(),
    })
}

/// `dir/prices.csv` -> `dir/prices.open.csv`.
pub fn open_sibling(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prices");
    path.with_file_name(format!("{stem}.open.csv"))
}

fn load_wide(path: &Path) -> Result<PriceTable> {
    let closes = read_wide_panel(path)?;
    if closes.values.iter().all(|v| !is_valid_price(*v)) {
        return Err(MarketDataError::Empty(path.to_path_buf()));
    }
    let sibling = open_sibling(path);
    let open = if sibling.exists() {
        let opens = read_wide_panel(&sibling)?;
        if opens.dates != closes.dates || opens.tickers != closes.tickers {
            return Err(MarketDataError::Shape(format!(
                "{} does not match the dates and tickers of {}",
                sibling.display(),
                path.display()
            )));
        }
        Some(opens.values)
    } else {
        None
    };
    PriceTable::new(closes.dates, closes.tickers, closes.values, open)
}

/// Keeps the tickers whose masked-cell fraction is strictly below
/// `max_missing_frac`. The date axis is untouched.
pub fn quality_filter(table: &PriceTable, max_missing_frac: f64) -> Result<PriceTable> {
    if !(0.0..1.0).contains(&max_missing_frac) {
        return Err(MarketDataError::InvalidThreshold(max_missing_frac));
    }
    let keep: Vec<usize> = (0..table.n_tickers())
        .filter(|&i| table.missing_fraction(i) < max_missing_frac)
        .collect();
    if keep.is_empty() {
        return Err(MarketDataError::AllFiltered);
    }
    Ok(table.select(&keep))
}

/// Date × ticker panel of simple returns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnMatrix {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    returns: Vec<f64>,
    valid: Vec<bool>,
}

impl ReturnMatrix {
    /// Builds a matrix from a row-major panel; non-finite cells are masked.
    pub fn from_rows(dates: Vec<NaiveDate>, tickers: Vec<String>, returns: Vec<f64>) -> Result<Self> {
        if returns.len() != dates.len() * tickers.len() {
            return Err(MarketDataError::Shape(format!(
                "returns has {} cells, expected {}",
                returns.len(),
                dates.len() * tickers.len()
            )));
        }
        let valid = returns.iter().map(|r| r.is_finite()).collect();
        Ok(Self {
            dates,
            tickers,
            returns,
            valid,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn get(&self, row: usize, ticker: usize) -> Option<f64> {
        let c = row * self.tickers.len() + ticker;
        self.valid[c].then(|| self.returns[c])
    }

    /// Raw row including `NaN` for masked cells.
    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.tickers.len();
        &self.returns[row * n..(row + 1) * n]
    }

    pub fn column(&self, ticker: usize) -> Vec<Option<f64>> {
        (0..self.dates.len()).map(|r| self.get(r, ticker)).collect()
    }

    /// The `w` consecutive rows ending at `end_index` (inclusive).
    pub fn window(&self, end_index: usize, w: usize) -> Result<ReturnWindow<'_>> {
        if w == 0 || end_index + 1 < w || end_index >= self.dates.len() {
            return Err(MarketDataError::InsufficientHistory {
                end: end_index,
                window: w,
            });
        }
        Ok(ReturnWindow {
            matrix: self,
            start: end_index + 1 - w,
            len: w,
        })
    }
}

/// Borrowed run of consecutive rows of a [`ReturnMatrix`].
#[derive(Debug, Clone, Copy)]
pub struct ReturnWindow<'a> {
    matrix: &'a ReturnMatrix,
    start: usize,
    len: usize,
}

impl<'a> ReturnWindow<'a> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn start_index(&self) -> usize {
        self.start
    }

    pub fn end_index(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn end_date(&self) -> NaiveDate {
        self.matrix.dates[self.end_index()]
    }

    pub fn tickers(&self) -> &'a [String] {
        &self.matrix.tickers
    }

    pub fn dates(&self) -> &'a [NaiveDate] {
        &self.matrix.dates[self.start..self.start + self.len]
    }

    /// Row `r` of the window (row `start + r` of the source matrix).
    pub fn row(&self, r: usize) -> &'a [f64] {
        self.matrix.row(self.start + r)
    }

    /// The full series of one ticker, or `None` if any cell is masked.
    pub fn series(&self, ticker: usize) -> Option<Vec<f64>> {
        (self.start..self.start + self.len)
            .map(|r| self.matrix.get(r, ticker))
            .collect()
    }

    /// Like [`series`](Self::series) but looked up by symbol.
    pub fn series_of(&self, ticker: &str) -> Option<Vec<f64>> {
        let idx = self.matrix.tickers.iter().position(|t| t == ticker)?;
        self.series(idx)
    }
}

/// Simple returns `(P_t - P_{t-1}) / P_{t-1}`. The first date is dropped and
/// any return touching a masked price is masked.
pub fn compute_returns(table: &PriceTable) -> Result<ReturnMatrix> {
    let t = table.n_dates();
    if t < 2 {
        return Err(MarketDataError::TooFewDates(t));
    }
    let n = table.n_tickers();
    let mut returns = Vec::with_capacity((t - 1) * n);
    for d in 1..t {
        for i in 0..n {
            let r = match (table.close(d - 1, i), table.close(d, i)) {
                (Some(prev), Some(cur)) => (cur - prev) / prev,
                _ => f64::NAN,
            };
            returns.push(r);
        }
    }
    ReturnMatrix::from_rows(table.dates[1..].to_vec(), table.tickers.clone(), returns)
}
