#![allow(dead_code)]

use chrono::NaiveDate;
use netfolio_core::market_data::{PriceTable, ReturnMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn dates(n: usize) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(2023, 1, 2).unwrap();
    (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
}

pub fn tickers(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("T{i:03}")).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Bivariate VAR(1) with zero intercept, `u ~ N(0, sd^2 I)`, after a burn-in.
pub fn simulate_var(a: [[f64; 2]; 2], sd: f64, t: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let burn = 200;
    let (mut x, mut y) = (0.0, 0.0);
    let (mut xs, mut ys) = (Vec::with_capacity(t), Vec::with_capacity(t));
    for step in 0..burn + t {
        let nx = a[0][0] * x + a[0][1] * y + sd * normal(rng);
        let ny = a[1][0] * x + a[1][1] * y + sd * normal(rng);
        x = nx;
        y = ny;
        if step >= burn {
            xs.push(x);
            ys.push(y);
        }
    }
    (xs, ys)
}

/// Row-major return panel `rows × n` into a matrix with synthetic dates.
pub fn return_matrix(rows: usize, n: usize, panel: Vec<f64>) -> ReturnMatrix {
    ReturnMatrix::from_rows(dates(rows), tickers(n), panel).unwrap()
}

/// Compounds a row-major return panel into prices starting at `start`.
/// Opens sit between the previous and current close.
pub fn prices_from_returns(names: Vec<String>, panel: &[f64], start: f64, with_open: bool) -> PriceTable {
    let n = names.len();
    let rows = panel.len() / n;
    let mut close = vec![start; (rows + 1) * n];
    let mut open = vec![start; (rows + 1) * n];
    for r in 0..rows {
        for i in 0..n {
            let prev = close[r * n + i];
            let cur = prev * (1.0 + panel[r * n + i]);
            close[(r + 1) * n + i] = cur;
            open[(r + 1) * n + i] = 0.5 * (prev + cur);
        }
    }
    PriceTable::new(dates(rows + 1), names, close, with_open.then_some(open)).unwrap()
}

/// One-factor market: `r_it = beta_i f_t + 0.8 r_{lead, t-1} + e_it` for a
/// few leading names, with a reserved benchmark column `^IDX` last.
pub fn synthetic_market(n: usize, days: usize, seed: u64, with_open: bool) -> PriceTable {
    let mut rng = rng(seed);
    let betas: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut panel = Vec::with_capacity((days - 1) * (n + 1));
    let mut prev = vec![0.0; n];
    for _ in 0..days - 1 {
        let f = 0.0004 + 0.008 * normal(&mut rng);
        let mut row = Vec::with_capacity(n + 1);
        for i in 0..n {
            let lead = if i % 6 == 0 { 0.0 } else { 0.3 * prev[i - i % 6] };
            row.push(betas[i] * f + lead + 0.012 * normal(&mut rng));
        }
        prev.copy_from_slice(&row);
        row.push(f);
        panel.extend(row);
    }
    let mut names = tickers(n);
    names.push("^IDX".into());
    prices_from_returns(names, &panel, 100.0, with_open)
}

/// Every price constant; includes the `^IDX` benchmark column.
pub fn flat_market(n: usize, days: usize) -> PriceTable {
    let mut names = tickers(n);
    names.push("^IDX".into());
    let panel = vec![0.0; (days - 1) * (n + 1)];
    prices_from_returns(names, &panel, 100.0, true)
}

/// `hubs` white-noise hub series, each driving `per_hub` followers through
/// `y_t = beta * hub_{t-1} + noise`.
pub fn hub_returns(hubs: usize, per_hub: usize, rows: usize, beta: f64, rng: &mut impl Rng) -> (Vec<String>, Vec<f64>, Vec<String>) {
    let n = hubs * (1 + per_hub);
    let mut names = Vec::with_capacity(n);
    let mut hub_names = Vec::new();
    for h in 0..hubs {
        names.push(format!("H{h}"));
        hub_names.push(format!("H{h}"));
        for f in 0..per_hub {
            names.push(format!("F{h}_{f}"));
        }
    }
    let mut panel = vec![0.0; rows * n];
    let mut prev_hub = vec![0.0; hubs];
    for r in 0..rows {
        for (h, prev) in prev_hub.iter_mut().enumerate() {
            let base = h * (1 + per_hub);
            let hub = 0.01 * normal(rng);
            panel[r * n + base] = hub;
            for f in 0..per_hub {
                panel[r * n + base + 1 + f] = beta * *prev + 0.01 * normal(rng);
            }
            *prev = hub;
        }
    }
    (names, panel, hub_names)
}

/// Writes `table` as a long `date,ticker,open,adj_close` CSV.
pub fn write_long_csv(table: &PriceTable, path: &std::path::Path) {
    let mut out = String::from("date,ticker,open,adj_close\n");
    for (d, date) in table.dates().iter().enumerate() {
        for (i, t) in table.tickers().iter().enumerate() {
            let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            out.push_str(&format!("{date},{t},{},{}\n", cell(table.open(d, i)), cell(table.close(d, i))));
        }
    }
    std::fs::write(path, out).unwrap();
}

/// Every labeled spanning tree of `K_n`, decoded from Prüfer sequences.
pub fn all_spanning_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n == 2 {
        return vec![vec![(0, 1)]];
    }
    let total = n.pow((n - 2) as u32);
    (0..total)
        .map(|mut code| {
            let mut seq = Vec::with_capacity(n - 2);
            for _ in 0..n - 2 {
                seq.push(code % n);
                code /= n;
            }
            let mut degree = vec![1usize; n];
            for &s in &seq {
                degree[s] += 1;
            }
            let mut edges = Vec::with_capacity(n - 1);
            for &s in &seq {
                let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
                edges.push((leaf, s));
                degree[leaf] -= 1;
                degree[s] -= 1;
            }
            let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
            edges.push((rest[0], rest[1]));
            edges
        })
        .collect()
}
