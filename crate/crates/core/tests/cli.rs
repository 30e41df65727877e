mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use netfolio_core::cli::{parse_config, run, Cli, Summary};
use tempfile::TempDir;

const CONFIG: &str = r#"# small desk run
[data]
prices = "prices.csv"
benchmark = "^IDX"

[network]
horizon = 10
k = 4

[backtest]
window = 60
initial_capital = 50000.0
seeds = [132]
strategies = ["mst_var", "mst_nnar_var", "buy_hold"]
"#;

struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

fn fixture(config: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    common::write_long_csv(&common::synthetic_market(8, 90, 51, true), &dir.path().join("prices.csv"));
    let path = dir.path().join("run.toml");
    fs::write(&path, config).unwrap();
    Fixture { dir, config: path }
}

fn invoke(fx: &Fixture, args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec!["netfolio", "--config", fx.config.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(&Cli::try_parse_from(argv).unwrap())
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn two_runs_write_identical_bytes() {
    let fx = fixture(CONFIG);
    let (a, b) = (fx.dir.path().join("a"), fx.dir.path().join("b"));
    invoke(&fx, &["--out", a.to_str().unwrap(), "simulate"]).unwrap();
    invoke(&fx, &["--out", b.to_str().unwrap(), "--threads", "2", "simulate"]).unwrap();
    let (fa, fb) = (read_dir(&a), read_dir(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs");
    }
}

#[test]
fn simulate_writes_one_csv_per_strategy_and_a_summary() {
    let fx = fixture(CONFIG);
    let out = fx.dir.path().join("out");
    invoke(&fx, &["--out", out.to_str().unwrap(), "--strategies", "mst_var,fixed", "simulate"]).unwrap();
    let files: Vec<String> = read_dir(&out).into_keys().collect();
    assert_eq!(files, ["summary.json", "values_fixed_132.csv", "values_mst_var_132.csv"]);

    let csv = fs::read_to_string(out.join("values_mst_var_132.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("date,portfolio_value"));
    // price dates w .. T-1
    assert_eq!(lines.count(), 90 - 60);
    assert!(csv.lines().nth(1).unwrap().ends_with(",50000"));

    let summary: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.config, CONFIG);
    assert_eq!(summary.engine_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(summary.strategies, ["mst_var", "fixed"]);
    assert_eq!(summary.runs.len(), 2);
    assert!(summary.mean_total_return_pct.contains_key("mst_var"));
}

#[test]
fn seed_range_fills_the_seed_table() {
    let fx = fixture(CONFIG);
    let out = fx.dir.path().join("out");
    invoke(&fx, &["--out", out.to_str().unwrap(), "--seeds", "99..108", "simulate"]).unwrap();
    let table = fs::read_to_string(out.join("seeds_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "seed,mst_var,mst_nnar_var,buy_hold,row_mean");
    let seed_rows: Vec<&str> = lines[1..].iter().copied().filter(|l| !l.starts_with("average")).collect();
    assert_eq!(seed_rows.len(), 10);
    assert!(seed_rows[0].starts_with("99,") && seed_rows[9].starts_with("108,"));
    assert!(lines.last().unwrap().starts_with("average,"));
    assert_eq!(read_dir(&out).len(), 3 * 10 + 2);

    // report re-renders the same table from summary.json
    fs::remove_file(out.join("seeds_table.csv")).unwrap();
    invoke(&fx, &["--out", out.to_str().unwrap(), "report"]).unwrap();
    assert_eq!(fs::read_to_string(out.join("seeds_table.csv")).unwrap(), table);
}

#[test]
fn network_writes_only_network_artifacts() {
    let fx = fixture(CONFIG);
    let out = fx.dir.path().join("net");
    invoke(&fx, &["--out", out.to_str().unwrap(), "--rebalance-every", "7", "network"]).unwrap();
    let files: Vec<String> = read_dir(&out).into_keys().collect();
    // decision rows 59..=87, every seventh
    assert_eq!(files.len(), 3 * 5);
    for f in &files {
        assert!(
            (f.starts_with("costs_") && f.ends_with(".csv"))
                || (f.starts_with("mst_") && f.ends_with(".dot"))
                || (f.starts_with("selection_") && f.ends_with(".csv")),
            "{f}"
        );
    }
    let sel = files.iter().find(|f| f.starts_with("selection_")).unwrap();
    assert_eq!(fs::read_to_string(out.join(sel)).unwrap().lines().count(), 1 + 4);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let fx = fixture(&CONFIG.replace("k = 4", "k = 4\nbogus = 1"));
    assert!(invoke(&fx, &["simulate"]).is_err());

    let fx = fixture(&CONFIG.replace("[network]", "[allocation]\nalpha = 0.6\n\n[network]"));
    assert!(invoke(&fx, &["simulate"]).is_err());

    let fx = fixture(CONFIG);
    assert!(invoke(&fx, &["--strategies", "mst_magic", "simulate"]).is_err());
    assert!(invoke(&fx, &["--threads", "0", "simulate"]).is_err());
    assert!(Cli::try_parse_from(["netfolio", "launch"]).is_err());
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let fx = fixture(CONFIG);
    let cfg = parse_config(&fx.config).unwrap();
    assert_eq!(cfg.prices, fx.dir.path().join("prices.csv"));
    assert_eq!(cfg.out_dir, fx.dir.path().join("out"));
    let text = netfolio_core::cli::ingest(&cfg).unwrap();
    assert!(text.contains("benchmark: ^IDX"));
}
