//! Portfolio construction from FEVD dependency networks.
//!
//! Pairwise VAR(1) models give directed influence shares; their complements
//! form a cost matrix whose minimum spanning tree ranks stocks by degree.
//! The top-ranked stocks are weighted by inverse historical VaR or Sharpe
//! ratio, optionally filtered by ARIMA or NNAR forecasts, and traded in a
//! daily backtest.

pub mod allocation;
pub mod backtest;
pub mod cli;
pub mod forecast;
pub mod market_data;
pub mod network;
pub mod var_fevd;
