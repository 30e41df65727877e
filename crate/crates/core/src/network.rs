//! Minimum spanning tree over the symmetric cost matrix, degree centrality
//! and top-k candidate selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::var_fevd::CostMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("cost matrix is empty")]
    Empty,
    #[error("non-finite cost between {0} and {1}")]
    NonFiniteCost(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    /// Endpoint already in the tree when the edge was added.
    pub source: String,
    pub target: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstTree {
    pub nodes: Vec<String>,
    pub edges: Vec<MstEdge>,
    pub total_cost: f64,
}

/// Dense `O(N^2)` Prim's algorithm.
///
/// Growth starts at the lexicographically smallest ticker. Among frontier
/// edges the smallest cost wins; exact ties go to the lexicographically
/// smallest `(source, target)` ticker pair.
pub fn prim_mst(costs: &CostMatrix) -> Result<MstTree, NetworkError> {
    let n = costs.len();
    if n == 0 {
        return Err(NetworkError::Empty);
    }
    let tickers = costs.tickers();
    for i in 0..n {
        for j in 0..n {
            if i != j && !costs.symmetric(i, j).is_finite() {
                return Err(NetworkError::NonFiniteCost(tickers[i].clone(), tickers[j].clone()));
            }
        }
    }

    let root = (0..n)
        .min_by(|&a, &b| tickers[a].cmp(&tickers[b]))
        .expect("n > 0");
    let mut in_tree = vec![false; n];
    in_tree[root] = true;
    // best[v] = cheapest (cost, tree endpoint) connecting v to the tree
    let mut best: Vec<(f64, usize)> = (0..n).map(|v| (costs.symmetric(root, v), root)).collect();

    let mut edges = Vec::with_capacity(n - 1);
    let mut total_cost = 0.0;
    for _ in 1..n {
        let mut pick: Option<usize> = None;
        for v in (0..n).filter(|&v| !in_tree[v]) {
            pick = match pick {
                None => Some(v),
                Some(u) => {
                    let (cu, su) = best[u];
                    let (cv, sv) = best[v];
                    let better = cv < cu
                        || (cv == cu && (&tickers[sv], &tickers[v]) < (&tickers[su], &tickers[u]));
                    Some(if better { v } else { u })
                }
            };
        }
        let v = pick.expect("a node remains outside the tree");
        let (cost, src) = best[v];
        in_tree[v] = true;
        total_cost += cost;
        edges.push(MstEdge {
            source: tickers[src].clone(),
            target: tickers[v].clone(),
            cost,
        });
        for u in (0..n).filter(|&u| !in_tree[u]) {
            let c = costs.symmetric(v, u);
            let (cb, sb) = best[u];
            if c < cb || (c == cb && tickers[v] < tickers[sb]) {
                best[u] = (c, v);
            }
        }
    }

    Ok(MstTree {
        nodes: tickers.to_vec(),
        edges,
        total_cost,
    })
}

/// Tickers ordered by MST degree, highest first; ties by ticker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralityRanking {
    pub ranking: Vec<(String, usize)>,
}

pub fn degree_centrality(tree: &MstTree) -> CentralityRanking {
    let mut degree: BTreeMap<&str, usize> = tree.nodes.iter().map(|t| (t.as_str(), 0)).collect();
    for e in &tree.edges {
        *degree.entry(e.source.as_str()).or_default() += 1;
        *degree.entry(e.target.as_str()).or_default() += 1;
    }
    let mut ranking: Vec<(String, usize)> = degree.into_iter().map(|(t, d)| (t.to_string(), d)).collect();
    ranking.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    CentralityRanking { ranking }
}

/// First `min(k, N)` tickers of the ranking.
pub fn select_top_k(ranking: &CentralityRanking, k: usize) -> Vec<String> {
    ranking.ranking.iter().take(k).map(|(t, _)| t.clone()).collect()
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Renders the tree as an undirected Graphviz graph. Edge costs go in the
/// `weight` attribute; sector labels, when given, become a `sector`
/// attribute on the node.
pub fn export_dot(tree: &MstTree, sectors: Option<&BTreeMap<String, String>>) -> String {
    let mut out = String::from("graph mst {\n");
    for node in &tree.nodes {
        match sectors.and_then(|s| s.get(node)) {
            Some(sector) => writeln!(out, "  {} [sector={}];", quote(node), quote(sector)),
            None => writeln!(out, "  {};", quote(node)),
        }
        .expect("writing to a String cannot fail");
    }
    for e in &tree.edges {
        writeln!(
            out,
            "  {} -- {} [weight={}];",
            quote(&e.source),
            quote(&e.target),
            e.cost
        )
        .expect("writing to a String cannot fail");
    }
    out.push_str("}\n");
    out
}
