//! Dependence closure: the undirected connectivity graph and its distances.

use serde::Deserialize;
use serde_json::json;

use crate::deps::DependenceGraph;
use crate::error::{Error, Result};

pub const DEFAULT_NODE_CAP: usize = 512;

/// Undirected graph with an edge between two instructions whenever one
/// reaches the other in the dependence graph. `distance(u, v)` is the
/// shortest directed path length between them, in whichever direction is
/// shorter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectivityGraph {
    nodes: usize,
    /// Row-major N×N; 0 means "not connected" (and the diagonal).
    dist: Vec<u32>,
}

const INF: u32 = u32::MAX;

impl ConnectivityGraph {
    pub fn empty(nodes: usize) -> Self {
        ConnectivityGraph {
            nodes,
            dist: vec![0; nodes * nodes],
        }
    }

    /// Builds the graph from explicit `(u, v, d)` triples.
    pub fn from_edges(nodes: usize, edges: impl IntoIterator<Item = (usize, usize, u32)>) -> Result<Self> {
        let mut g = Self::empty(nodes);
        for (u, v, d) in edges {
            if u >= nodes || v >= nodes || u == v || d == 0 {
                return Err(Error::Format(format!("invalid connectivity edge [{u}, {v}, {d}]")));
            }
            g.dist[u * nodes + v] = d;
            g.dist[v * nodes + u] = d;
        }
        Ok(g)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Distance between two connected instructions, `None` otherwise.
    pub fn distance(&self, u: usize, v: usize) -> Option<u32> {
        match self.dist[u * self.nodes + v] {
            0 => None,
            d => Some(d),
        }
    }

    pub fn connected(&self, u: usize, v: usize) -> bool {
        self.distance(u, v).is_some()
    }

    /// Edges as `(u, v, d)` with `u < v`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.nodes).flat_map(move |u| {
            (u + 1..self.nodes).filter_map(move |v| self.distance(u, v).map(|d| (u, v, d)))
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges().count()
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        (0..self.nodes).filter_map(move |v| self.distance(u, v).map(|d| (v, d)))
    }

    /// Keeps nodes `0..n`.
    pub fn restricted(&self, n: usize) -> ConnectivityGraph {
        let n = n.min(self.nodes);
        let mut g = Self::empty(n);
        for u in 0..n {
            for v in 0..n {
                g.dist[u * n + v] = self.dist[u * self.nodes + v];
            }
        }
        g
    }

    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<_> = self.edges().map(|(u, v, d)| json!([u, v, d])).collect();
        json!({ "nodes": self.nodes, "edges": edges })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            nodes: usize,
            edges: Vec<(usize, usize, u32)>,
        }
        let raw: Raw = serde_json::from_value(value.clone())?;
        Self::from_edges(raw.nodes, raw.edges)
    }
}

/// All-pairs shortest dependence paths by Floyd-Warshall, folded into the
/// undirected connectivity graph.
///
/// ```
/// use depattn::closure::connectivity;
/// use depattn::deps::{DependenceGraph, EdgeKind};
///
/// let mut dep = DependenceGraph::new(3);
/// dep.add(0, 1, EdgeKind::Data);
/// dep.add(1, 2, EdgeKind::Data);
/// let con = connectivity(&dep, 512).unwrap();
/// assert_eq!(con.edges().collect::<Vec<_>>(), vec![(0, 1, 1), (0, 2, 2), (1, 2, 1)]);
/// ```
pub fn connectivity(dep: &DependenceGraph, cap: usize) -> Result<ConnectivityGraph> {
    let n = dep.nodes;
    if n > cap {
        return Err(Error::NodeCapExceeded { nodes: n, cap });
    }
    let mut d = vec![INF; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for &(u, v, _) in &dep.edges {
        d[u * n + v] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            if dik == INF {
                continue;
            }
            for j in 0..n {
                let dkj = d[k * n + j];
                if dkj != INF && dik + dkj < d[i * n + j] {
                    d[i * n + j] = dik + dkj;
                }
            }
        }
    }
    let mut g = ConnectivityGraph::empty(n);
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let best = d[u * n + v].min(d[v * n + u]);
            if best != INF {
                g.dist[u * n + v] = best;
            }
        }
    }
    Ok(g)
}
