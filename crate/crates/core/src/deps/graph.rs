use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Control,
    Data,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Control => "control",
            EdgeKind::Data => "data",
        }
    }
}

/// Directed instruction-level dependence graph. An edge `(u, v, kind)`
/// means instruction `u` depends on instruction `v`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DependenceGraph {
    pub nodes: usize,
    pub edges: BTreeSet<(usize, usize, EdgeKind)>,
}

impl DependenceGraph {
    pub fn new(nodes: usize) -> Self {
        DependenceGraph {
            nodes,
            edges: BTreeSet::new(),
        }
    }

    pub fn add(&mut self, u: usize, v: usize, kind: EdgeKind) {
        assert!(u < self.nodes && v < self.nodes && u != v, "bad dependence edge {u}->{v}");
        self.edges.insert((u, v, kind));
    }

    /// Adjacency over edges of any kind, deduplicated.
    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes];
        for &(u, v, _) in &self.edges {
            if adj[u].last() != Some(&v) {
                adj[u].push(v);
            }
        }
        adj
    }

    /// Keeps only nodes `0..n`; used when the token sequence was truncated.
    pub fn restricted(&self, n: usize) -> DependenceGraph {
        let n = n.min(self.nodes);
        DependenceGraph {
            nodes: n,
            edges: self.edges.iter().filter(|&&(u, v, _)| u < n && v < n).copied().collect(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<serde_json::Value> = self
            .edges
            .iter()
            .map(|&(u, v, k)| json!([u, v, k.as_str()]))
            .collect();
        json!({ "nodes": self.nodes, "edges": edges })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            nodes: usize,
            edges: Vec<(usize, usize, EdgeKind)>,
        }
        let raw: Raw = serde_json::from_value(value.clone())?;
        let mut g = DependenceGraph::new(raw.nodes);
        for (u, v, k) in raw.edges {
            if u >= raw.nodes || v >= raw.nodes || u == v {
                return Err(Error::Format(format!("invalid dependence edge [{u}, {v}]")));
            }
            g.edges.insert((u, v, k));
        }
        Ok(g)
    }
}
