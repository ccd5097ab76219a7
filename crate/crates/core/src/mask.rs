//! Attention masks and the relative distance matrix for one token sequence.
//!
//! Masks are kept as boolean "may attend" matrices; [`MaskBundle::additive`]
//! turns the union into the additive `{0, -inf}` form the encoder adds to
//! its logits, with `-inf` realized as a large negative constant.

use ndarray::Array2;
use serde_json::json;

use crate::asm::TokenSequence;
use crate::closure::ConnectivityGraph;

/// Default finite stand-in for `-inf`.
pub const NEG_INF: f64 = -1e9;

/// `[CLS]` attends to everything and everything attends to `[CLS]`.
pub fn global_mask(seq: &TokenSequence) -> Array2<bool> {
    let n = seq.len();
    Array2::from_shape_fn((n, n), |(i, j)| seq.is_cls(i) || seq.is_cls(j))
}

/// Tokens attend within their own instruction, delimiter included.
pub fn local_mask(seq: &TokenSequence) -> Array2<bool> {
    let n = seq.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        seq.inst_of[i] >= 0 && seq.inst_of[i] == seq.inst_of[j]
    })
}

/// `<INST>` delimiters of connected instructions attend to each other.
/// Instructions truncated out of the sequence contribute nothing.
pub fn dependence_mask(seq: &TokenSequence, con: &ConnectivityGraph) -> Array2<bool> {
    let n = seq.len();
    let mut m = Array2::from_elem((n, n), false);
    for (t, s, _) in retained_edges(seq, con) {
        let (pt, ps) = (seq.inst_positions[t], seq.inst_positions[s]);
        m[[pt, ps]] = true;
        m[[ps, pt]] = true;
    }
    m
}

fn retained_edges<'a>(
    seq: &'a TokenSequence,
    con: &'a ConnectivityGraph,
) -> impl Iterator<Item = (usize, usize, u32)> + 'a {
    let k = seq.num_instructions();
    con.edges().filter(move |&(t, s, _)| t < k && s < k)
}

/// Union of the three masks plus the distance matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBundle {
    /// `allowed[[i, j]]`: token `i` may attend to token `j`.
    pub allowed: Array2<bool>,
    /// Dependence distance between `<INST>` positions of connected
    /// instructions, 0 elsewhere.
    pub r: Array2<u32>,
}

impl MaskBundle {
    pub fn len(&self) -> usize {
        self.allowed.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Additive mask: 0 where attention is allowed, `neg_inf` elsewhere.
    pub fn additive(&self, neg_inf: f64) -> Array2<f64> {
        self.allowed.mapv(|a| if a { 0.0 } else { neg_inf })
    }

    /// Removes the dependence edge between two `<INST>` positions.
    pub fn delete_edge(&mut self, pu: usize, pv: usize) {
        for (a, b) in [(pu, pv), (pv, pu)] {
            self.allowed[[a, b]] = false;
            self.r[[a, b]] = 0;
        }
    }

    /// Inserts a dependence edge between two `<INST>` positions.
    pub fn insert_edge(&mut self, pu: usize, pv: usize, distance: u32) {
        for (a, b) in [(pu, pv), (pv, pu)] {
            self.allowed[[a, b]] = true;
            self.r[[a, b]] = distance;
        }
    }
}

/// Builds `M` and `R` for a sequence. `[PAD]` rows and columns are blocked
/// except for the diagonal.
///
/// ```
/// use depattn::asm::{parse_listing, tokenize, Vocabulary};
/// use depattn::closure::connectivity;
/// use depattn::deps::{dependence_graph, AnalysisOptions};
/// use depattn::mask::build_bundle;
///
/// let f = &parse_listing(".func f\n mov eax, 1\n add ebx, eax\n").unwrap()[0];
/// let seq = tokenize(&f.instructions, &Vocabulary::from_functions(std::slice::from_ref(f), 1), 512);
/// let con = connectivity(&dependence_graph(f, &AnalysisOptions::default()).unwrap(), 512).unwrap();
/// let bundle = build_bundle(&seq, &con);
/// let (a, b) = (seq.inst_positions[0], seq.inst_positions[1]);
/// assert!(bundle.allowed[[a, b]]);
/// assert_eq!(bundle.r[[a, b]], 1);
/// ```
pub fn build_bundle(seq: &TokenSequence, con: &ConnectivityGraph) -> MaskBundle {
    let n = seq.len();
    let g = global_mask(seq);
    let l = local_mask(seq);
    let d = dependence_mask(seq, con);
    let mut allowed = Array2::from_shape_fn((n, n), |(i, j)| g[[i, j]] || l[[i, j]] || d[[i, j]]);
    for p in (0..n).filter(|&p| seq.is_pad(p)) {
        allowed.row_mut(p).fill(false);
        allowed.column_mut(p).fill(false);
        allowed[[p, p]] = true;
    }
    let mut r = Array2::zeros((n, n));
    for (t, s, dist) in retained_edges(seq, con) {
        let (pt, ps) = (seq.inst_positions[t], seq.inst_positions[s]);
        r[[pt, ps]] = dist;
        r[[ps, pt]] = dist;
    }
    MaskBundle { allowed, r }
}

fn pairs(m: &Array2<bool>) -> Vec<[usize; 2]> {
    m.indexed_iter().filter(|(_, &on)| on).map(|((i, j), _)| [i, j]).collect()
}

/// Sparse form: enabled `(i, j)` pairs per mask kind, the union, and
/// nonzero `R` entries as `(i, j, d)`.
pub fn sparse_json(seq: &TokenSequence, con: &ConnectivityGraph) -> serde_json::Value {
    let bundle = build_bundle(seq, con);
    let r: Vec<[usize; 3]> = bundle
        .r
        .indexed_iter()
        .filter(|(_, &d)| d > 0)
        .map(|((i, j), &d)| [i, j, d as usize])
        .collect();
    json!({
        "len": seq.len(),
        "global": pairs(&global_mask(seq)),
        "local": pairs(&local_mask(seq)),
        "dependence": pairs(&dependence_mask(seq, con)),
        "union": pairs(&bundle.allowed),
        "r": r,
    })
}
