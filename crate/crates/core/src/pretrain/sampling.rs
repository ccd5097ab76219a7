use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asm::vocab::{INST_ID, MASK_ID};
use crate::asm::{TokenId, TokenSequence};
use crate::closure::ConnectivityGraph;
use crate::mask::MaskBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    Mask,
    Random,
    Unchanged,
}

/// Masked positions, what was put there, and the original ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MlmPerturbation {
    pub positions: Vec<usize>,
    pub kinds: Vec<Replacement>,
    pub originals: Vec<TokenId>,
}

impl MlmPerturbation {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Positions that may be masked: everything but `[CLS]`, `<INST>` and
/// `[PAD]`.
pub fn eligible_positions(seq: &TokenSequence) -> Vec<usize> {
    (0..seq.len())
        .filter(|&p| seq.instruction_of(p).is_some() && seq.tokens[p] != INST_ID)
        .collect()
}

/// Picks `max(1, round(rate * n))` of the `n` eligible positions without
/// replacement; each becomes `[MASK]` with probability 0.8, a uniformly
/// drawn ordinary token with probability 0.1, or stays unchanged.
pub fn mlm_perturb(
    seq: &TokenSequence,
    rate: f64,
    random_ids: Range<TokenId>,
    rng: &mut impl Rng,
) -> (Vec<TokenId>, MlmPerturbation) {
    let eligible = eligible_positions(seq);
    let mut tokens = seq.tokens.clone();
    if eligible.is_empty() {
        return (tokens, MlmPerturbation::default());
    }
    let k = ((rate * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut positions: Vec<usize> = sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
    positions.sort_unstable();
    let mut out = MlmPerturbation::default();
    for p in positions {
        let u: f64 = rng.random();
        let kind = if u < 0.8 || (u < 0.9 && random_ids.is_empty()) {
            Replacement::Mask
        } else if u < 0.9 {
            Replacement::Random
        } else {
            Replacement::Unchanged
        };
        out.positions.push(p);
        out.kinds.push(kind);
        out.originals.push(tokens[p]);
        match kind {
            Replacement::Mask => tokens[p] = MASK_ID,
            Replacement::Random => tokens[p] = rng.random_range(random_ids.clone()),
            Replacement::Unchanged => {}
        }
    }
    (tokens, out)
}

/// Sampled nodes plus balanced positive (true) and negative (absent)
/// connectivity edges touching them. Pairs are `(u, v)` with `u < v`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSample {
    pub nodes: Vec<usize>,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl EdgeSample {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    /// `(u, v, label)` for every sampled pair.
    pub fn labeled(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        self.positives
            .iter()
            .map(|&(u, v)| (u, v, true))
            .chain(self.negatives.iter().map(|&(u, v)| (u, v, false)))
    }
}

/// Draws `round(rate * N)` nodes, takes every connectivity edge touching
/// them as positives, and draws as many non-edges touching them as
/// negatives (all of them if fewer exist).
pub fn mdm_sample(con: &ConnectivityGraph, rate: f64, rng: &mut impl Rng) -> EdgeSample {
    let n = con.nodes();
    let k = ((rate * n as f64).round() as usize).min(n);
    let mut nodes: Vec<usize> = sample(rng, n, k).into_vec();
    nodes.sort_unstable();
    let chosen: BTreeSet<usize> = nodes.iter().copied().collect();
    let positives: Vec<(usize, usize)> = con
        .edges()
        .filter(|(u, v, _)| chosen.contains(u) || chosen.contains(v))
        .map(|(u, v, _)| (u, v))
        .collect();
    let mut candidates = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if (chosen.contains(&u) || chosen.contains(&v)) && !con.connected(u, v) {
                candidates.push((u, v));
            }
        }
    }
    let want = positives.len().min(candidates.len());
    let mut picked: Vec<usize> = sample(rng, candidates.len(), want).into_vec();
    picked.sort_unstable();
    let negatives = picked.into_iter().map(|i| candidates[i]).collect();
    EdgeSample {
        nodes,
        positives,
        negatives,
    }
}

/// Hides every sampled positive edge from the mask (and zeroes its
/// distance) and exposes every sampled negative with distance `injected`.
pub fn perturb_bundle(bundle: &MaskBundle, sample: &EdgeSample, seq: &TokenSequence, injected: u32) -> MaskBundle {
    let mut out = bundle.clone();
    let p = |t: usize| seq.inst_positions[t];
    for &(u, v) in &sample.positives {
        out.delete_edge(p(u), p(v));
    }
    for &(u, v) in &sample.negatives {
        out.insert_edge(p(u), p(v), injected);
    }
    out
}
