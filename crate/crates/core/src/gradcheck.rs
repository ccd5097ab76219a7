//! Finite-difference check of the hand-written gradients.
//!
//! The checked scalar combines every loss the encoder feeds: masked-token
//! cross-entropy, edge prediction, and a per-token type head. The model is
//! randomized away from its initialization so that layer norms, biases and
//! relative-bias entries all carry nonzero gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::asm::vocab::MASK_ID;
use crate::asm::{parse_listing, tokenize, Vocabulary};
use crate::closure::connectivity;
use crate::deps::{dependence_graph, AnalysisOptions};
use crate::encoder::{backward, encode, EncoderConfig, EncoderInput, EncoderState, LinearHead, Mode};
use crate::error::Result;
use crate::mask::{build_bundle, NEG_INF};
use crate::pretrain::{mdm_loss, mlm_loss, EdgeSample, MlmPerturbation, Replacement};

const PROGRAM: &str = ".func probe
    mov rax, rdi
    add rax, 1
    imul rax, rsi
    mov [rsp + 8], rax
    mov rcx, [rsp + 8]
    sub rcx, rdx
    test rcx, rcx
    je .done
    lea rdx, [rcx + rax*4 + 16]
    xor rdx, rax
.done:
    mov rax, rcx
    ret
";

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub encoder: EncoderConfig,
    pub eps: f64,
    pub samples: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                hidden: 16,
                ffn: 32,
                r_max: 3,
                max_len: 64,
                vocab_size: 0,
                dropout: 0.0,
                init_std: 0.3,
            },
            eps: 1e-4,
            samples: 240,
            floor: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSample {
    pub param: String,
    pub index: [usize; 2],
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn params_covered(&self) -> std::collections::BTreeSet<&str> {
        self.samples.iter().map(|s| s.param.as_str()).collect()
    }
}

struct Problem {
    input: EncoderInput,
    pert: MlmPerturbation,
    edges: EdgeSample,
    seq: crate::asm::TokenSequence,
    type_targets: Vec<usize>,
    type_positions: Vec<usize>,
}

/// Encoder plus type head, treated as one parameter list.
#[derive(Clone)]
struct Model {
    enc: EncoderState,
    types: LinearHead,
}

impl Model {
    fn params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut v = self.enc.params_mut();
        v.push(("type.w".into(), &mut self.types.w));
        v.push(("type.b".into(), &mut self.types.b));
        v
    }
}

fn loss_and_grads(m: &Model, p: &Problem) -> Result<(f64, Model)> {
    let trace = encode(&p.input, &m.enc, Mode::Eval)?;
    let h = trace.hidden();
    let mut g = Model {
        enc: m.enc.zeros_like(),
        types: m.types.zeros_like(),
    };
    let (l1, mut dh) = mlm_loss(h, &p.pert, &m.enc.mlm, &mut g.enc.mlm);
    let (l2, d2) = mdm_loss(h, &p.edges, &p.seq);
    dh += &d2;
    let x = h.select(ndarray::Axis(0), &p.type_positions);
    let logits = m.types.forward(x.view());
    let (l3, dlogits) = LinearHead::cross_entropy(&logits, &p.type_targets);
    let dx = m.types.backward(x.view(), &dlogits, &mut g.types);
    for (r, &pos) in p.type_positions.iter().enumerate() {
        let mut row = dh.row_mut(pos);
        row += &dx.row(r);
    }
    backward(&m.enc, &p.input, &trace, &dh, &mut g.enc)?;
    Ok((l1 + l2.loss + l3, g))
}

fn loss_only(m: &Model, p: &Problem) -> Result<f64> {
    Ok(loss_and_grads(m, p)?.0)
}

fn problem(cfg: &mut EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let f = parse_listing(PROGRAM)?.remove(0);
    let vocab = Vocabulary::from_functions(std::slice::from_ref(&f), 1);
    cfg.vocab_size = vocab.len();
    let seq = tokenize(&f.instructions, &vocab, cfg.max_len);
    let dep = dependence_graph(&f, &AnalysisOptions::default())?;
    let con = connectivity(&dep.restricted(seq.num_instructions()), 512)?;
    let bundle = build_bundle(&seq, &con);

    let eligible = crate::pretrain::eligible_positions(&seq);
    let mut pert = MlmPerturbation::default();
    for i in sample(rng, eligible.len(), 6).into_vec() {
        let p = eligible[i];
        pert.positions.push(p);
        pert.kinds.push(Replacement::Mask);
        pert.originals.push(seq.tokens[p]);
    }
    let mut tokens = seq.tokens.clone();
    for &p in &pert.positions {
        tokens[p] = MASK_ID;
    }
    let edges = EdgeSample {
        nodes: vec![],
        positives: con.edges().take(4).map(|(u, v, _)| (u, v)).collect(),
        negatives: (0..con.nodes())
            .flat_map(|u| (u + 1..con.nodes()).map(move |v| (u, v)))
            .filter(|&(u, v)| !con.connected(u, v))
            .take(4)
            .collect(),
    };
    let input = EncoderInput::from_parts(tokens, bundle.additive(NEG_INF), &bundle.r, cfg.r_max);
    let type_positions: Vec<usize> = (0..seq.len()).collect();
    let type_targets = (0..seq.len()).map(|_| rng.random_range(0..5)).collect();
    Ok(Problem {
        input,
        pert,
        edges,
        seq,
        type_targets,
        type_positions,
    })
}

/// Runs the check and reports every sampled coordinate.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc_cfg = cfg.encoder.clone();
    let prob = problem(&mut enc_cfg, &mut rng)?;
    let mut enc = EncoderState::init(&enc_cfg, &mut rng)?;
    let jitter = Normal::new(0.0, 0.3).expect("valid std");
    for l in &mut enc.layers {
        for t in [&mut l.ln1_g, &mut l.ln2_g] {
            t.mapv_inplace(|x| x + jitter.sample(&mut rng));
        }
        for t in [&mut l.ln1_b, &mut l.ln2_b, &mut l.bo, &mut l.b1, &mut l.b2] {
            t.mapv_inplace(|_| jitter.sample(&mut rng));
        }
    }
    for h in 0..enc_cfg.heads {
        for d in 1..=enc_cfg.r_max {
            enc.rel_bias[[h, d]] = 2.0 * jitter.sample(&mut rng);
        }
    }
    enc.mlm.b.mapv_inplace(|_| jitter.sample(&mut rng));
    let types = LinearHead::init(enc_cfg.hidden, 5, 0.3, &mut rng);
    let model = Model { enc, types };

    let (_, grads) = loss_and_grads(&model, &prob)?;
    let mut grads = grads;
    let grad_list: Vec<(String, Array2<f64>)> =
        grads.params_mut().into_iter().map(|(n, g)| (n, g.clone())).collect();

    let used_tokens: Vec<usize> = {
        let mut t: Vec<usize> = prob.input.tokens.iter().map(|&t| t as usize).collect();
        t.sort_unstable();
        t.dedup();
        t
    };
    let n_tokens = prob.input.len();
    let per_tensor = cfg.samples.div_ceil(grad_list.len()).max(1);

    let mut samples = Vec::new();
    for (k, (name, g)) in grad_list.iter().enumerate() {
        for _ in 0..per_tensor {
            let idx = match name.as_str() {
                "tok_emb" => [used_tokens[rng.random_range(0..used_tokens.len())], rng.random_range(0..g.ncols())],
                "pos_emb" => [rng.random_range(0..n_tokens), rng.random_range(0..g.ncols())],
                "rel_bias" => [rng.random_range(0..g.nrows()), rng.random_range(1..g.ncols())],
                _ => [rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols())],
            };
            let mut plus = model.clone();
            plus.params_mut()[k].1[idx] += cfg.eps;
            let mut minus = model.clone();
            minus.params_mut()[k].1[idx] -= cfg.eps;
            let numeric = (loss_only(&plus, &prob)? - loss_only(&minus, &prob)?) / (2.0 * cfg.eps);
            let analytic = g[idx];
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            samples.push(GradSample {
                param: name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { samples, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_check_passes() {
        let cfg = GradcheckConfig {
            samples: 40,
            ..Default::default()
        };
        let report = gradcheck(&cfg).unwrap();
        assert!(report.samples.len() >= 40);
        assert!(report.max_rel_error < 1e-4, "max rel error {}", report.max_rel_error);
    }
}
