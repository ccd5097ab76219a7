//! Joint masked-token and masked-dependence pre-training.
//!
//! Each step perturbs every sequence twice: tokens are masked for the MLM
//! objective, and a sample of connectivity edges is hidden from the mask
//! while as many absent edges are injected. One encoder pass over the
//! perturbed input feeds both losses; the edge loss classifies the sampled
//! pairs from the dot product of their `<INST>` states.

mod loss;
mod sampling;

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asm::{Function, TokenId, TokenSequence, Vocabulary};
use crate::closure::{connectivity, ConnectivityGraph};
use crate::deps::{dependence_graph, AnalysisOptions};
use crate::encoder::{backward, encode, EncoderInput, EncoderState, Mode};
use crate::error::{Error, Result};
use crate::mask::{build_bundle, MaskBundle, NEG_INF};
use crate::optim::{clip_global_norm, learning_rate, AdamW, OptimConfig};

pub use loss::{mdm_loss, mlm_loss, MdmOutcome};
pub use sampling::{
    eligible_positions, mdm_sample, mlm_perturb, perturb_bundle, EdgeSample, MlmPerturbation, Replacement,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub mlm_rate: f64,
    pub mdm_rate: f64,
    /// Distance written into `R` for injected negative edges.
    pub injected_distance: u32,
    pub neg_inf: f64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    /// Desk scale: lr 3e-4, 100 warmup steps, batch 8.
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            batch: 8,
            mlm_rate: 0.15,
            mdm_rate: 0.4,
            injected_distance: 1,
            neg_inf: NEG_INF,
            optim: OptimConfig::default(),
        }
    }
}

impl PretrainConfig {
    /// Full-scale values: lr 5e-4, 10k warmup steps, batch 1024.
    pub fn reference() -> Self {
        PretrainConfig {
            batch: 1024,
            optim: OptimConfig {
                lr: 5e-4,
                warmup: 10_000,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 || self.steps == 0 {
            return fail("steps and batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.mlm_rate) || !(0.0..=1.0).contains(&self.mdm_rate) {
            return fail("sampling rates must be in [0, 1]");
        }
        if self.neg_inf >= -1e4 {
            return fail("neg_inf must be a large negative number");
        }
        if self.optim.lr <= 0.0 || self.optim.clip_norm <= 0.0 {
            return fail("lr and clip_norm must be positive");
        }
        Ok(())
    }
}

/// A function prepared for training: tokens, connectivity over the
/// retained instructions, and the unperturbed mask bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub name: String,
    pub seq: TokenSequence,
    pub con: ConnectivityGraph,
    pub bundle: MaskBundle,
}

impl TrainExample {
    pub fn new(
        func: &Function,
        vocab: &Vocabulary,
        opts: &AnalysisOptions,
        max_len: usize,
        node_cap: usize,
    ) -> Result<Self> {
        let seq = crate::asm::tokenize(&func.instructions, vocab, max_len);
        let dep = dependence_graph(func, opts)?;
        let con = connectivity(&dep.restricted(seq.num_instructions()), node_cap)?;
        Ok(Self::from_parts(&func.name, seq, con))
    }

    pub fn from_parts(name: &str, seq: TokenSequence, con: ConnectivityGraph) -> Self {
        let bundle = build_bundle(&seq, &con);
        TrainExample {
            name: name.to_string(),
            seq,
            con,
            bundle,
        }
    }
}

/// Per-step averages over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mlm_loss: f64,
    pub mdm_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub mdm_correct: usize,
    pub mdm_total: usize,
}

pub const METRICS_HEADER: &str = "step,mlm_loss,mdm_loss,total,lr";

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        format!("{},{:.8},{:.8},{:.8},{:.8e}", self.step, self.mlm_loss, self.mdm_loss, self.total, self.lr)
    }
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(s, "{}", m.csv_line());
    }
    s
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, step, item)`, so results do not depend on
/// scheduling.
pub fn item_rng(seed: u64, step: u64, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ step) ^ item))
}

/// Loss and gradients of one perturbed sequence.
pub struct ItemResult {
    pub mlm: f64,
    pub mdm: MdmOutcome,
    pub grads: EncoderState,
}

/// Perturbs one example, runs the encoder once and backpropagates both
/// losses.
pub fn example_gradients(
    state: &EncoderState,
    ex: &TrainExample,
    cfg: &PretrainConfig,
    random_ids: Range<TokenId>,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<ItemResult> {
    let (tokens, pert) = mlm_perturb(&ex.seq, cfg.mlm_rate, random_ids, rng);
    let edges = mdm_sample(&ex.con, cfg.mdm_rate, rng);
    let bundle = perturb_bundle(&ex.bundle, &edges, &ex.seq, cfg.injected_distance);
    let input = EncoderInput::from_parts(tokens, bundle.additive(cfg.neg_inf), &bundle.r, state.config.r_max);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(rng));
    let mode = if train { Mode::Train(&mut drop_rng) } else { Mode::Eval };
    let trace = encode(&input, state, mode)?;
    let mut grads = state.zeros_like();
    let (mlm, d1) = mlm_loss(trace.hidden(), &pert, &state.mlm, &mut grads.mlm);
    let (mdm, d2) = mdm_loss(trace.hidden(), &edges, &ex.seq);
    if !mlm.is_finite() || !mdm.loss.is_finite() {
        return Err(Error::NonFinite {
            what: format!("loss on {} (mlm {mlm}, mdm {})", ex.name, mdm.loss),
        });
    }
    backward(state, &input, &trace, &(d1 + d2), &mut grads)?;
    Ok(ItemResult { mlm, mdm, grads })
}

/// Single optimization step over `batch`. Items run in parallel; their
/// gradients are summed in batch order.
pub fn train_step(
    state: &mut EncoderState,
    opt: &mut AdamW,
    batch: &[&TrainExample],
    step: usize,
    seed: u64,
    cfg: &PretrainConfig,
    random_ids: Range<TokenId>,
) -> Result<StepMetrics> {
    let results: Vec<ItemResult> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = item_rng(seed, step as u64, i as u64);
            example_gradients(state, ex, cfg, random_ids.clone(), &mut rng, true)
        })
        .collect::<Result<_>>()?;
    let b = batch.len() as f64;
    let mut grads = state.zeros_like();
    let (mut mlm, mut mdm, mut correct, mut total) = (0.0, 0.0, 0, 0);
    for r in &results {
        grads.accumulate(&r.grads);
        mlm += r.mlm;
        mdm += r.mdm.loss;
        correct += r.mdm.correct;
        total += r.mdm.total;
    }
    let mut gs: Vec<_> = grads.params_mut().into_iter().map(|(_, g)| g).collect();
    for g in gs.iter_mut() {
        g.mapv_inplace(|x| x / b);
    }
    clip_global_norm(&mut gs, cfg.optim.clip_norm);
    let lr = learning_rate(cfg.optim.lr, step, cfg.optim.warmup, cfg.steps);
    let grad_refs: Vec<_> = grads.params().into_iter().map(|(_, g)| g).collect();
    opt.step(state.params_mut(), &grad_refs, lr);
    state.check_finite("parameter")?;
    Ok(StepMetrics {
        step,
        mlm_loss: mlm / b,
        mdm_loss: mdm / b,
        total: (mlm + mdm) / b,
        lr,
        mdm_correct: correct,
        mdm_total: total,
    })
}

/// Batch indices for `step`: a fresh draw without replacement.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = item_rng(seed ^ 0xBA7C4, step as u64, u64::MAX);
    sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Runs `cfg.steps` steps, calling `on_step` after each.
pub fn pretrain(
    state: &mut EncoderState,
    examples: &[TrainExample],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx = batch_indices(examples.len(), cfg.batch, seed, step);
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let m = train_step(state, &mut opt, &batch, step, seed, cfg, vocab.ordinary_ids())?;
        on_step(&m);
        log.push(m);
    }
    Ok(log)
}

/// Edge-classification accuracy (threshold 0.5) on freshly perturbed
/// examples, dropout off.
pub fn mdm_accuracy(state: &EncoderState, examples: &[TrainExample], cfg: &PretrainConfig, vocab: &Vocabulary, seed: u64) -> Result<f64> {
    let outcomes: Vec<MdmOutcome> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = item_rng(seed, u64::MAX, i as u64);
            example_gradients(state, ex, cfg, vocab.ordinary_ids(), &mut rng, false).map(|r| r.mdm)
        })
        .collect::<Result<_>>()?;
    let (c, t) = outcomes.iter().fold((0, 0), |(c, t), o| (c + o.correct, t + o.total));
    Ok(if t == 0 { 1.0 } else { c as f64 / t as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_listing;

    #[test]
    fn metrics_format() {
        let m = StepMetrics { step: 3, mlm_loss: 1.5, mdm_loss: 0.25, total: 1.75, lr: 3e-5, mdm_correct: 0, mdm_total: 0 };
        assert_eq!(m.csv_line(), "3,1.50000000,0.25000000,1.75000000,3.00000000e-5");
        assert!(metrics_csv(&[m]).starts_with("step,mlm_loss,mdm_loss,total,lr\n"));
    }

    #[test]
    fn reference_values() {
        let r = PretrainConfig::reference();
        assert_eq!((r.optim.lr, r.optim.warmup, r.batch), (5e-4, 10_000, 1024));
        let d = PretrainConfig::default();
        assert_eq!((d.optim.lr, d.optim.warmup, d.batch), (3e-4, 100, 8));
    }

    #[test]
    fn example_preparation_truncates_connectivity() {
        let f = parse_listing(".func f\nmov eax, 1\nadd ebx, eax\nadd ecx, ebx\n").unwrap().remove(0);
        let vocab = Vocabulary::from_functions(std::slice::from_ref(&f), 1);
        let ex = TrainExample::new(&f, &vocab, &AnalysisOptions::default(), 11, 512).unwrap();
        assert_eq!(ex.seq.num_instructions(), 2);
        assert_eq!(ex.con.nodes(), 2);
    }
}
