use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward, encode, EncoderInput, EncoderState, Mode};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, learning_rate, AdamW, OptimConfig};
use crate::pretrain::{item_rng, TrainExample};

/// Final `[CLS]` state of one function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Encodes one unperturbed example with dropout off.
pub fn embed(state: &EncoderState, ex: &TrainExample, neg_inf: f64) -> Result<FunctionEmbedding> {
    let input = EncoderInput::new(&ex.seq, &ex.bundle, state.config.r_max, neg_inf);
    let trace = encode(&input, state, Mode::Eval)?;
    let vector = trace.cls().to_vec();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("embedding of {}", ex.name),
        });
    }
    Ok(FunctionEmbedding {
        id: ex.name.clone(),
        vector,
    })
}

/// Embeds examples in parallel, keeping input order.
pub fn embed_all(state: &EncoderState, examples: &[TrainExample], neg_inf: f64) -> Result<Vec<FunctionEmbedding>> {
    examples.par_iter().map(|ex| embed(state, ex, neg_inf)).collect()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pool indices by descending cosine similarity to `query`; equal scores
/// keep pool order.
///
/// ```
/// use depattn::downstream::cosine_rank;
///
/// let pool = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]];
/// assert_eq!(cosine_rank(&[1.0, 0.0], &pool), vec![1, 2, 0]);
/// ```
pub fn cosine_rank(query: &[f64], pool: &[Vec<f64>]) -> Vec<usize> {
    let scores: Vec<f64> = pool.iter().map(|c| cosine(query, c)).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// A query, its candidate pool and the position of the true match in it.
#[derive(Clone, Debug, PartialEq)]
pub struct SimQuery {
    pub query: Vec<f64>,
    pub pool: Vec<Vec<f64>>,
    pub target: usize,
}

impl SimQuery {
    /// 1-based rank of the match.
    pub fn rank(&self) -> usize {
        cosine_rank(&self.query, &self.pool)
            .iter()
            .position(|&i| i == self.target)
            .map_or(usize::MAX, |p| p + 1)
    }
}

/// Fraction of queries whose match ranks within the top `k` (hits / N).
pub fn recall_at_k(queries: &[SimQuery], k: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    queries.iter().filter(|q| q.target < q.pool.len() && q.rank() <= k).count() as f64 / queries.len() as f64
}

/// Mean reciprocal rank; a match missing from its pool contributes 0.
pub fn mrr(queries: &[SimQuery]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let sum: f64 = queries
        .iter()
        .map(|q| if q.target < q.pool.len() { 1.0 / q.rank() as f64 } else { 0.0 })
        .sum();
    sum / queries.len() as f64
}

/// For each of `n` queries, a pool of `size` candidate indices out of `0..n`
/// containing the query's own index, shuffled. Returns `(pool, target)`
/// where `pool[target] == query`.
pub fn build_pools(n: usize, size: usize, seed: u64) -> Vec<(Vec<usize>, usize)> {
    let size = size.clamp(1, n.max(1));
    (0..n)
        .map(|q| {
            let mut rng = item_rng(seed, 0x9001, q as u64);
            let mut pool: Vec<usize> = sample(&mut rng, n - 1, size - 1)
                .into_iter()
                .map(|i| if i >= q { i + 1 } else { i })
                .collect();
            pool.push(q);
            pool.shuffle(&mut rng);
            let target = pool.iter().position(|&i| i == q).expect("query in pool");
            (pool, target)
        })
        .collect()
}

/// Retrieval queries pairing `queries[i]` with `candidates[i]`.
pub fn sim_queries(queries: &[FunctionEmbedding], candidates: &[FunctionEmbedding], pool_size: usize, seed: u64) -> Vec<SimQuery> {
    build_pools(queries.len().min(candidates.len()), pool_size, seed)
        .into_iter()
        .enumerate()
        .map(|(q, (pool, target))| SimQuery {
            query: queries[q].vector.clone(),
            pool: pool.iter().map(|&i| candidates[i].vector.clone()).collect(),
            target,
        })
        .collect()
}

fn cosine_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let na = a.dot(&a).sqrt().max(1e-12);
    let nb = b.dot(&b).sqrt().max(1e-12);
    let c = a.dot(&b) / (na * nb);
    let da = &b / (na * nb) - &a * (c / (na * na));
    let db = &a / (na * nb) - &b * (c / (nb * nb));
    (c, da, db)
}

/// Triplet loss and gradient of one triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub d_anchor: Array1<f64>,
    pub d_positive: Array1<f64>,
    pub d_negative: Array1<f64>,
}

/// `max(0, margin - cos(a, p) + cos(a, n))` with its gradients.
pub fn triplet_loss(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>, margin: f64) -> TripletOutput {
    let (cp, dap, dp) = cosine_grad(a, p);
    let (cn, dan, dn) = cosine_grad(a, n);
    let loss = margin - cp + cn;
    if loss <= 0.0 {
        let z = Array1::zeros(a.len());
        return TripletOutput {
            loss: 0.0,
            d_anchor: z.clone(),
            d_positive: z.clone(),
            d_negative: z,
        };
    }
    TripletOutput {
        loss,
        d_anchor: dan - dap,
        d_positive: -dp,
        d_negative: dn,
    }
}

/// Indices of one training triplet into an example list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub margin: f64,
    pub neg_inf: f64,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 200,
            batch: 8,
            margin: 0.2,
            neg_inf: crate::mask::NEG_INF,
            optim: OptimConfig {
                lr: 1e-4,
                warmup: 20,
                ..Default::default()
            },
        }
    }
}

fn cls_grad(len: usize, d: usize, g: &Array1<f64>) -> Array2<f64> {
    let mut dh = Array2::zeros((len, d));
    dh.row_mut(0).assign(g);
    dh
}

/// Fine-tunes the encoder on explicit triplets. Returns the mean loss of
/// every step.
pub fn finetune_similarity(
    state: &mut EncoderState,
    examples: &[TrainExample],
    triplets: &[Triplet],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if triplets.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch == 0 || cfg.margin < 0.0 {
        return Err(Error::Config("finetune: batch must be positive and margin non-negative".into()));
    }
    for t in triplets {
        if [t.anchor, t.positive, t.negative].iter().any(|&i| i >= examples.len()) {
            return Err(Error::Format(format!("triplet {t:?} refers past {} functions", examples.len())));
        }
    }
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    let d = state.config.hidden;
    for step in 1..=cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9));
        let picks = sample(&mut rng, triplets.len(), cfg.batch.min(triplets.len())).into_vec();
        let frozen = &*state;
        let results: Vec<(f64, EncoderState)> = picks
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                let t = triplets[t];
                let mut rng = item_rng(seed, step as u64, i as u64);
                let idx = [t.anchor, t.positive, t.negative];
                let mut inputs = Vec::new();
                let mut traces = Vec::new();
                for &k in &idx {
                    let ex = &examples[k];
                    let input = EncoderInput::new(&ex.seq, &ex.bundle, frozen.config.r_max, cfg.neg_inf);
                    traces.push(encode(&input, frozen, Mode::Train(&mut rng))?);
                    inputs.push(input);
                }
                let out = triplet_loss(traces[0].cls(), traces[1].cls(), traces[2].cls(), cfg.margin);
                let mut grads = frozen.zeros_like();
                if out.loss > 0.0 {
                    for (k, g) in [&out.d_anchor, &out.d_positive, &out.d_negative].into_iter().enumerate() {
                        let dh = cls_grad(inputs[k].len(), d, g);
                        backward(frozen, &inputs[k], &traces[k], &dh, &mut grads)?;
                    }
                }
                Ok((out.loss, grads))
            })
            .collect::<Result<_>>()?;
        let b = results.len() as f64;
        let mut grads = state.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.accumulate(g);
        }
        let mut gs: Vec<_> = grads.params_mut().into_iter().map(|(_, g)| g).collect();
        for g in gs.iter_mut() {
            g.mapv_inplace(|x| x / b);
        }
        clip_global_norm(&mut gs, cfg.optim.clip_norm);
        let lr = learning_rate(cfg.optim.lr, step, cfg.optim.warmup, cfg.steps);
        let refs: Vec<_> = grads.params().into_iter().map(|(_, g)| g).collect();
        opt.step(state.params_mut(), &refs, lr);
        state.check_finite("parameter")?;
        losses.push(loss / b);
    }
    Ok(losses)
}
