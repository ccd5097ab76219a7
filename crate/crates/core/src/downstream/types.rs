use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward, encode, EncoderInput, EncoderState, ForwardTrace, LinearHead, Mode};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, learning_rate, AdamW, OptimConfig};
use crate::pretrain::{eligible_positions, item_rng, TrainExample};

pub const NO_ACCESS: &str = "no-access";

/// Type labels with `no-access` at id 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeLabelSet {
    labels: Vec<String>,
}

impl TypeLabelSet {
    pub const NO_ACCESS_ID: usize = 0;

    /// `no-access` plus the 35 types of [`crate::synth::TYPES_BY_WIDTH`].
    pub fn standard() -> Self {
        let mut labels = vec![NO_ACCESS.to_string()];
        for (_, names) in crate::synth::TYPES_BY_WIDTH {
            labels.extend(names.iter().map(|s| s.to_string()));
        }
        TypeLabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }
}

/// Dense targets for every eligible position of an example: the listed
/// positions carry their label, all others are `no-access`.
pub fn dense_type_targets(
    ex: &TrainExample,
    sparse: &[(usize, String)],
    set: &TypeLabelSet,
) -> Result<Vec<(usize, usize)>> {
    let mut given = BTreeMap::new();
    for (pos, label) in sparse {
        let id = set
            .id(label)
            .ok_or_else(|| Error::Format(format!("{}: unknown type label `{label}`", ex.name)))?;
        given.insert(*pos, id);
    }
    let eligible = eligible_positions(&ex.seq);
    if let Some(p) = given.keys().find(|p| !eligible.contains(p)) {
        return Err(Error::Format(format!("{}: position {p} is not a labelable token", ex.name)));
    }
    Ok(eligible
        .into_iter()
        .map(|p| (p, given.get(&p).copied().unwrap_or(TypeLabelSet::NO_ACCESS_ID)))
        .collect())
}

/// Per-token logits, argmax predictions and the summed cross-entropy over
/// `targets`. Returns the hidden-state gradient of the loss; head gradients
/// are added to `head_grad`.
pub struct TypeHeadOutput {
    pub predictions: Vec<usize>,
    pub loss: f64,
    pub d_hidden: Array2<f64>,
}

pub fn type_inference_head(
    trace: &ForwardTrace,
    targets: &[(usize, usize)],
    head: &LinearHead,
    head_grad: &mut LinearHead,
) -> TypeHeadOutput {
    let h = trace.hidden();
    let mut d_hidden = Array2::zeros(h.dim());
    if targets.is_empty() {
        return TypeHeadOutput {
            predictions: Vec::new(),
            loss: 0.0,
            d_hidden,
        };
    }
    let pos: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let labels: Vec<usize> = targets.iter().map(|t| t.1).collect();
    let x = h.select(Axis(0), &pos);
    let logits = head.forward(x.view());
    let predictions = logits
        .rows()
        .into_iter()
        .map(|r| (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
        .collect();
    let (loss, dlogits) = LinearHead::cross_entropy(&logits, &labels);
    let dx = head.backward(x.view(), &dlogits, head_grad);
    for (r, &p) in pos.iter().enumerate() {
        let mut row = d_hidden.row_mut(p);
        row += &dx.row(r);
    }
    TypeHeadOutput {
        predictions,
        loss,
        d_hidden,
    }
}

/// Precision, recall and F1 of type predictions. A token predicted as some
/// type is a true positive when that type is right and a false positive
/// otherwise; a typed token predicted `no-access` is a false negative.
///
/// ```
/// use depattn::downstream::type_prf;
///
/// // 8 right, 2 wrong types, 2 typed tokens missed.
/// let gold = [vec![1; 8], vec![2; 2], vec![3; 2]].concat();
/// let pred = [vec![1; 8], vec![4; 2], vec![0; 2]].concat();
/// let (p, r, f1) = type_prf(&pred, &gold, 0);
/// assert!((p - 0.8).abs() < 1e-12 && (r - 0.8).abs() < 1e-12 && (f1 - 0.8).abs() < 1e-12);
/// ```
pub fn type_prf(predictions: &[usize], gold: &[usize], no_access: usize) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in predictions.iter().zip(gold) {
        if p != no_access {
            if p == g {
                tp += 1;
            } else {
                fp += 1;
            }
        } else if g != no_access {
            fn_ += 1;
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let p = ratio(tp, fp);
    let r = ratio(tp, fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// One example with dense type targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeExample {
    pub example: TrainExample,
    pub targets: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub neg_inf: f64,
    pub optim: OptimConfig,
}

impl Default for TypeTrainConfig {
    fn default() -> Self {
        TypeTrainConfig {
            steps: 300,
            batch: 8,
            neg_inf: crate::mask::NEG_INF,
            optim: OptimConfig {
                lr: 1e-3,
                warmup: 30,
                ..Default::default()
            },
        }
    }
}

/// Fine-tunes encoder and head jointly. Each sequence contributes its mean
/// cross-entropy; the batch loss is the mean over sequences. Returns the
/// loss of every step.
pub fn train_type_head(
    state: &mut EncoderState,
    head: &mut LinearHead,
    data: &[TypeExample],
    cfg: &TypeTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch == 0 {
        return Err(Error::Config("train-type: batch must be positive".into()));
    }
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut pick_rng = item_rng(seed ^ 0x7E9E, step as u64, u64::MAX);
        let picks = sample(&mut pick_rng, data.len(), cfg.batch.min(data.len())).into_vec();
        let (enc, hd) = (&*state, &*head);
        let results: Vec<(f64, EncoderState, LinearHead)> = picks
            .par_iter()
            .enumerate()
            .map(|(i, &k)| {
                let te = &data[k];
                let mut rng = item_rng(seed, step as u64, i as u64);
                let input = EncoderInput::new(&te.example.seq, &te.example.bundle, enc.config.r_max, cfg.neg_inf);
                let trace = encode(&input, enc, Mode::Train(&mut rng))?;
                let mut hg = hd.zeros_like();
                let mut out = type_inference_head(&trace, &te.targets, hd, &mut hg);
                let n = te.targets.len().max(1) as f64;
                out.d_hidden.mapv_inplace(|x| x / n);
                hg.w.mapv_inplace(|x| x / n);
                hg.b.mapv_inplace(|x| x / n);
                let mut g = enc.zeros_like();
                backward(enc, &input, &trace, &out.d_hidden, &mut g)?;
                Ok((out.loss / n, g, hg))
            })
            .collect::<Result<_>>()?;
        let b = results.len() as f64;
        let mut g_enc = state.zeros_like();
        let mut g_head = head.zeros_like();
        let mut loss = 0.0;
        for (l, g, hg) in &results {
            loss += l;
            g_enc.accumulate(g);
            g_head.w += &hg.w;
            g_head.b += &hg.b;
        }
        let mut gs: Vec<&mut Array2<f64>> = g_enc.params_mut().into_iter().map(|(_, g)| g).collect();
        gs.push(&mut g_head.w);
        gs.push(&mut g_head.b);
        for g in gs.iter_mut() {
            g.mapv_inplace(|x| x / b);
        }
        clip_global_norm(&mut gs, cfg.optim.clip_norm);
        let lr = learning_rate(cfg.optim.lr, step, cfg.optim.warmup, cfg.steps);
        let mut params = state.params_mut();
        params.push(("type.w".into(), &mut head.w));
        params.push(("type.b".into(), &mut head.b));
        let mut refs: Vec<&Array2<f64>> = g_enc.params().into_iter().map(|(_, g)| g).collect();
        refs.push(&g_head.w);
        refs.push(&g_head.b);
        opt.step(params, &refs, lr);
        state.check_finite("parameter")?;
        losses.push(loss / b);
    }
    Ok(losses)
}

/// Predictions and gold labels of every target position, concatenated in
/// example order.
pub fn predict_types(state: &EncoderState, head: &LinearHead, data: &[TypeExample], neg_inf: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let per: Vec<(Vec<usize>, Vec<usize>)> = data
        .par_iter()
        .map(|te| {
            let input = EncoderInput::new(&te.example.seq, &te.example.bundle, state.config.r_max, neg_inf);
            let trace = encode(&input, state, Mode::Eval)?;
            let mut scratch = head.zeros_like();
            let out = type_inference_head(&trace, &te.targets, head, &mut scratch);
            Ok((out.predictions, te.targets.iter().map(|t| t.1).collect()))
        })
        .collect::<Result<_>>()?;
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for (p, g) in per {
        pred.extend(p);
        gold.extend(g);
    }
    Ok((pred, gold))
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64
}
