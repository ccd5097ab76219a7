use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::ops::{
    affine, affine_backward, gelu, gelu_grad, layer_norm, log_sum_exp, layer_norm_backward, softmax_rows, softmax_rows_backward,
    LnCache,
};
use super::{EncoderState, LayerParams};
use crate::asm::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::mask::MaskBundle;

/// Everything the encoder reads for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<TokenId>,
    /// Additive mask, `0` or a large negative value.
    pub mask: Array2<f64>,
    /// Relative-bias column per pair: `min(R, r_max)`, 0 where `R = 0`.
    pub bias_idx: Array2<usize>,
}

impl EncoderInput {
    pub fn new(seq: &TokenSequence, bundle: &MaskBundle, r_max: usize, neg_inf: f64) -> Self {
        Self::from_parts(seq.tokens.clone(), bundle.additive(neg_inf), &bundle.r, r_max)
    }

    pub fn from_parts(tokens: Vec<TokenId>, mask: Array2<f64>, r: &Array2<u32>, r_max: usize) -> Self {
        EncoderInput {
            tokens,
            mask,
            bias_idx: r.mapv(|d| (d as usize).min(r_max)),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Evaluation disables dropout; training draws dropout masks from the rng.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout(&mut self, shape: (usize, usize), p: f64) -> Option<Array2<f64>> {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep }))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Post-softmax weights per head, before dropout.
    pub weights: Vec<Array2<f64>>,
    pub dropout: Vec<Option<Array2<f64>>>,
    /// Concatenated head outputs.
    pub heads: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub input: Array2<f64>,
    pub attn: AttentionCache,
    pub ln1: LnCache,
    pub z: Array2<f64>,
    pub pre_act: Array2<f64>,
    pub act: Array2<f64>,
    pub ffn_dropout: Option<Array2<f64>>,
    pub ln2: LnCache,
    pub output: Array2<f64>,
}

/// Hidden states and attention weights of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub embedded: Array2<f64>,
    pub blocks: Vec<BlockCache>,
}

impl ForwardTrace {
    /// Final hidden states, `N × d_h`.
    pub fn hidden(&self) -> &Array2<f64> {
        self.blocks.last().map_or(&self.embedded, |b| &b.output)
    }

    /// Hidden states after layer `l` (0 is the embedding output).
    pub fn layer_output(&self, l: usize) -> &Array2<f64> {
        if l == 0 {
            &self.embedded
        } else {
            &self.blocks[l - 1].output
        }
    }

    /// Final `[CLS]` state, used as the function embedding.
    pub fn cls(&self) -> ndarray::ArrayView1<'_, f64> {
        self.hidden().row(0)
    }

    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.blocks[layer].attn.weights[head]
    }
}

/// Token plus absolute position embeddings.
pub fn embed(input: &EncoderInput, state: &EncoderState) -> Result<Array2<f64>> {
    let n = input.len();
    let max_len = state.pos_emb.nrows();
    if n > max_len {
        return Err(Error::SequenceTooLong { len: n, max_len });
    }
    let d = state.config.hidden;
    let mut h = Array2::zeros((n, d));
    for (i, &t) in input.tokens.iter().enumerate() {
        let t = t as usize;
        if t >= state.tok_emb.nrows() {
            return Err(Error::Format(format!("token id {t} outside the vocabulary")));
        }
        let mut row = h.row_mut(i);
        row += &state.tok_emb.row(t);
        row += &state.pos_emb.row(i);
    }
    Ok(h)
}

fn bias_matrix(input: &EncoderInput, table: &Array2<f64>, head: usize) -> Array2<f64> {
    input.bias_idx.mapv(|i| if i == 0 { 0.0 } else { table[[head, i]] })
}

fn attention_forward(
    h: &Array2<f64>,
    input: &EncoderInput,
    p: &LayerParams,
    state: &EncoderState,
    mode: &mut Mode,
) -> (Array2<f64>, AttentionCache) {
    let cfg = &state.config;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let (q, k, v) = (h.dot(&p.wq), h.dot(&p.wk), h.dot(&p.wv));
    let n = h.nrows();
    let mut heads = Array2::zeros((n, cfg.hidden));
    let mut weights = Vec::with_capacity(cfg.heads);
    let mut drops = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let cols = s![.., i * dk..(i + 1) * dk];
        let logits = (q.slice(cols).dot(&k.slice(cols).t()) + bias_matrix(input, &state.rel_bias, i)) * scale
            + &input.mask;
        let a = softmax_rows(&logits);
        let drop = mode.dropout((n, n), cfg.dropout);
        let used = match &drop {
            Some(m) => &a * m,
            None => a.clone(),
        };
        heads.slice_mut(cols).assign(&used.dot(&v.slice(cols)));
        weights.push(a);
        drops.push(drop);
    }
    let out = affine(heads.view(), &p.wo, &p.bo);
    (
        out,
        AttentionCache {
            q,
            k,
            v,
            weights,
            dropout: drops,
            heads,
        },
    )
}

/// Attention sublayer output `Ẑ` of layer `layer`, without dropout.
pub fn rma_attention(h: &Array2<f64>, input: &EncoderInput, layer: usize, state: &EncoderState) -> Array2<f64> {
    attention_forward(h, input, &state.layers[layer], state, &mut Mode::Eval).0
}

fn block_forward(
    h: &Array2<f64>,
    input: &EncoderInput,
    p: &LayerParams,
    state: &EncoderState,
    mode: &mut Mode,
) -> BlockCache {
    let (zhat, attn) = attention_forward(h, input, p, state, mode);
    let (z, ln1) = layer_norm(&(&zhat + h), &p.ln1_g, &p.ln1_b);
    let pre_act = affine(z.view(), &p.w1, &p.b1);
    let act = pre_act.mapv(gelu);
    let mut f = affine(act.view(), &p.w2, &p.b2);
    let ffn_dropout = mode.dropout(f.dim(), state.config.dropout);
    if let Some(m) = &ffn_dropout {
        f *= m;
    }
    let (output, ln2) = layer_norm(&(&f + &z), &p.ln2_g, &p.ln2_b);
    BlockCache {
        input: h.clone(),
        attn,
        ln1,
        z,
        pre_act,
        act,
        ffn_dropout,
        ln2,
        output,
    }
}

/// One transformer block applied to `h`, without dropout.
pub fn transformer_block(h: &Array2<f64>, input: &EncoderInput, layer: usize, state: &EncoderState) -> Array2<f64> {
    block_forward(h, input, &state.layers[layer], state, &mut Mode::Eval).output
}

/// Embeds the input and runs every block.
pub fn encode(input: &EncoderInput, state: &EncoderState, mut mode: Mode) -> Result<ForwardTrace> {
    let n = input.len();
    if input.mask.dim() != (n, n) || input.bias_idx.dim() != (n, n) {
        return Err(Error::Format(format!("mask shape does not match {n} tokens")));
    }
    let embedded = embed(input, state)?;
    let mut blocks: Vec<BlockCache> = Vec::with_capacity(state.layers.len());
    for p in &state.layers {
        let h = blocks.last().map_or(&embedded, |b| &b.output);
        let b = block_forward(h, input, p, state, &mut mode);
        blocks.push(b);
    }
    let trace = ForwardTrace { embedded, blocks };
    if trace.hidden().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "encoder activations".to_string(),
        });
    }
    Ok(trace)
}

fn attention_backward(
    dout: &Array2<f64>,
    cache: &AttentionCache,
    h: &Array2<f64>,
    input: &EncoderInput,
    p: &LayerParams,
    g: &mut LayerParams,
    rel_bias_grad: &mut Array2<f64>,
    state: &EncoderState,
) -> Array2<f64> {
    let cfg = &state.config;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let dheads = affine_backward(cache.heads.view(), &p.wo, dout, &mut g.wo, &mut g.bo);
    let n = h.nrows();
    let mut dq = Array2::zeros((n, cfg.hidden));
    let mut dk_ = Array2::zeros((n, cfg.hidden));
    let mut dv = Array2::zeros((n, cfg.hidden));
    for i in 0..cfg.heads {
        let cols = s![.., i * dk..(i + 1) * dk];
        let a = &cache.weights[i];
        let used = match &cache.dropout[i] {
            Some(m) => a * m,
            None => a.clone(),
        };
        let dho = dheads.slice(cols);
        dv.slice_mut(cols).assign(&used.t().dot(&dho));
        let mut da = dho.dot(&cache.v.slice(cols).t());
        if let Some(m) = &cache.dropout[i] {
            da *= m;
        }
        let dlogits = softmax_rows_backward(a, &da) * scale;
        for ((u, w), &idx) in input.bias_idx.indexed_iter() {
            if idx != 0 {
                rel_bias_grad[[i, idx]] += dlogits[[u, w]];
            }
        }
        dq.slice_mut(cols).assign(&dlogits.dot(&cache.k.slice(cols)));
        dk_.slice_mut(cols).assign(&dlogits.t().dot(&cache.q.slice(cols)));
    }
    g.wq += &h.t().dot(&dq);
    g.wk += &h.t().dot(&dk_);
    g.wv += &h.t().dot(&dv);
    dq.dot(&p.wq.t()) + dk_.dot(&p.wk.t()) + dv.dot(&p.wv.t())
}

/// Reverse pass from the gradient of the final hidden states. Gradients are
/// added into `grads`.
pub fn backward(
    state: &EncoderState,
    input: &EncoderInput,
    trace: &ForwardTrace,
    d_hidden: &Array2<f64>,
    grads: &mut EncoderState,
) -> Result<()> {
    let mut dh = d_hidden.clone();
    for (l, cache) in trace.blocks.iter().enumerate().rev() {
        let p = &state.layers[l];
        let g = &mut grads.layers[l];
        let dx2 = layer_norm_backward(&dh, &cache.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        let mut dz = dx2.clone();
        let mut df = dx2;
        if let Some(m) = &cache.ffn_dropout {
            df *= m;
        }
        let dact = affine_backward(cache.act.view(), &p.w2, &df, &mut g.w2, &mut g.b2);
        let dpre = dact * &cache.pre_act.mapv(gelu_grad);
        dz += &affine_backward(cache.z.view(), &p.w1, &dpre, &mut g.w1, &mut g.b1);
        let dx1 = layer_norm_backward(&dz, &cache.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
        let dinput = attention_backward(
            &dx1,
            &cache.attn,
            &cache.input,
            input,
            p,
            g,
            &mut grads.rel_bias,
            state,
        );
        dh = dx1 + dinput;
    }
    for (i, &t) in input.tokens.iter().enumerate() {
        let row = dh.row(i);
        let mut te = grads.tok_emb.row_mut(t as usize);
        te += &row;
        let mut pe = grads.pos_emb.row_mut(i);
        pe += &row;
    }
    grads.rel_bias.column_mut(0).fill(0.0);
    for (name, p) in grads.params() {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
    }
    Ok(())
}

/// Linear map from hidden states to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl LinearHead {
    pub fn init(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        LinearHead {
            w: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LinearHead {
            w: Array2::zeros(self.w.dim()),
            b: Array2::zeros(self.b.dim()),
        }
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        affine(x, &self.w, &self.b)
    }

    /// Accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut LinearHead) -> Array2<f64> {
        affine_backward(x, &self.w, dy, &mut grad.w, &mut grad.b)
    }

    /// Softmax cross-entropy summed over rows. Returns the loss and the
    /// logit gradient.
    pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
        let probs = softmax_rows(logits);
        let mut loss = 0.0;
        let mut grad = probs.clone();
        for (r, &t) in targets.iter().enumerate() {
            loss += log_sum_exp(logits.row(r)) - logits[[r, t]];
            grad[[r, t]] -= 1.0;
        }
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderState {
        let cfg = EncoderConfig { vocab_size: 12, hidden: 8, heads: 2, ffn: 16, max_len: 16, layers: 2, ..Default::default() };
        EncoderState::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn open_input(n: usize) -> EncoderInput {
        EncoderInput::from_parts((0..n as u32).map(|t| t % 12).collect(), Array2::zeros((n, n)), &Array2::zeros((n, n)), 8)
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let mut s = tiny();
        s.tok_emb.fill(0.0);
        s.pos_emb.fill(0.0);
        assert!(embed(&open_input(5), &s).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn position_perturbation_is_local() {
        let mut s = tiny();
        let before = embed(&open_input(5), &s).unwrap();
        s.pos_emb[[2, 3]] += 1.0;
        let after = embed(&open_input(5), &s).unwrap();
        for r in 0..5 {
            assert_eq!(before.row(r) == after.row(r), r != 2);
        }
    }

    #[test]
    fn too_long_is_an_error() {
        assert!(matches!(encode(&open_input(17), &tiny(), Mode::Eval), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn self_only_attention_copies_values() {
        let s = tiny();
        let n = 4;
        let mask = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { -1e9 });
        let input = EncoderInput::from_parts(vec![5, 6, 7, 8], mask, &Array2::zeros((n, n)), 8);
        let h = embed(&input, &s).unwrap();
        let (_, cache) = attention_forward(&h, &input, &s.layers[0], &s, &mut Mode::Eval);
        let v = h.dot(&s.layers[0].wv);
        assert!((cache.heads - v).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn deterministic_forward() {
        let s = tiny();
        let a = encode(&open_input(6), &s, Mode::Eval).unwrap();
        let b = encode(&open_input(6), &s, Mode::Eval).unwrap();
        assert_eq!(a.hidden(), b.hidden());
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = encode(&open_input(6), &s, Mode::Train(&mut r1)).unwrap();
        let b = encode(&open_input(6), &s, Mode::Train(&mut r2)).unwrap();
        assert_eq!(a.hidden(), b.hidden());
    }

    #[test]
    fn zero_upstream_gradient() {
        let s = tiny();
        let input = open_input(6);
        let trace = encode(&input, &s, Mode::Eval).unwrap();
        let mut g = s.zeros_like();
        backward(&s, &input, &trace, &Array2::zeros((6, 8)), &mut g).unwrap();
        assert!(g.params().iter().all(|(_, p)| p.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn cross_entropy_limits() {
        let logits = Array2::zeros((3, 36));
        let (loss, _) = LinearHead::cross_entropy(&logits, &[0, 5, 35]);
        assert!((loss - 3.0 * 36f64.ln()).abs() < 1e-12);
        let mut sharp = Array2::from_elem((1, 4), -1e4);
        sharp[[0, 2]] = 1e4;
        assert_eq!(LinearHead::cross_entropy(&sharp, &[2]).0, 0.0);
    }
}
