//! Transformer encoder whose attention is restricted by a dependence mask
//! and biased by clamped dependence distances between `<INST>` tokens.
//!
//! Each block computes, per head `i`,
//! `softmax((Q_i K_iᵀ + B_i) / sqrt(d_k) + M) V_i`, concatenates the heads,
//! projects with `W^o`, and applies post-layer-norm residuals around the
//! attention and feed-forward sublayers. `B_i[u][v] = β_i(min(R[u][v], r_max))`
//! for connected `<INST>` pairs and 0 elsewhere.
//!
//! Forward and backward passes are written out by hand over `ndarray`
//! matrices in `f64`.

mod checkpoint;
mod forward;
pub mod ops;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use forward::{
    backward, encode, rma_attention, transformer_block, AttentionCache, BlockCache, EncoderInput, ForwardTrace,
    LinearHead, Mode,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub r_max: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale model.
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            r_max: 8,
            max_len: 512,
            vocab_size: 0,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// Base-size reference model: 12 blocks, 768 hidden, 12 heads.
    pub fn reference(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 12,
            heads: 12,
            hidden: 768,
            ffn: 3072,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail("hidden size must be a positive multiple of the head count");
        }
        if self.r_max < 1 {
            return fail("r_max must be at least 1");
        }
        if self.layers == 0 || self.ffn == 0 || self.max_len == 0 {
            return fail("layers, ffn and max_len must be positive");
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Parameters of one transformer block. Biases and layer-norm vectors are
/// stored as `1×n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
}

/// All encoder parameters, including the masked-token head. Gradients use
/// the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// `H × (r_max + 1)`; column 0 stands for "no bias" and stays 0.
    pub rel_bias: Array2<f64>,
    pub mlm: LinearHead,
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl EncoderState {
    /// Normal(0, init_std) embeddings and weights, layer-norm gain 1 and
    /// shift 0, zero biases and zero relative-bias tables.
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, s) = (config.hidden, config.ffn, config.init_std);
        let tok_emb = normal(rng, (config.vocab_size, d), s);
        let pos_emb = normal(rng, (config.max_len, d), s);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: normal(rng, (d, d), s),
                wk: normal(rng, (d, d), s),
                wv: normal(rng, (d, d), s),
                wo: normal(rng, (d, d), s),
                bo: Array2::zeros((1, d)),
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                w1: normal(rng, (d, f), s),
                b1: Array2::zeros((1, f)),
                w2: normal(rng, (f, d), s),
                b2: Array2::zeros((1, d)),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
            })
            .collect();
        Ok(EncoderState {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            rel_bias: Array2::zeros((config.heads, config.r_max + 1)),
            mlm: LinearHead::init(d, config.vocab_size, s, rng),
        })
    }

    /// All parameters zero, including layer-norm gains.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(Self::init(config, &mut rng)?.zeros_like())
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, p) in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    /// Parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &p.wq),
                ("wk", &p.wk),
                ("wv", &p.wv),
                ("wo", &p.wo),
                ("bo", &p.bo),
                ("ln1_g", &p.ln1_g),
                ("ln1_b", &p.ln1_b),
                ("w1", &p.w1),
                ("b1", &p.b1),
                ("w2", &p.w2),
                ("b2", &p.b2),
                ("ln2_g", &p.ln2_g),
                ("ln2_b", &p.ln2_b),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("rel_bias".to_string(), &self.rel_bias));
        out.push(("mlm.w".to_string(), &self.mlm.w));
        out.push(("mlm.b".to_string(), &self.mlm.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, p) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("wq", &mut p.wq),
                ("wk", &mut p.wk),
                ("wv", &mut p.wv),
                ("wo", &mut p.wo),
                ("bo", &mut p.bo),
                ("ln1_g", &mut p.ln1_g),
                ("ln1_b", &mut p.ln1_b),
                ("w1", &mut p.w1),
                ("b1", &mut p.b1),
                ("w2", &mut p.w2),
                ("b2", &mut p.b2),
                ("ln2_g", &mut p.ln2_g),
                ("ln2_b", &mut p.ln2_b),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("rel_bias".to_string(), &mut self.rel_bias));
        out.push(("mlm.w".to_string(), &mut self.mlm.w));
        out.push(("mlm.b".to_string(), &mut self.mlm.b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &EncoderState) {
        for ((_, a), (_, b)) in self.params_mut().into_iter().zip(other.params()) {
            *a += b;
        }
    }

    /// Errors with the parameter name at the first non-finite entry.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, p) in self.params() {
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("{what} {name}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        let ok = EncoderConfig { vocab_size: 10, ..Default::default() };
        ok.validate().unwrap();
        assert!(EncoderConfig { heads: 3, ..ok.clone() }.validate().is_err());
        assert!(EncoderConfig { r_max: 0, ..ok.clone() }.validate().is_err());
        assert!(EncoderConfig { vocab_size: 0, ..ok }.validate().is_err());
        let r = EncoderConfig::reference(50_000);
        assert_eq!((r.layers, r.hidden, r.heads, r.r_max), (12, 768, 12, 8));
    }

    #[test]
    fn init_shapes() {
        let cfg = EncoderConfig { vocab_size: 20, hidden: 16, heads: 2, ffn: 32, max_len: 64, ..Default::default() };
        let s = EncoderState::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.rel_bias.dim(), (2, 9));
        assert!(s.rel_bias.iter().all(|&b| b == 0.0));
        assert_eq!(s.layers[1].ln2_g, Array2::<f64>::ones((1, 16)));
        assert_eq!(s.params().len(), 2 + 2 * 13 + 3);
        let names: Vec<_> = s.params().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<_> = s.clone().params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        let std = (s.tok_emb.mapv(|x| x * x).sum() / s.tok_emb.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.003);
    }
}
