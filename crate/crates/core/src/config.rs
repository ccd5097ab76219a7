//! Run configuration: every tunable of the pipeline in one TOML document.
//!
//! Missing tables and keys fall back to their defaults; unknown keys are
//! rejected.
//!
//! ```
//! use depattn::config::RunConfig;
//!
//! let cfg = RunConfig::from_toml("seed = 3\n[model]\nlayers = 1\n").unwrap();
//! assert_eq!((cfg.seed, cfg.model.layers, cfg.model.r_max), (3, 1, 8));
//! assert!(RunConfig::from_toml("[model]\nlayer = 1\n").is_err());
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::closure::DEFAULT_NODE_CAP;
use crate::deps::{AnalysisOptions, UnsupportedPolicy};
use crate::downstream::{FinetuneConfig, MlcConfig, TypeTrainConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::pretrain::PretrainConfig;
use crate::synth::SynthConfig;

/// Def/use model switches exposed to configuration files.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub flags: bool,
    pub address_uses: bool,
    pub unsupported: UnsupportedPolicy,
}

impl AnalysisConfig {
    pub fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            flags: self.flags,
            address_uses: self.address_uses,
            unsupported: self.unsupported,
            ..AnalysisOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub node_cap: usize,
    pub vocab_min_freq: usize,
    /// Candidates per similarity query, the true match included.
    pub pool_size: usize,
    pub analysis: AnalysisConfig,
    /// `vocab_size` is taken from the corpus vocabulary.
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub synth: SynthConfig,
    pub finetune: FinetuneConfig,
    pub types: TypeTrainConfig,
    pub mlc: MlcConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            node_cap: DEFAULT_NODE_CAP,
            vocab_min_freq: 1,
            pool_size: 10,
            analysis: AnalysisConfig::default(),
            model: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            synth: SynthConfig::default(),
            finetune: FinetuneConfig::default(),
            types: TypeTrainConfig::default(),
            mlc: MlcConfig::default(),
        }
    }
}

fn check_optim(section: &str, steps: usize, batch: usize, o: &OptimConfig) -> Result<()> {
    if steps == 0 || batch == 0 {
        return Err(Error::Config(format!("{section}: steps and batch must be positive")));
    }
    let positive = |x: f64| x > 0.0 && x.is_finite();
    if !positive(o.lr) || !positive(o.clip_norm) || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
        return Err(Error::Config(format!("{section}: lr and clip_norm must be positive, weight_decay non-negative")));
    }
    if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !positive(o.eps) {
        return Err(Error::Config(format!("{section}: betas must be in [0, 1) and eps positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(1);
        model.validate()?;
        if model.max_len < 2 {
            return fail("model.max_len must leave room for [CLS] and one token");
        }
        if self.node_cap == 0 || self.vocab_min_freq == 0 {
            return fail("node_cap and vocab_min_freq must be positive");
        }
        if self.pool_size < 2 {
            return fail("pool_size must be at least 2");
        }
        self.pretrain.validate()?;
        self.synth.validate()?;
        check_optim("pretrain", self.pretrain.steps, self.pretrain.batch, &self.pretrain.optim)?;
        check_optim("finetune", self.finetune.steps, self.finetune.batch, &self.finetune.optim)?;
        check_optim("types", self.types.steps, self.types.batch, &self.types.optim)?;
        check_optim("mlc", self.mlc.steps, self.mlc.batch, &self.mlc.optim)?;
        if self.finetune.margin < 0.0 {
            return fail("finetune.margin must be non-negative");
        }
        if self.mlc.forefront_k == 0 {
            return fail("mlc.forefront_k must be positive");
        }
        for (name, v) in [("pretrain", self.pretrain.neg_inf), ("finetune", self.finetune.neg_inf), ("types", self.types.neg_inf)] {
            if v >= -1e4 {
                return Err(Error::Config(format!("{name}.neg_inf must be a large negative number")));
            }
        }
        Ok(())
    }

    /// Encoder shape for a vocabulary of `vocab_size` tokens.
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.model.clone()
        }
    }
}
