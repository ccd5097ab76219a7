//! Dependence-regularized attention for x86-64 assembly.
//!
//! [`asm`] parses and tokenizes listings, [`deps`] computes instruction
//! dependences, [`closure`] turns them into connectivity distances, and
//! [`mask`] builds the attention masks consumed by [`encoder`].
//! [`pretrain`] and [`downstream`] train and apply the encoder;
//! [`commands`] implements the command-line workflows.

pub mod asm;
pub mod closure;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod deps;
pub mod downstream;
pub mod encoder;
mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod mask;
pub mod optim;
pub mod pretrain;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tokenization.md")]
    pub struct Tokenization;
    #[doc = include_str!("../../../book/src/dependences.md")]
    pub struct Dependences;
    #[doc = include_str!("../../../book/src/connectivity.md")]
    pub struct Connectivity;
    #[doc = include_str!("../../../book/src/masks.md")]
    pub struct Masks;
    #[doc = include_str!("../../../book/src/encoder.md")]
    pub struct Encoder;
    #[doc = include_str!("../../../book/src/pretraining.md")]
    pub struct Pretraining;
    #[doc = include_str!("../../../book/src/downstream.md")]
    pub struct Downstream;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
