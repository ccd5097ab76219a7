//! Listing parser, vocabulary and tokenizer.
//!
//! A listing is plain text: `.func <name>` opens a function, `<label>:` lines
//! mark branch targets, every other non-blank line is one Intel-syntax
//! instruction and `#` starts a comment.

mod parse;
mod register;
mod tokenize;
pub mod vocab;

pub use parse::{parse_listing, Function, Instruction, MemoryOperand, Operand, PtrSize};
pub use register::{Gpr, Register, Width};
pub use tokenize::{immediate_token, instruction_tokens, tokenize, TokenSequence};
pub use vocab::{TokenId, Vocabulary};
