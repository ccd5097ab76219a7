use std::collections::HashMap;
use std::fmt::Write as _;

use super::parse::{parse_listing, Function};
use super::tokenize::instruction_tokens;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const INST: &str = "<INST>";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const IMM16: &str = "<imm16>";
pub const IMM32: &str = "<imm32>";
pub const IMM64: &str = "<imm64>";
pub const ADDR: &str = "<addr>";

/// Reserved tokens, in id order. These ids never change.
pub const RESERVED: [&str; 9] = [PAD, CLS, INST, MASK, UNK, IMM16, IMM32, IMM64, ADDR];

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const CLS_ID: TokenId = 1;
pub const INST_ID: TokenId = 2;
pub const MASK_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;

/// Bijection between token strings and ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    /// Builds a vocabulary from listing texts. Tokens are numbered in order of
    /// first appearance; those seen fewer than `min_freq` times are left out
    /// and map to `[UNK]`.
    pub fn build(corpus: &[&str], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut functions = Vec::new();
        for listing in corpus {
            functions.extend(parse_listing(listing)?);
        }
        Ok(Self::from_functions(&functions, min_freq))
    }

    pub fn from_functions(functions: &[Function], min_freq: usize) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for f in functions {
            for inst in &f.instructions {
                for tok in instruction_tokens(inst) {
                    let c = counts.entry(tok.clone()).or_insert(0);
                    if *c == 0 {
                        order.push(tok);
                    }
                    *c += 1;
                }
            }
        }
        let mut vocab = Self::reserved_only();
        for tok in order {
            if counts[&tok] >= min_freq.max(1) {
                vocab.push(&tok);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids that are not one of the reserved tokens. Random MLM replacements
    /// draw from these.
    pub fn ordinary_ids(&self) -> std::ops::Range<TokenId> {
        RESERVED.len() as TokenId..self.tokens.len() as TokenId
    }

    /// `token<TAB>id` per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries: Vec<(TokenId, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Syntax {
                line: lineno + 1,
                message: "expected `token<TAB>id`".into(),
            })?;
            let id: TokenId = id.trim().parse().map_err(|_| Error::Syntax {
                line: lineno + 1,
                message: format!("bad id `{id}`"),
            })?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (expected, (id, tok)) in entries.into_iter().enumerate() {
            if id as usize != expected {
                return Err(Error::Format(format!("vocabulary ids are not dense at {expected}")));
            }
            if vocab.ids.contains_key(&tok) {
                return Err(Error::Format(format!("token `{tok}` appears twice")));
            }
            vocab.push(&tok);
        }
        for (id, t) in RESERVED.iter().enumerate() {
            if vocab.tokens.get(id).map(String::as_str) != Some(*t) {
                return Err(Error::Format(format!("reserved token `{t}` must have id {id}")));
            }
        }
        Ok(vocab)
    }
}
