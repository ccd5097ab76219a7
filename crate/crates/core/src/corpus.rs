//! Corpus of analyzed functions with an on-disk cache of per-function
//! artifacts.
//!
//! Each cache file records the SHA-256 of the function's listing text and
//! the settings that produced it. A file whose recorded hash or listing
//! differs from the current one is stale and gets recomputed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asm::{parse_listing, tokenize, Function, TokenSequence, Vocabulary};
use crate::closure::{connectivity, ConnectivityGraph};
use crate::deps::{dependence_graph, AnalysisOptions, DependenceGraph};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::mask::{build_bundle, MaskBundle};
use crate::pretrain::TrainExample;

const CACHE_VERSION: &str = "depattn-cache-1";

/// Settings that determine every cached artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub analysis: AnalysisOptions,
    pub max_len: usize,
    pub node_cap: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub name: String,
    pub listing: String,
    /// Hex SHA-256 of listing, settings and vocabulary.
    pub hash: String,
    pub seq: TokenSequence,
    /// Over every instruction, including any cut by `max_len`.
    pub dep: DependenceGraph,
    /// Over the instructions kept in `seq`.
    pub con: ConnectivityGraph,
    pub bundle: MaskBundle,
}

impl CorpusEntry {
    pub fn example(&self) -> TrainExample {
        TrainExample {
            name: self.name.clone(),
            seq: self.seq.clone(),
            con: self.con.clone(),
            bundle: self.bundle.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub stale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub settings: CorpusSettings,
    pub entries: Vec<CorpusEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: String,
    name: String,
    hash: String,
    listing: String,
    seq: TokenSequence,
    deps: serde_json::Value,
    connectivity: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of everything but the listing, shared by all functions.
fn context_digest(vocab: &Vocabulary, settings: &CorpusSettings) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.as_bytes());
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    h.update(vocab.to_tsv().as_bytes());
    h.finalize().to_vec()
}

/// Hex SHA-256 of a function's listing under the given context digest.
pub fn content_hash(context: &[u8], listing: &str) -> String {
    let mut h = Sha256::new();
    h.update(context);
    h.update(listing.as_bytes());
    hex(&h.finalize())
}

/// Cache file name: the function name made filesystem-safe, plus a short
/// digest of the raw name so that distinct names never collide.
fn cache_path(dir: &Path, name: &str) -> PathBuf {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let tag = hex(&Sha256::digest(name.as_bytes())[..4]);
    dir.join(format!("{safe}-{tag}.json"))
}

/// Parses a listing, naming the enclosing function in syntax errors.
pub fn parse_with_context(text: &str) -> Result<Vec<Function>> {
    parse_listing(text).map_err(|e| {
        let line = match &e {
            Error::Syntax { line, .. } | Error::UnknownOperand { line, .. } => *line,
            _ => return e,
        };
        let header = text
            .lines()
            .take(line)
            .filter_map(|l| l.split('#').next()?.trim().strip_prefix(".func").map(|n| n.trim().to_string()))
            .last();
        match header {
            Some(name) if !name.is_empty() => e.in_function(&name, None),
            _ => e,
        }
    })
}

pub fn read_listing(path: &Path) -> Result<Vec<Function>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_with_context(&text)
}

/// Tokens, dependences and connectivity of one function, with analysis
/// errors tagged by function and line.
pub fn analyze(func: &Function, vocab: &Vocabulary, settings: &CorpusSettings) -> Result<(TokenSequence, DependenceGraph, ConnectivityGraph)> {
    let tag = |e: Error| {
        let line = match &e {
            Error::UnsupportedMnemonic { index, .. } => func.instructions.get(*index).map(|i| i.line),
            _ => None,
        };
        e.in_function(&func.name, line)
    };
    let seq = tokenize(&func.instructions, vocab, settings.max_len);
    let dep = dependence_graph(func, &settings.analysis).map_err(tag)?;
    let con = connectivity(&dep.restricted(seq.num_instructions()), settings.node_cap).map_err(tag)?;
    Ok((seq, dep, con))
}

enum Lookup {
    Hit(Box<CorpusEntry>),
    Miss,
    Stale,
}

fn lookup(path: &Path, name: &str, hash: &str, listing: &str) -> Lookup {
    let Ok(bytes) = std::fs::read(path) else {
        return Lookup::Miss;
    };
    let Ok(file) = serde_json::from_slice::<CacheFile>(&bytes) else {
        return Lookup::Stale;
    };
    if file.version != CACHE_VERSION || file.name != name || file.hash != hash || file.listing != listing {
        return Lookup::Stale;
    }
    let (Ok(dep), Ok(con)) = (DependenceGraph::from_json(&file.deps), ConnectivityGraph::from_json(&file.connectivity)) else {
        return Lookup::Stale;
    };
    if con.nodes() != file.seq.num_instructions() {
        return Lookup::Stale;
    }
    let bundle = build_bundle(&file.seq, &con);
    Lookup::Hit(Box::new(CorpusEntry {
        name: file.name,
        listing: file.listing,
        hash: file.hash,
        seq: file.seq,
        dep,
        con,
        bundle,
    }))
}

impl Corpus {
    /// Analyzes every function in parallel, reusing cache files under
    /// `cache` whose hash matches and rewriting the rest.
    pub fn build(functions: &[Function], vocab: Vocabulary, settings: CorpusSettings, cache: Option<&Path>) -> Result<(Corpus, CacheStats)> {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(f) = functions.iter().find(|f| !seen.insert(f.name.as_str())) {
            return Err(Error::Format(format!("duplicate function name `{}`", f.name)));
        }
        let context = context_digest(&vocab, &settings);
        let results: Vec<(CorpusEntry, Option<bool>)> = functions
            .par_iter()
            .map(|func| {
                let listing = func.to_listing();
                let hash = content_hash(&context, &listing);
                let path = cache.map(|d| cache_path(d, &func.name));
                let stale = match path.as_deref().map(|p| lookup(p, &func.name, &hash, &listing)) {
                    Some(Lookup::Hit(entry)) => return Ok((*entry, None)),
                    Some(Lookup::Stale) => true,
                    _ => false,
                };
                let (seq, dep, con) = analyze(func, &vocab, &settings)?;
                if let Some(p) = &path {
                    let file = CacheFile {
                        version: CACHE_VERSION.into(),
                        name: func.name.clone(),
                        hash: hash.clone(),
                        listing: listing.clone(),
                        seq: seq.clone(),
                        deps: dep.to_json(),
                        connectivity: con.to_json(),
                    };
                    atomic_write(p, &serde_json::to_vec(&file)?)?;
                }
                let bundle = build_bundle(&seq, &con);
                let entry = CorpusEntry {
                    name: func.name.clone(),
                    listing,
                    hash,
                    seq,
                    dep,
                    con,
                    bundle,
                };
                Ok((entry, Some(stale)))
            })
            .collect::<Result<_>>()?;
        let mut stats = CacheStats::default();
        let mut entries = Vec::with_capacity(results.len());
        for (entry, fresh) in results {
            match fresh {
                None => stats.hits += 1,
                Some(true) => stats.stale += 1,
                Some(false) => stats.misses += 1,
            }
            entries.push(entry);
        }
        Ok((Corpus { vocab, settings, entries }, stats))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn examples(&self) -> Vec<TrainExample> {
        self.entries.iter().map(CorpusEntry::example).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Index of `name`, or a format error naming the missing function.
    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Format(format!("function `{name}` is not in the corpus")))
    }
}
