//! File-to-file implementations of the command-line subcommands.
//!
//! Every command reads its inputs from paths, writes its outputs atomically
//! and returns a small serializable report. Output bytes depend only on the
//! inputs, the configuration and the seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::asm::Vocabulary;
use crate::config::RunConfig;
use crate::corpus::{read_listing, CacheStats, Corpus, CorpusSettings};
use crate::downstream::{
    dense_type_targets, embed_all, finetune_similarity, lrap, lrl, macro_roc_auc, mrr, predict_mlc, predict_types,
    recall_at_k, sim_queries, train_mlc as fit_mlc, train_type_head, type_prf, accuracy, FunctionEmbedding, MlcExample, MlcModel,
    MultiLabelBatch, Triplet, TypeExample, TypeLabelSet,
};
use crate::encoder::{load_checkpoint, save_checkpoint, Checkpoint, EncoderState, LinearHead};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use crate::mask::sparse_json;
use crate::pretrain::{mdm_accuracy, metrics_csv, pretrain as run_pretrain};
use crate::synth::{mlc_samples, synthesize, type_labels, MlcSample};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CONFIG_FILE: &str = "config.toml";

/// Last artifact written by `pipeline`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Tokenize,
    Deps,
    Connectivity,
    Mask,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokenize" => Ok(Stage::Tokenize),
            "deps" => Ok(Stage::Deps),
            "connectivity" => Ok(Stage::Connectivity),
            "mask" => Ok(Stage::Mask),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Named triplet as stored in `sim.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Sparse type labels of one function as stored in `types.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeRecord {
    pub function: String,
    pub labels: Vec<(usize, String)>,
}

/// Variant provenance as stored in `variants.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub source: String,
    pub variant: String,
    pub perm: Vec<usize>,
    pub renaming: Vec<(String, String)>,
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l:.8}", i + 1).expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

fn settings(cfg: &RunConfig) -> CorpusSettings {
    CorpusSettings {
        analysis: cfg.analysis.options(),
        max_len: cfg.model.max_len,
        node_cap: cfg.node_cap,
    }
}

fn load_corpus(cfg: &RunConfig, listing: &Path, vocab: Option<Vocabulary>, cache: Option<&Path>) -> Result<(Corpus, CacheStats)> {
    let functions = read_listing(listing)?;
    let vocab = vocab.unwrap_or_else(|| Vocabulary::from_functions(&functions, cfg.vocab_min_freq));
    Corpus::build(&functions, vocab, settings(cfg), cache)
}

/// Encoder, vocabulary and the raw checkpoint of a model directory.
pub struct Model {
    pub state: EncoderState,
    pub vocab: Vocabulary,
    pub checkpoint: Checkpoint,
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let checkpoint = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let vocab = Vocabulary::from_tsv(&std::fs::read_to_string(dir.join(VOCAB_FILE))?)?;
    let state = checkpoint.state()?;
    if state.config.vocab_size != vocab.len() {
        return Err(Error::Format(format!(
            "checkpoint expects {} tokens, vocabulary has {}",
            state.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(Model { state, vocab, checkpoint })
}

fn save_model<'a>(
    dir: &Path,
    cfg: &RunConfig,
    state: &EncoderState,
    vocab: &Vocabulary,
    extra: impl IntoIterator<Item = (String, &'a Array2<f64>)>,
) -> Result<()> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &Checkpoint::new(state, extra))?;
    atomic_write(&dir.join(VOCAB_FILE), vocab.to_tsv().as_bytes())?;
    // Thread count does not affect results, so it is left out.
    let saved = RunConfig { threads: 0, ..cfg.clone() };
    atomic_write(&dir.join(CONFIG_FILE), saved.to_toml().as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub functions: usize,
    pub tokens: usize,
    pub dependence_edges: usize,
    pub connectivity_edges: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub cache_stale: usize,
    pub outputs: Vec<PathBuf>,
}

/// Tokenizes, analyzes and masks a listing, writing one JSONL file per
/// stage up to `stop` under `out`. Per-function artifacts are cached in
/// `out/cache`.
pub fn pipeline(cfg: &RunConfig, listing: &Path, out: &Path, stop: Stage) -> Result<PipelineReport> {
    let (corpus, stats) = load_corpus(cfg, listing, None, Some(&out.join("cache")))?;
    let mut outputs = vec![out.join(VOCAB_FILE)];
    atomic_write(&outputs[0], corpus.vocab.to_tsv().as_bytes())?;
    let mut emit = |file: &str, rows: Vec<serde_json::Value>| -> Result<()> {
        let p = out.join(file);
        write_jsonl(&p, &rows)?;
        outputs.push(p);
        Ok(())
    };
    let e = &corpus.entries;
    emit(
        "tokens.jsonl",
        e.iter()
            .map(|x| {
                serde_json::json!({
                    "name": x.name, "tokens": x.seq.tokens, "surface": x.seq.surface,
                    "inst_positions": x.seq.inst_positions,
                })
            })
            .collect(),
    )?;
    let with_name = |name: &str, mut v: serde_json::Value| {
        v.as_object_mut().expect("object").insert("name".into(), name.into());
        v
    };
    if stop >= Stage::Deps {
        emit("deps.jsonl", e.iter().map(|x| with_name(&x.name, x.dep.to_json())).collect())?;
    }
    if stop >= Stage::Connectivity {
        emit("connectivity.jsonl", e.iter().map(|x| with_name(&x.name, x.con.to_json())).collect())?;
    }
    if stop >= Stage::Mask {
        emit("masks.jsonl", e.iter().map(|x| with_name(&x.name, sparse_json(&x.seq, &x.con))).collect())?;
    }
    Ok(PipelineReport {
        functions: corpus.len(),
        tokens: e.iter().map(|x| x.seq.len()).sum(),
        dependence_edges: e.iter().map(|x| x.dep.edges.len()).sum(),
        connectivity_edges: e.iter().map(|x| x.con.num_edges()).sum(),
        cache_hits: stats.hits,
        cache_misses: stats.misses,
        cache_stale: stats.stale,
        outputs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthReport {
    pub functions: usize,
    pub variants: usize,
    pub triplets: usize,
    pub typed_accesses: usize,
    pub mlc_samples: usize,
}

/// Writes a synthetic corpus: `corpus.s` with originals then variants,
/// `variants.jsonl`, similarity triplets `sim.jsonl`, type labels
/// `types.jsonl` and multi-label samples `mlc.jsonl`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthReport> {
    let corpus = synthesize(&cfg.synth, cfg.seed)?;
    atomic_write(&out.join("corpus.s"), corpus.listing().as_bytes())?;
    let variants: Vec<VariantRecord> = corpus
        .variants
        .iter()
        .map(|v| VariantRecord {
            source: corpus.functions[v.source].func.name.clone(),
            variant: v.func.name.clone(),
            perm: v.perm.clone(),
            renaming: v.renaming.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        })
        .collect();
    write_jsonl(&out.join("variants.jsonl"), &variants)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7219_1E75);
    let triplets: Vec<TripletRecord> = if variants.len() < 2 {
        Vec::new()
    } else {
        (0..variants.len())
            .map(|i| {
                let mut j = rng.random_range(0..variants.len() - 1);
                if j >= i {
                    j += 1;
                }
                TripletRecord {
                    anchor: variants[i].source.clone(),
                    positive: variants[i].variant.clone(),
                    negative: variants[j].variant.clone(),
                }
            })
            .collect()
    };
    write_jsonl(&out.join("sim.jsonl"), &triplets)?;
    let types: Vec<TypeRecord> = corpus
        .functions
        .iter()
        .map(|sf| TypeRecord {
            function: sf.func.name.clone(),
            labels: type_labels(sf, cfg.model.max_len),
        })
        .collect();
    write_jsonl(&out.join("types.jsonl"), &types)?;
    let mlc = mlc_samples(&corpus, &cfg.synth, cfg.seed);
    write_jsonl(&out.join("mlc.jsonl"), &mlc)?;
    Ok(SynthReport {
        functions: corpus.functions.len(),
        variants: variants.len(),
        triplets: triplets.len(),
        typed_accesses: types.iter().map(|t| t.labels.len()).sum(),
        mlc_samples: mlc.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub functions: usize,
    pub parameters: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub mdm_accuracy: f64,
}

/// Pre-trains a fresh encoder on a listing. Writes a model directory with
/// checkpoint, vocabulary, effective config and `metrics.csv`.
pub fn pretrain(cfg: &RunConfig, listing: &Path, out: &Path, on_step: impl FnMut(&crate::pretrain::StepMetrics)) -> Result<PretrainReport> {
    let (corpus, _) = load_corpus(cfg, listing, None, None)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = EncoderState::init(&cfg.encoder(corpus.vocab.len()), &mut rng)?;
    let examples = corpus.examples();
    let log = run_pretrain(&mut state, &examples, &corpus.vocab, &cfg.pretrain, cfg.seed, on_step)?;
    let acc = mdm_accuracy(&state, &examples, &cfg.pretrain, &corpus.vocab, cfg.seed)?;
    save_model(out, cfg, &state, &corpus.vocab, std::iter::empty())?;
    atomic_write(&out.join("metrics.csv"), metrics_csv(&log).as_bytes())?;
    Ok(PretrainReport {
        functions: corpus.len(),
        parameters: state.num_parameters(),
        steps: log.len(),
        first_loss: log.first().map_or(f64::NAN, |m| m.total),
        final_loss: log.last().map_or(f64::NAN, |m| m.total),
        mdm_accuracy: acc,
    })
}

fn model_corpus(cfg: &RunConfig, model: &Model, listing: &Path) -> Result<Corpus> {
    let (corpus, _) = load_corpus(cfg, listing, Some(model.vocab.clone()), None)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(corpus)
}

fn neg_inf(cfg: &RunConfig) -> f64 {
    cfg.pretrain.neg_inf
}

/// `[CLS]` embeddings of every function, one JSON object per line.
pub fn embed(cfg: &RunConfig, model_dir: &Path, listing: &Path, out: &Path) -> Result<usize> {
    let model = load_model(model_dir)?;
    let corpus = model_corpus(cfg, &model, listing)?;
    let emb = embed_all(&model.state, &corpus.examples(), neg_inf(cfg))?;
    write_jsonl(out, &emb)?;
    Ok(emb.len())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub queries: usize,
    pub pool_size: usize,
    pub recall: Vec<(usize, f64)>,
    pub mrr: f64,
}

/// Retrieval quality of embeddings: each triplet's anchor queries a pool
/// holding its positive and `pool_size - 1` other positives.
pub fn eval_sim(cfg: &RunConfig, embeddings: &Path, triplets: &Path) -> Result<SimReport> {
    let emb: Vec<FunctionEmbedding> = read_jsonl(embeddings)?;
    let trips: Vec<TripletRecord> = read_jsonl(triplets)?;
    let find = |name: &str| {
        emb.iter()
            .find(|e| e.id == name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("no embedding for `{name}`")))
    };
    let queries = trips.iter().map(|t| find(&t.anchor)).collect::<Result<Vec<_>>>()?;
    let candidates = trips.iter().map(|t| find(&t.positive)).collect::<Result<Vec<_>>>()?;
    if queries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if queries.len() < cfg.pool_size {
        return Err(Error::Config(format!("pool_size {} exceeds the {} available pairs", cfg.pool_size, queries.len())));
    }
    let qs = sim_queries(&queries, &candidates, cfg.pool_size, cfg.seed);
    let recall = [1, 3, 5, 10]
        .into_iter()
        .filter(|&k| k <= cfg.pool_size)
        .map(|k| (k, recall_at_k(&qs, k)))
        .collect();
    Ok(SimReport {
        queries: qs.len(),
        pool_size: cfg.pool_size,
        recall,
        mrr: mrr(&qs),
    })
}

fn resolve_triplets(corpus: &Corpus, records: &[TripletRecord]) -> Result<Vec<Triplet>> {
    records
        .iter()
        .map(|t| {
            Ok(Triplet {
                anchor: corpus.require(&t.anchor)?,
                positive: corpus.require(&t.positive)?,
                negative: corpus.require(&t.negative)?,
            })
        })
        .collect()
}

/// Fine-tunes a model on similarity triplets; writes a new model directory
/// and `losses.csv`.
pub fn finetune_sim(cfg: &RunConfig, model_dir: &Path, listing: &Path, triplets: &Path, out: &Path) -> Result<Vec<f64>> {
    let mut model = load_model(model_dir)?;
    let corpus = model_corpus(cfg, &model, listing)?;
    let trips = resolve_triplets(&corpus, &read_jsonl(triplets)?)?;
    let losses = finetune_similarity(&mut model.state, &corpus.examples(), &trips, &cfg.finetune, cfg.seed)?;
    save_model(out, cfg, &model.state, &model.vocab, std::iter::empty())?;
    write_losses(&out.join("losses.csv"), &losses)?;
    Ok(losses)
}

fn type_examples(corpus: &Corpus, labels: &Path, set: &TypeLabelSet) -> Result<Vec<TypeExample>> {
    let records: Vec<TypeRecord> = read_jsonl(labels)?;
    records
        .iter()
        .map(|r| {
            let example = corpus.entries[corpus.require(&r.function)?].example();
            let targets = dense_type_targets(&example, &r.labels, set)?;
            Ok(TypeExample { example, targets })
        })
        .collect()
}

/// Trains the per-token type head together with the encoder. The head is
/// saved as `type.w` / `type.b` in the checkpoint.
pub fn train_type(cfg: &RunConfig, model_dir: &Path, listing: &Path, labels: &Path, out: &Path) -> Result<Vec<f64>> {
    let mut model = load_model(model_dir)?;
    let corpus = model_corpus(cfg, &model, listing)?;
    let set = TypeLabelSet::standard();
    let data = type_examples(&corpus, labels, &set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7E9E);
    let mut head = LinearHead::init(model.state.config.hidden, set.len(), model.state.config.init_std, &mut rng);
    let losses = train_type_head(&mut model.state, &mut head, &data, &cfg.types, cfg.seed)?;
    save_model(out, cfg, &model.state, &model.vocab, [("type.w".into(), &head.w), ("type.b".into(), &head.b)])?;
    write_losses(&out.join("losses.csv"), &losses)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TypeReport {
    pub tokens: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn eval_type(cfg: &RunConfig, model_dir: &Path, listing: &Path, labels: &Path) -> Result<TypeReport> {
    let model = load_model(model_dir)?;
    let head = LinearHead {
        w: model.checkpoint.extra("type.w")?,
        b: model.checkpoint.extra("type.b")?,
    };
    let set = TypeLabelSet::standard();
    if head.outputs() != set.len() {
        return Err(Error::Format(format!("type head has {} classes, expected {}", head.outputs(), set.len())));
    }
    let corpus = model_corpus(cfg, &model, listing)?;
    let data = type_examples(&corpus, labels, &set)?;
    let (pred, gold) = predict_types(&model.state, &head, &data, cfg.types.neg_inf)?;
    let (precision, recall, f1) = type_prf(&pred, &gold, TypeLabelSet::NO_ACCESS_ID);
    Ok(TypeReport {
        tokens: gold.len(),
        precision,
        recall,
        f1,
        accuracy: accuracy(&pred, &gold),
    })
}

fn mlc_examples(cfg: &RunConfig, model: &Model, corpus: &Corpus, samples: &Path) -> Result<Vec<MlcExample>> {
    let records: Vec<MlcSample> = read_jsonl(samples)?;
    let mut needed = BTreeSet::new();
    for r in &records {
        for f in r.functions.iter().take(cfg.mlc.forefront_k) {
            needed.insert(corpus.require(f)?);
        }
    }
    let subset: Vec<usize> = needed.into_iter().collect();
    let examples: Vec<_> = subset.iter().map(|&i| corpus.entries[i].example()).collect();
    let emb = embed_all(&model.state, &examples, neg_inf(cfg))?;
    let d = model.state.config.hidden;
    records
        .iter()
        .map(|r| {
            let take: Vec<usize> = r.functions.iter().take(cfg.mlc.forefront_k).map(|f| corpus.require(f)).collect::<Result<_>>()?;
            if take.is_empty() {
                return Err(Error::Format("multi-label sample without functions".into()));
            }
            let mut m = Array2::zeros((take.len(), d));
            for (row, i) in take.iter().enumerate() {
                let k = subset.binary_search(i).expect("embedded");
                m.row_mut(row).assign(&ndarray::ArrayView1::from(&emb[k].vector[..]));
            }
            Ok(MlcExample {
                embeddings: m,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

/// Trains pooling query and multi-label head on frozen embeddings. The
/// encoder is copied unchanged; the head is saved as `mlc.query`,
/// `mlc.w` and `mlc.b`.
pub fn train_mlc(cfg: &RunConfig, model_dir: &Path, listing: &Path, samples: &Path, out: &Path) -> Result<Vec<f64>> {
    let model = load_model(model_dir)?;
    let corpus = model_corpus(cfg, &model, listing)?;
    let data = mlc_examples(cfg, &model, &corpus, samples)?;
    let labels = data.first().map_or(0, |e| e.labels.len());
    if labels == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3C1A);
    let mut mlc = MlcModel::init(model.state.config.hidden, labels, &mut rng);
    let losses = fit_mlc(&mut mlc, &data, &cfg.mlc, cfg.seed)?;
    save_model(
        out,
        cfg,
        &model.state,
        &model.vocab,
        [("mlc.query".into(), &mlc.query), ("mlc.w".into(), &mlc.head.w), ("mlc.b".into(), &mlc.head.b)],
    )?;
    write_losses(&out.join("losses.csv"), &losses)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlcReport {
    pub samples: usize,
    pub lrap: f64,
    pub lrl: f64,
    /// Mean over labels that have both positive and negative samples.
    pub macro_auc: Option<f64>,
}

pub fn eval_mlc(cfg: &RunConfig, model_dir: &Path, listing: &Path, samples: &Path) -> Result<MlcReport> {
    let model = load_model(model_dir)?;
    let mlc = MlcModel {
        query: model.checkpoint.extra("mlc.query")?,
        head: LinearHead {
            w: model.checkpoint.extra("mlc.w")?,
            b: model.checkpoint.extra("mlc.b")?,
        },
    };
    let corpus = model_corpus(cfg, &model, listing)?;
    let data = mlc_examples(cfg, &model, &corpus, samples)?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = mlc.head.outputs();
    if let Some(e) = data.iter().find(|e| e.labels.len() != n) {
        return Err(Error::Format(format!("sample has {} labels, model has {n}", e.labels.len())));
    }
    let scores = predict_mlc(&mlc, &data);
    let y = Array2::from_shape_fn((data.len(), n), |(i, j)| data[i].labels[j]);
    let batch = MultiLabelBatch::new(y, scores)?;
    Ok(MlcReport {
        samples: data.len(),
        lrap: lrap(&batch)?,
        lrl: lrl(&batch)?,
        macro_auc: macro_roc_auc(&batch),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub samples: usize,
    pub tensors: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

/// Central-difference gradient check on the built-in probe model. A
/// maximum relative error at or above `tolerance` is a numeric divergence.
pub fn gradcheck(cfg: &RunConfig, tolerance: f64) -> Result<GradcheckSummary> {
    let gc = GradcheckConfig {
        seed: cfg.seed,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&gc)?;
    let summary = GradcheckSummary {
        samples: report.samples.len(),
        tensors: report.params_covered().len(),
        max_rel_error: report.max_rel_error,
        tolerance,
    };
    if report.max_rel_error.is_nan() || report.max_rel_error >= tolerance {
        return Err(Error::Divergence(format!(
            "gradient check: max relative error {:.3e} >= {tolerance:.0e}",
            report.max_rel_error
        )));
    }
    Ok(summary)
}
