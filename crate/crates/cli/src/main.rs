//! `depattn` command-line front end.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric divergence, 4 config
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use depattn::commands::{self, Stage};
use depattn::config::RunConfig;
use depattn::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "depattn", version, about = "Dependence-regularized attention over x86-64 listings")]
struct Cli {
    /// TOML run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the configured count. 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Model status flags as a dependence location.
    #[arg(long, global = true)]
    flags_dep: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Tokenize,
    Deps,
    Connectivity,
    Mask,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Tokenize => Stage::Tokenize,
            StageArg::Deps => Stage::Deps,
            StageArg::Connectivity => Stage::Connectivity,
            StageArg::Mask => Stage::Mask,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, analyze and mask a listing.
    Pipeline {
        listing: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Last stage to write.
        #[arg(long, value_enum, default_value = "mask")]
        stage: StageArg,
    },
    /// Generate a synthetic corpus with variants and task labels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `synth.functions`.
        #[arg(long)]
        functions: Option<usize>,
    },
    /// Pre-train a fresh encoder with MLM and MDM.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `pretrain.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Print metrics every N steps to stderr; 0 disables.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Write the `[CLS]` embedding of every function.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@k and MRR of embeddings over anchor/positive pairs.
    EvalSim {
        #[arg(long)]
        embeddings: PathBuf,
        /// JSONL triplets; anchors query pools of positives.
        #[arg(long)]
        pairs: PathBuf,
        /// Overrides `pool_size`.
        #[arg(long)]
        pool_size: Option<usize>,
    },
    /// Fine-tune the encoder on similarity triplets.
    FinetuneSim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-token type head.
    TrainType {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Type-inference precision, recall and F1.
    EvalType {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Train the multi-label classifier on frozen embeddings.
    TrainMlc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LRAP, LRL and macro ROC-AUC of the multi-label classifier.
    EvalMlc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Central-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cli.flags_dep {
        cfg.analysis.flags = true;
    }
    match &cli.command {
        Command::Synth { functions: Some(n), .. } => cfg.synth.functions = *n,
        Command::Pretrain { steps: Some(n), .. } => cfg.pretrain.steps = *n,
        Command::EvalSim { pool_size: Some(n), .. } => cfg.pool_size = *n,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Pipeline { listing, out, stage } => {
            let report = commands::pipeline(&cfg, &listing, &out, stage.into())?;
            if report.functions == 0 {
                eprintln!("warning: {} contains no functions; wrote empty outputs", listing.display());
            }
            print_json(&report)
        }
        Command::Synth { out, .. } => print_json(&commands::synth(&cfg, &out)?),
        Command::Pretrain { corpus, out, log_every, .. } => {
            let report = commands::pretrain(&cfg, &corpus, &out, |m| {
                if log_every > 0 && m.step % log_every == 0 {
                    eprintln!("step {:>6}  mlm {:.4}  mdm {:.4}  total {:.4}  lr {:.2e}", m.step, m.mlm_loss, m.mdm_loss, m.total, m.lr);
                }
            })?;
            print_json(&report)
        }
        Command::Embed { model, corpus, out } => {
            let n = commands::embed(&cfg, &model, &corpus, &out)?;
            print_json(&serde_json::json!({ "functions": n, "output": out }))
        }
        Command::EvalSim { embeddings, pairs, .. } => print_json(&commands::eval_sim(&cfg, &embeddings, &pairs)?),
        Command::FinetuneSim { model, corpus, triplets, out } => {
            let losses = commands::finetune_sim(&cfg, &model, &corpus, &triplets, &out)?;
            print_json(&serde_json::json!({ "steps": losses.len(), "final_loss": losses.last() }))
        }
        Command::TrainType { model, corpus, labels, out } => {
            let losses = commands::train_type(&cfg, &model, &corpus, &labels, &out)?;
            print_json(&serde_json::json!({ "steps": losses.len(), "final_loss": losses.last() }))
        }
        Command::EvalType { model, corpus, labels } => print_json(&commands::eval_type(&cfg, &model, &corpus, &labels)?),
        Command::TrainMlc { model, corpus, samples, out } => {
            let losses = commands::train_mlc(&cfg, &model, &corpus, &samples, &out)?;
            print_json(&serde_json::json!({ "steps": losses.len(), "final_loss": losses.last() }))
        }
        Command::EvalMlc { model, corpus, samples } => print_json(&commands::eval_mlc(&cfg, &model, &corpus, &samples)?),
        Command::Gradcheck { tolerance } => print_json(&commands::gradcheck(&cfg, tolerance)?),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
