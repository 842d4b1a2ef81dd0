//! The `rolefill` command-line surface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{ablations, toy_instance, toy_reader, TOY_EMISSION_SCALE};
pub use manifest::{config_hash, Manifest};

use crate::embeddings::{load_word_embeddings, ContextStore, ContextualEmbeddingProvider, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::reader::{Embedder, Fusion, KSpec, ReaderConfig, Variant};
use crate::train::TrainSettings;

#[derive(Debug, Parser)]
#[command(name = "rolefill", version, about = "Document-level role-filler extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build BIO-tagged training and evaluation windows and a coverage report.
    Preprocess(PreprocessArgs),
    /// Train a reader and keep the checkpoint with the best dev score.
    Train(TrainArgs),
    /// Decode a corpus with a checkpoint and write extractions.
    Predict(PredictArgs),
    /// Score extractions (or a checkpoint) against gold keys.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of a reader's gradients on a toy window.
    Gradcheck(GradcheckArgs),
    /// Train and score the three module ablations of a base configuration.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct CtxSource {
    /// Contextual embeddings from a CTXE store.
    #[arg(long, value_name = "PATH")]
    pub ctx_store: Option<PathBuf>,
    /// Deterministic hashed contextual embeddings of the given width.
    #[arg(long, value_name = "DIM")]
    pub ctx_stub: Option<usize>,
    /// Word embeddings only.
    #[arg(long)]
    pub no_ctx: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EmbeddingArgs {
    /// Word vectors in whitespace-separated text format.
    #[arg(long, value_name = "PATH")]
    pub glove: PathBuf,
    #[command(flatten)]
    pub ctx: CtxSource,
    #[arg(long, default_value_t = 0)]
    pub ctx_stub_seed: u64,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Base reader configuration (JSON); flags below override it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Window size: a sentence count, `paragraph` or `chunk`.
    #[arg(long)]
    pub k: Option<KSpec>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// Independent per-token softmax instead of a CRF.
    #[arg(long)]
    pub no_crf: bool,
    /// Forbid BIO-invalid transitions in the CRF.
    #[arg(long)]
    pub hard_bio_mask: bool,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub chunk_budget: Option<usize>,
    #[arg(long)]
    pub subword_ratio: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SettingsArgs {
    /// Training settings (JSON); flags below override it.
    #[arg(long, value_name = "PATH")]
    pub settings: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus to cut into evaluation windows; defaults to `--corpus`.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Pre-built training windows from `preprocess`.
    #[arg(long)]
    pub windows: Option<PathBuf>,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: SettingsArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Corpus holding the gold keys.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Extractions JSONL to score.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub extractions: Option<PathBuf>,
    /// Decode `--corpus` with this checkpoint and score the result.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub glove: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["ctx_stub", "no_ctx"])]
    pub ctx_store: Option<PathBuf>,
    #[arg(long, value_name = "DIM", conflicts_with = "no_ctx")]
    pub ctx_stub: Option<usize>,
    #[arg(long)]
    pub no_ctx: bool,
    #[arg(long, default_value_t = 0)]
    pub ctx_stub_seed: u64,
    /// `head_noun`, `exact` or `both`.
    #[arg(long, default_value = "both")]
    pub mode: ModeArg,
    /// Head-noun word lists (JSON) replacing the defaults.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    HeadNoun,
    Exact,
    Both,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "multi_granularity")]
    pub variant: Variant,
    #[arg(long, default_value = "gated")]
    pub fusion: Fusion,
    #[arg(long)]
    pub no_crf: bool,
    #[arg(long, default_value_t = 3)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for a JSON report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Corpus the ablations are scored on; defaults to `--dev`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: SettingsArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Loaded embedding resources.
pub struct Resources {
    pub table: WordEmbeddingTable,
    pub provider: ContextualEmbeddingProvider,
}

impl Resources {
    pub fn embedder(&self) -> Embedder<'_> {
        Embedder {
            table: &self.table,
            provider: &self.provider,
        }
    }

    fn load(glove: &std::path::Path, ctx_store: Option<&PathBuf>, ctx_stub: Option<usize>, stub_seed: u64) -> Result<Self> {
        let table = load_word_embeddings(glove)?;
        let provider = match (ctx_store, ctx_stub) {
            (Some(p), _) => ContextualEmbeddingProvider::File(ContextStore::load(p)?),
            (None, Some(dim)) => ContextualEmbeddingProvider::Stub { dim, seed: stub_seed },
            (None, None) => ContextualEmbeddingProvider::Zero,
        };
        Ok(Resources { table, provider })
    }

    pub fn from_args(a: &EmbeddingArgs) -> Result<Self> {
        Self::load(&a.glove, a.ctx.ctx_store.as_ref(), a.ctx.ctx_stub, a.ctx_stub_seed)
    }
}

impl ModelArgs {
    /// The configuration file (or the multi-granularity default) with flag
    /// overrides applied.
    pub fn resolve(&self, seed: u64) -> Result<ReaderConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ReaderConfig::multi_granularity(),
        };
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(f) = self.fusion {
            c.fusion = f;
        }
        if self.no_crf {
            c.use_crf = false;
        }
        if self.hard_bio_mask {
            c.hard_bio_mask = true;
        }
        if let Some(h) = self.hidden {
            c.hidden = h;
        }
        if let Some(l) = self.layers {
            c.layers = l;
        }
        if let Some(d) = self.dropout {
            c.dropout = d;
        }
        if let Some(b) = self.chunk_budget {
            c.chunk_budget = b;
        }
        if self.subword_ratio.is_some() {
            c.subword_ratio = self.subword_ratio;
        }
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

impl SettingsArgs {
    pub fn resolve(&self, seed: u64) -> Result<TrainSettings> {
        let mut s = match &self.settings {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => TrainSettings::default(),
        };
        if let Some(e) = self.epochs {
            s.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            s.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            s.batch_size = b;
        }
        if let Some(p) = self.patience {
            s.patience = p;
        }
        if let Some(c) = self.clip {
            s.clip_norm = c;
        }
        s.seed = seed;
        s.validate()?;
        Ok(s)
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => commands::preprocess(&a, argv),
        Command::Train(a) => commands::train(&a, argv),
        Command::Predict(a) => commands::predict(&a, argv),
        Command::Evaluate(a) => commands::evaluate(&a, argv),
        Command::Gradcheck(a) => commands::gradcheck(&a, argv),
        Command::Ablate(a) => commands::ablate(&a, argv),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
