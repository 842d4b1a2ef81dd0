use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{config_hash, AblateArgs, EvaluateArgs, GradcheckArgs, Manifest, ModeArg, PredictArgs, PreprocessArgs, Resources, TrainArgs};
use crate::bio::{self, TagSet, TaggedSequence};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{load_corpus, Document, GoldKey, RoleSet};
use crate::embeddings::{ContextualEmbeddingProvider, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{Extraction, ExtractionReport, HeadNounRules, MatchMode};
use crate::nn::GradCheckSettings;
use crate::reader::{Embedder, Fusion, Reader, ReaderConfig, WindowInputs};
use crate::train::{self, Prepared, TrainSettings};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct UnmatchedFiller<'a> {
    doc_id: &'a str,
    role: &'a str,
    alternatives: &'a [String],
}

#[derive(Serialize)]
struct Coverage<'a> {
    training_k: Option<usize>,
    documents: usize,
    gold_fillers: usize,
    localized_fillers: usize,
    unmatched: Vec<UnmatchedFiller<'a>>,
    train_windows: usize,
    positive_windows: usize,
    negative_windows: usize,
    eval_windows: usize,
}

pub fn preprocess(a: &PreprocessArgs, argv: &[String]) -> Result<()> {
    let config = a.model.resolve(a.seed)?;
    let tagset = TagSet::new(config.roles.clone());
    let corpus = load_corpus(&a.corpus, &config.roles)?;
    let eval_path = a.eval_corpus.clone().unwrap_or_else(|| a.corpus.clone());
    let eval_corpus = if a.eval_corpus.is_some() {
        load_corpus(&eval_path, &config.roles)?
    } else {
        corpus.clone()
    };
    let docs = train::annotate_corpus(&corpus, &tagset)?;
    let train_windows = train::training_windows(&config, &docs, a.seed)?;
    let mut eval_windows = Vec::new();
    for d in train::annotate_corpus(&eval_corpus, &tagset)? {
        eval_windows.extend(train::eval_windows(&config, &d)?);
    }

    let gold_fillers: usize = corpus.iter().map(|(_, k)| k.fillers.values().map(Vec::len).sum::<usize>()).sum();
    let unmatched: Vec<UnmatchedFiller> = docs
        .iter()
        .flat_map(|d| {
            d.unmatched.iter().map(|(role, f)| UnmatchedFiller {
                doc_id: &d.document.doc_id,
                role: role.as_str(),
                alternatives: &f.alternatives,
            })
        })
        .collect();
    let positive = train_windows.iter().filter(|w| w.is_positive()).count();
    let coverage = Coverage {
        training_k: train::training_k(&config, corpus.iter().map(|(d, _)| d))?,
        documents: corpus.len(),
        gold_fillers,
        localized_fillers: gold_fillers - unmatched.len(),
        unmatched,
        train_windows: train_windows.len(),
        positive_windows: positive,
        negative_windows: train_windows.len() - positive,
        eval_windows: eval_windows.len(),
    };

    create_dir(&a.out)?;
    let train_path = a.out.join("train_windows.jsonl");
    let eval_out = a.out.join("eval_windows.jsonl");
    let cov_path = a.out.join("coverage.json");
    bio::save_windows(&train_path, &tagset, &train_windows)?;
    bio::save_windows(&eval_out, &tagset, &eval_windows)?;
    write_json(&cov_path, &coverage)?;
    let mut m = Manifest::new("preprocess", argv).with_config(&config)?;
    m.corpus_paths = vec![a.corpus.clone(), eval_path];
    m.seed = Some(a.seed);
    m.outputs = vec![train_path, eval_out, cov_path];
    m.write(&a.out)?;
    println!(
        "{} training windows ({} positive), {} evaluation windows, {}/{} gold fillers localized",
        coverage.train_windows, coverage.positive_windows, coverage.eval_windows, coverage.localized_fillers, coverage.gold_fillers
    );
    Ok(())
}

#[derive(Serialize)]
struct RunConfig<'a> {
    reader: &'a ReaderConfig,
    settings: &'a TrainSettings,
}

/// Trains `config` on prepared windows, streaming the epoch log to
/// `metrics` when given.
fn fit(
    config: &ReaderConfig,
    settings: &TrainSettings,
    windows: &[TaggedSequence],
    dev: &[(Document, GoldKey)],
    res: &Resources,
    cache: &mut BTreeMap<bool, Vec<Prepared>>,
    metrics: Option<&Path>,
) -> Result<train::TrainOutcome> {
    let mut reader = Reader::new(config, res.table.dim(), res.provider.dim())?;
    if !cache.contains_key(&config.use_contextual) {
        let prepared = train::prepare_windows(&reader, windows.to_vec(), res.embedder())?;
        cache.insert(config.use_contextual, prepared);
    }
    let data = &cache[&config.use_contextual];
    let mut log = match metrics {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    train::train(&mut reader, settings, data, dev, res.embedder(), |entry| {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    })
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut config = a.model.resolve(a.seed)?;
    if a.embeddings.ctx.no_ctx {
        config.use_contextual = false;
    }
    let settings = a.training.resolve(a.seed)?;
    let res = Resources::from_args(&a.embeddings)?;
    let corpus = load_corpus(&a.corpus, &config.roles)?;
    let dev = load_corpus(&a.dev, &config.roles)?;
    let tagset = TagSet::new(config.roles.clone());
    let windows = match &a.windows {
        Some(p) => bio::load_windows(p, &tagset)?,
        None => train::training_windows(&config, &train::annotate_corpus(&corpus, &tagset)?, a.seed)?,
    };

    create_dir(&a.out)?;
    let metrics = a.out.join("metrics.jsonl");
    let trained = fit(&config, &settings, &windows, &dev, &res, &mut BTreeMap::new(), Some(&metrics))?;
    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&ckpt, &trained.best)?;
    let config_path = a.out.join("config.json");
    write_json(&config_path, &trained.best.config)?;

    let mut m = Manifest::new("train", argv).with_config(&RunConfig {
        reader: &trained.best.config,
        settings: &settings,
    })?;
    m.corpus_paths = vec![a.corpus.clone(), a.dev.clone()];
    m.corpus_paths.extend(a.windows.clone());
    m.seed = Some(a.seed);
    m.outputs = vec![ckpt, metrics, config_path];
    m.write(&a.out)?;
    let best = &trained.log[trained.best_epoch - 1];
    println!(
        "best epoch {} of {}: dev head-noun macro F1 {:.4}, exact {:.4}",
        trained.best_epoch,
        trained.log.len(),
        best.dev_f1_hn,
        best.dev_f1_exact
    );
    Ok(())
}

fn decode_corpus(reader: &Reader, corpus: &[(Document, GoldKey)], emb: Embedder<'_>, rules: &HeadNounRules) -> Result<Vec<Extraction>> {
    let docs: Vec<_> = corpus.iter().map(|(d, _)| train::unlabeled(d)).collect();
    train::predict(reader, &docs, emb, rules)
}

pub fn predict(a: &PredictArgs, argv: &[String]) -> Result<()> {
    let reader = load_checkpoint(&a.checkpoint)?;
    let res = Resources::from_args(&a.embeddings)?;
    let corpus = load_corpus(&a.corpus, &reader.config.roles)?;
    let extractions = decode_corpus(&reader, &corpus, res.embedder(), &HeadNounRules::default())?;
    create_dir(&a.out)?;
    let path = a.out.join("extractions.jsonl");
    write_jsonl(&path, &extractions)?;
    let mut m = Manifest::new("predict", argv).with_config(&reader.config)?;
    m.corpus_paths = vec![a.corpus.clone(), a.checkpoint.clone()];
    m.seed = Some(reader.config.seed);
    m.outputs = vec![path];
    m.write(&a.out)?;
    println!("{} extractions from {} documents", extractions.len(), corpus.len());
    Ok(())
}

fn load_extractions(path: &Path) -> Result<Vec<Extraction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn modes(m: ModeArg) -> Vec<MatchMode> {
    match m {
        ModeArg::HeadNoun => vec![MatchMode::HeadNoun],
        ModeArg::Exact => vec![MatchMode::Exact],
        ModeArg::Both => vec![MatchMode::HeadNoun, MatchMode::Exact],
    }
}

pub fn evaluate(a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let rules = match &a.rules {
        Some(p) => HeadNounRules::load(p)?,
        None => HeadNounRules::default(),
    };
    let modes = modes(a.mode);
    let mut m = Manifest::new("evaluate", argv);
    let report = match (&a.extractions, &a.checkpoint) {
        (Some(path), _) => {
            let roles = RoleSet::default();
            let corpus = load_corpus(&a.corpus, &roles)?;
            let gold: Vec<GoldKey> = corpus.into_iter().map(|(_, k)| k).collect();
            let preds = load_extractions(path)?;
            m.corpus_paths = vec![a.corpus.clone(), path.clone()];
            ExtractionReport::evaluate(&preds, &gold, &roles, &modes, &rules)?
        }
        (None, Some(ckpt)) => {
            let reader = load_checkpoint(ckpt)?;
            let glove = a
                .glove
                .as_ref()
                .ok_or_else(|| Error::Config("--glove is required when evaluating a checkpoint".into()))?;
            let res = Resources::load(glove, a.ctx_store.as_ref(), a.ctx_stub, a.ctx_stub_seed)?;
            let corpus = load_corpus(&a.corpus, &reader.config.roles)?;
            m = m.with_config(&reader.config)?;
            m.seed = Some(reader.config.seed);
            m.corpus_paths = vec![a.corpus.clone(), ckpt.clone()];
            train::evaluate_checkpoint(&reader, &corpus, res.embedder(), &modes, &rules)?
        }
        (None, None) => return Err(Error::Config("either --extractions or --checkpoint is required".into())),
    };
    create_dir(&a.out)?;
    let json = a.out.join("report.json");
    let txt = a.out.join("report.txt");
    write_json(&json, &report)?;
    let table = report.to_table();
    fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    m.outputs = vec![json, txt];
    m.write(&a.out)?;
    print!("{table}");
    Ok(())
}

/// Emission weights of the toy reader are multiplied by this factor.
pub const TOY_EMISSION_SCALE: f64 = 10.0;

/// A two-sentence labelled window with a random 3-dimensional word table
/// and a 2-dimensional stub contextual provider.
pub fn toy_instance(seed: u64) -> (TaggedSequence, WordEmbeddingTable, ContextualEmbeddingProvider) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = [
        "four", "armed", "terrorists", "attacked", "the", "bank", "police", "arrested", "two", "suspects", "on", "sunday",
    ];
    let table = WordEmbeddingTable::from_entries(
        3,
        words.iter().map(|w| (*w, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())),
    )
    .expect("toy table is well formed");
    let tagset = TagSet::default();
    let tags = [
        "B-PerpInd", "I-PerpInd", "I-PerpInd", "O", "B-Target", "I-Target", "O", "O", "O", "O", "O", "O",
    ]
    .iter()
    .map(|t| tagset.parse(t).expect("known tag"))
    .collect();
    let window = TaggedSequence {
        doc_id: "toy".into(),
        start_sentence: 0,
        tokens: words.iter().map(|w| w.to_string()).collect(),
        tags,
        sentence_lengths: vec![6, 6],
    };
    (window, table, ContextualEmbeddingProvider::Stub { dim: 2, seed })
}

/// Builds a reader for `config` on [`toy_instance`] and prepares its inputs.
pub fn toy_reader(config: &ReaderConfig) -> Result<(Reader, TaggedSequence, WindowInputs)> {
    let (window, table, provider) = toy_instance(config.seed);
    let mut reader = Reader::new(config, table.dim(), provider.dim())?;
    let emit = reader.layout.emit_w;
    reader.params.get_mut(emit).scale_assign(TOY_EMISSION_SCALE);
    let inputs = reader.prepare(&window, Embedder { table: &table, provider: &provider })?;
    Ok((reader, window, inputs))
}

#[derive(Serialize)]
struct GradReport {
    max_rel_error: f64,
    coords_checked: usize,
    worst_param: Option<String>,
    tolerance: f64,
}

pub fn gradcheck(a: &GradcheckArgs, argv: &[String]) -> Result<()> {
    let mut config = ReaderConfig::multi_granularity();
    config.variant = a.variant;
    if a.variant == crate::reader::Variant::Ksentence {
        config.k = crate::reader::KSpec::Sentences(2);
    }
    config.fusion = a.fusion;
    config.use_crf = !a.no_crf;
    config.hidden = a.hidden;
    config.layers = a.layers;
    config.seed = a.seed;
    let (reader, window, inputs) = toy_reader(&config)?;
    let settings = GradCheckSettings {
        samples: a.samples,
        seed: a.seed,
        ..GradCheckSettings::default()
    };
    let r = reader.gradient_check(&window, &inputs, &settings)?;
    println!("max relative error {:.3e} over {} coordinates", r.max_rel_error, r.coords_checked);
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("gradcheck.json");
        write_json(
            &path,
            &GradReport {
                max_rel_error: r.max_rel_error,
                coords_checked: r.coords_checked,
                worst_param: r.worst.as_ref().map(|w| w.param.clone()),
                tolerance: a.tolerance,
            },
        )?;
        let mut m = Manifest::new("gradcheck", argv).with_config(&config)?;
        m.seed = Some(a.seed);
        m.outputs = vec![path];
        m.write(out)?;
    }
    if r.max_rel_error > a.tolerance {
        let w = r.worst.expect("a coordinate was checked");
        return Err(Error::GradientMismatch(format!(
            "{}[{}]: analytic {} vs numeric {} (relative error {:.3e} > {:.1e})",
            w.param, w.index, w.analytic, w.numeric, r.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

/// The three module ablations of a base configuration.
pub fn ablations(base: &ReaderConfig) -> Vec<(&'static str, ReaderConfig)> {
    vec![
        (
            "no_gated_fusion",
            ReaderConfig {
                fusion: Fusion::Sum,
                ..base.clone()
            },
        ),
        (
            "no_contextual",
            ReaderConfig {
                use_contextual: false,
                ..base.clone()
            },
        ),
        (
            "no_crf",
            ReaderConfig {
                use_crf: false,
                ..base.clone()
            },
        ),
    ]
}

#[derive(Serialize)]
struct AblationReport<'a> {
    ablation: &'a str,
    config: &'a ReaderConfig,
    config_sha256: String,
    settings: &'a TrainSettings,
    best_epoch: usize,
    log: &'a [train::EpochLog],
    report: ExtractionReport,
}

pub fn ablate(a: &AblateArgs, argv: &[String]) -> Result<()> {
    let mut base = a.model.resolve(a.seed)?;
    if a.embeddings.ctx.no_ctx {
        base.use_contextual = false;
    }
    let settings = a.training.resolve(a.seed)?;
    let res = Resources::from_args(&a.embeddings)?;
    let corpus = load_corpus(&a.corpus, &base.roles)?;
    let dev = load_corpus(&a.dev, &base.roles)?;
    let test_path = a.test.clone().unwrap_or_else(|| a.dev.clone());
    let test = if a.test.is_some() { load_corpus(&test_path, &base.roles)? } else { dev.clone() };
    let tagset = TagSet::new(base.roles.clone());
    let windows = train::training_windows(&base, &train::annotate_corpus(&corpus, &tagset)?, a.seed)?;

    create_dir(&a.out)?;
    let mut cache = BTreeMap::new();
    let mut outputs: Vec<PathBuf> = Vec::new();
    let both = [MatchMode::HeadNoun, MatchMode::Exact];
    for (name, config) in ablations(&base) {
        let trained = fit(&config, &settings, &windows, &dev, &res, &mut cache, None)?;
        let best = &trained.best;
        let report = train::evaluate_checkpoint(best, &test, res.embedder(), &both, &HeadNounRules::default())?;
        println!("[{name}]");
        print!("{}", report.to_table());
        let path = a.out.join(format!("{name}.json"));
        write_json(
            &path,
            &AblationReport {
                ablation: name,
                config: &best.config,
                config_sha256: config_hash(&serde_json::to_value(&best.config)?),
                settings: &settings,
                best_epoch: trained.best_epoch,
                log: &trained.log,
                report,
            },
        )?;
        outputs.push(path);
    }
    let mut m = Manifest::new("ablate", argv).with_config(&RunConfig {
        reader: &base,
        settings: &settings,
    })?;
    m.corpus_paths = vec![a.corpus.clone(), a.dev.clone(), test_path];
    m.seed = Some(a.seed);
    m.outputs = outputs;
    m.write(&a.out)?;
    Ok(())
}
