//! Windowing per reader configuration, mini-batch training with Adam and
//! dev-set model selection, prediction, and checkpoint evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bio::{self, annotate_document, AnnotatedDocument, TagSet, TaggedSequence};
use crate::corpus::{Document, GoldKey};
use crate::error::{Error, Result};
use crate::eval::{self, Extraction, ExtractionReport, HeadNounRules, MatchMode};
use crate::nn::{Gradients, ParamStore};
use crate::reader::{Embedder, KSpec, Reader, ReaderConfig, Variant, WindowInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strictly better dev score before stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.batch_size >= 1
            && self.max_epochs >= 1
            && self.patience >= 1
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, s: &TrainSettings) -> Self {
        Adam {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
            lr: s.learning_rate,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// The `k` used for training windows of `docs`, or `None` for chunking,
/// which sizes windows per document.
pub fn training_k<'a>(config: &ReaderConfig, docs: impl IntoIterator<Item = &'a Document>) -> Result<Option<usize>> {
    match config.k {
        KSpec::Sentences(k) => Ok(Some(k)),
        KSpec::Paragraph => bio::paragraph_k(docs).map(Some),
        KSpec::Chunk => Ok(None),
    }
}

/// Balanced training windows: candidates from every document are pooled
/// and balanced once over the whole corpus.
pub fn training_windows(config: &ReaderConfig, docs: &[AnnotatedDocument], seed: u64) -> Result<Vec<TaggedSequence>> {
    let k = training_k(config, docs.iter().map(|d| &d.document))?;
    let mut candidates = Vec::new();
    for d in docs {
        let k = match k {
            Some(k) => k,
            None => bio::chunk_k_for(&d.document, config.chunk_budget, config.subword_ratio)?,
        };
        candidates.extend(bio::candidate_windows(d, k)?);
    }
    Ok(bio::balance_windows(candidates, seed))
}

/// Evaluation windows of one document, partitioning it.
pub fn eval_windows(config: &ReaderConfig, doc: &AnnotatedDocument) -> Result<Vec<TaggedSequence>> {
    match (config.variant, config.k) {
        (Variant::MultiGranularity, _) | (_, KSpec::Paragraph) => Ok(bio::build_paragraph_windows(doc)),
        (_, KSpec::Sentences(k)) => bio::build_eval_windows(doc, k),
        (_, KSpec::Chunk) => {
            let k = bio::chunk_k_for(&doc.document, config.chunk_budget, config.subword_ratio)?;
            bio::build_eval_windows(doc, k)
        }
    }
}

/// Annotates every document of a corpus against its key.
pub fn annotate_corpus(corpus: &[(Document, GoldKey)], tagset: &TagSet) -> Result<Vec<AnnotatedDocument>> {
    corpus.iter().map(|(d, k)| annotate_document(d, k, tagset)).collect()
}

/// A document without gold annotation (all tags `O`).
pub fn unlabeled(doc: &Document) -> AnnotatedDocument {
    AnnotatedDocument {
        tags: doc.sentences.iter().map(|s| vec![0; s.len()]).collect(),
        document: doc.clone(),
        unmatched: Vec::new(),
    }
}

/// A window with its embedded inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub window: TaggedSequence,
    pub inputs: WindowInputs,
}

pub fn prepare_windows(reader: &Reader, windows: Vec<TaggedSequence>, emb: Embedder<'_>) -> Result<Vec<Prepared>> {
    windows
        .into_par_iter()
        .map(|window| {
            window.check(&reader.tagset)?;
            let inputs = reader.prepare(&window, emb)?;
            Ok(Prepared { window, inputs })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1_hn: f64,
    pub dev_f1_exact: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev head-noun macro F1.
    pub best: Reader,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub embedding_checksum: String,
}

/// Decodes every eval window of a document and collects its extractions.
pub fn predict_document(reader: &Reader, doc: &AnnotatedDocument, emb: Embedder<'_>, rules: &HeadNounRules) -> Result<Vec<Extraction>> {
    let mut out = Vec::new();
    for w in eval_windows(&reader.config, doc)? {
        let inputs = reader.prepare(&w, emb)?;
        let tags = reader.decode(&w, &inputs)?;
        out.extend(eval::extract(&w, &tags, &reader.tagset, rules)?);
    }
    Ok(out)
}

pub fn predict(reader: &Reader, docs: &[AnnotatedDocument], emb: Embedder<'_>, rules: &HeadNounRules) -> Result<Vec<Extraction>> {
    let per_doc = docs
        .par_iter()
        .map(|d| predict_document(reader, d, emb, rules))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_doc.into_iter().flatten().collect())
}

/// Decodes `corpus` with `reader` and scores the result in each mode.
pub fn evaluate_checkpoint(
    reader: &Reader,
    corpus: &[(Document, GoldKey)],
    emb: Embedder<'_>,
    modes: &[MatchMode],
    rules: &HeadNounRules,
) -> Result<ExtractionReport> {
    for (_, key) in corpus {
        key.validate(reader.tagset.roles())?;
    }
    let docs: Vec<AnnotatedDocument> = corpus.iter().map(|(d, _)| unlabeled(d)).collect();
    let preds = predict(reader, &docs, emb, rules)?;
    let gold: Vec<GoldKey> = corpus.iter().map(|(_, k)| k.clone()).collect();
    ExtractionReport::evaluate(&preds, &gold, reader.tagset.roles(), modes, rules)
}

/// Fraction of tokens whose decoded tag equals the gold tag.
pub fn token_accuracy(reader: &Reader, windows: &[Prepared]) -> Result<f64> {
    let counts = windows
        .par_iter()
        .map(|p| {
            let tags = reader.decode(&p.window, &p.inputs)?;
            Ok((tags.iter().zip(&p.window.tags).filter(|(a, b)| a == b).count(), tags.len()))
        })
        .collect::<Result<Vec<(usize, usize)>>>()?;
    let (right, total) = counts.into_iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    Ok(if total == 0 { 1.0 } else { right as f64 / total as f64 })
}

fn batch_dump(batch: &[&Prepared], losses: &[f64]) -> String {
    let items: Vec<_> = batch
        .iter()
        .zip(losses)
        .map(|(p, l)| {
            serde_json::json!({
                "doc_id": p.window.doc_id,
                "start_sentence": p.window.start_sentence,
                "tokens": p.window.tokens,
                "tags": p.window.tags,
                "loss": l.to_string(),
            })
        })
        .collect();
    serde_json::Value::Array(items).to_string()
}

/// Batches of similar length: a seeded shuffle, a stable sort by length,
/// fixed-size chunks, then a shuffle of the chunk order.
fn batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    out.shuffle(rng);
    out
}

/// Runs one epoch of updates and returns the mean window loss.
pub fn train_epoch(reader: &mut Reader, adam: &mut Adam, data: &[Prepared], settings: &TrainSettings, epoch: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let lengths: Vec<usize> = data.iter().map(|p| p.window.len()).collect();
    let mut total = 0.0;
    for batch in batches(&lengths, settings.batch_size, rng) {
        let items: Vec<&Prepared> = batch.iter().map(|&i| &data[i]).collect();
        let model: &Reader = reader;
        let results: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|&i| {
                let seed = settings.seed ^ ((epoch as u64) << 32) ^ i as u64;
                model.loss_and_grad(&data[i].window, &data[i].inputs, Some(seed))
            })
            .collect();
        let mut losses = Vec::with_capacity(items.len());
        let mut sum = Gradients::zeros_like(&reader.params);
        let mut bad = None;
        for r in results {
            match r {
                Ok((l, g)) => {
                    losses.push(l);
                    sum.add_assign(&g);
                }
                Err(Error::NonFinite(msg)) => {
                    losses.push(f64::NAN);
                    bad.get_or_insert(msg);
                }
                Err(e) => return Err(e),
            }
        }
        let norm = sum.global_norm();
        if let Some(msg) = bad.or_else(|| (!losses.iter().all(|l| l.is_finite()) || !norm.is_finite()).then(|| "loss or gradient".to_string())) {
            return Err(Error::NonFinite(format!("epoch {epoch}: {msg}; batch: {}", batch_dump(&items, &losses))));
        }
        let n = items.len() as f64;
        sum.scale(1.0 / n);
        let norm = norm / n;
        if norm > settings.clip_norm {
            sum.scale(settings.clip_norm / norm);
        }
        adam.step(&mut reader.params, &sum);
        reader.apply_pins();
        total += losses.iter().sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains `reader` on `train`, scoring `dev` after every epoch. Training
/// stops after `max_epochs` or once `patience` epochs pass without a
/// strictly better dev head-noun macro F1; the best epoch's parameters are
/// returned.
pub fn train(
    reader: &mut Reader,
    settings: &TrainSettings,
    train: &[Prepared],
    dev: &[(Document, GoldKey)],
    emb: Embedder<'_>,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training windows".into()));
    }
    if dev.is_empty() {
        return Err(Error::Invalid("empty dev corpus".into()));
    }
    let checksum = emb.table.checksum();
    let rules = HeadNounRules::default();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = Adam::new(&reader.params, settings);
    reader.apply_pins();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=settings.max_epochs {
        let train_loss = train_epoch(reader, &mut adam, train, settings, epoch, &mut rng)?;
        let report = evaluate_checkpoint(reader, dev, emb, &[MatchMode::HeadNoun, MatchMode::Exact], &rules)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            dev_f1_hn: report.head_noun.as_ref().map_or(0.0, |r| r.macro_f1),
            dev_f1_exact: report.exact.as_ref().map_or(0.0, |r| r.macro_f1),
        };
        on_epoch(&entry)?;
        if best.as_ref().map_or(true, |(f, _, _)| entry.dev_f1_hn > *f) {
            best = Some((entry.dev_f1_hn, epoch, reader.params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(entry);
        if stale >= settings.patience {
            break;
        }
    }
    if emb.table.checksum() != checksum {
        return Err(Error::Invalid("word embeddings changed during training".into()));
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    let mut best_reader = reader.clone();
    best_reader.params = params;
    Ok(TrainOutcome {
        best: best_reader,
        best_epoch,
        log,
        embedding_checksum: checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Filler, RoleLabel};
    use crate::embeddings::{ContextualEmbeddingProvider, WordEmbeddingTable};

    fn corpus() -> Vec<(Document, GoldKey)> {
        let s = |w: &str| w.split_whitespace().map(String::from).collect::<Vec<_>>();
        (0..4)
            .map(|i| {
                let doc = Document::new(
                    format!("d{i}"),
                    vec![s("gunmen attacked the bank"), s("police came later"), s("a bomb exploded")],
                    vec![0, 2],
                )
                .unwrap();
                let mut key = GoldKey::empty(format!("d{i}"));
                key.fillers.insert(RoleLabel::new("PerpInd"), vec![Filler::new(["gunmen"])]);
                key.fillers.insert(RoleLabel::new("Weapon"), vec![Filler::new(["a bomb"])]);
                (doc, key)
            })
            .collect()
    }

    fn table() -> WordEmbeddingTable {
        let words = ["gunmen", "attacked", "the", "bank", "police", "came", "later", "a", "bomb", "exploded"];
        WordEmbeddingTable::from_entries(
            4,
            words
                .iter()
                .enumerate()
                .map(|(i, w)| (*w, (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5).collect::<Vec<_>>())),
        )
        .unwrap()
    }

    struct Setup {
        reader: Reader,
        settings: TrainSettings,
        data: Vec<Prepared>,
        corpus: Vec<(Document, GoldKey)>,
        table: WordEmbeddingTable,
    }

    const STUB: ContextualEmbeddingProvider = ContextualEmbeddingProvider::Stub { dim: 2, seed: 0 };

    fn setup(lr: f64, epochs: usize) -> Setup {
        let mut c = ReaderConfig::multi_granularity();
        c.hidden = 4;
        c.layers = 1;
        let reader = Reader::new(&c, 4, 2).unwrap();
        let corpus = corpus();
        let docs = annotate_corpus(&corpus, &reader.tagset).unwrap();
        let windows = training_windows(&reader.config, &docs, 1).unwrap();
        let table = table();
        let data = prepare_windows(&reader, windows, Embedder { table: &table, provider: &STUB }).unwrap();
        let settings = TrainSettings {
            learning_rate: lr,
            max_epochs: epochs,
            seed: 3,
            ..TrainSettings::default()
        };
        Setup {
            reader,
            settings,
            data,
            corpus,
            table,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut s = setup(0.0, 1);
        let before = s.reader.params.clone();
        let emb = Embedder { table: &s.table, provider: &STUB };
        let out = train(&mut s.reader, &s.settings, &s.data, &s.corpus, emb, |_| Ok(())).unwrap();
        assert_eq!(s.reader.params, before);
        assert_eq!(out.best.params, before);
        assert_eq!(out.embedding_checksum, s.table.checksum());
    }

    #[test]
    fn same_seed_same_log() {
        let run = || {
            let mut s = setup(1e-2, 3);
            let emb = Embedder { table: &s.table, provider: &STUB };
            train(&mut s.reader, &s.settings, &s.data, &s.corpus, emb, |_| Ok(())).unwrap().log
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn eval_windows_follow_config() {
        let corpus = corpus();
        let docs = annotate_corpus(&corpus, &TagSet::default()).unwrap();
        let ks = ReaderConfig::k_sentence(KSpec::Sentences(1));
        assert_eq!(eval_windows(&ks, &docs[0]).unwrap().len(), 3);
        let mg = ReaderConfig::multi_granularity();
        let paras = eval_windows(&mg, &docs[0]).unwrap();
        assert_eq!(paras.iter().map(|w| w.num_sentences()).collect::<Vec<_>>(), [2, 1]);
        assert_eq!(training_k(&mg, corpus.iter().map(|(d, _)| d)).unwrap(), Some(2));
        let chunk = ReaderConfig {
            chunk_budget: 7,
            ..ReaderConfig::k_sentence(KSpec::Chunk)
        };
        assert_eq!(eval_windows(&chunk, &docs[0]).unwrap().len(), 2);
    }

    #[test]
    fn settings_are_checked() {
        let bad = TrainSettings {
            patience: 0,
            ..TrainSettings::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainSettings::default().validate().is_ok());
    }
}
