//! The k-sentence reader and the multi-granularity reader.
//!
//! Both embed tokens (frozen word vectors concatenated with contextual
//! vectors), encode them with BiLSTM stacks, project to per-tag emission
//! scores with one affine layer, and put a CRF (or an independent softmax)
//! on top.
//!
//! The multi-granularity reader runs a sentence-level BiLSTM over each
//! sentence of a paragraph separately and a paragraph-level BiLSTM over the
//! whole paragraph, then fuses the two per-token encodings either by sum or
//! through the gate `g = σ(p̃·W1 + p̂·W2 + b)`, `p = g⊙p̃ + (1−g)⊙p̂`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bio::{TagSet, TaggedSequence};
use crate::corpus::RoleSet;
use crate::crf::{self, FORBIDDEN};
use crate::embeddings::{embed_tokens, ContextSpan, ContextualEmbeddingProvider, Granularity, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::nn::{grad_check, GradCheckReport, GradCheckSettings, Gradients, Graph, LstmStack, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ksentence,
    MultiGranularity,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ksentence" | "k_sentence" => Ok(Variant::Ksentence),
            "multi_granularity" | "mg" => Ok(Variant::MultiGranularity),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Gated,
    Sum,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Fusion::Gated),
            "sum" => Ok(Fusion::Sum),
            _ => Err(Error::Config(format!("unknown fusion {s:?}"))),
        }
    }
}

/// How many sentences a window spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KSpec {
    Sentences(usize),
    /// Training windows use the rounded mean paragraph length; evaluation
    /// windows are the actual paragraphs.
    Paragraph,
    /// As many sentences as fit in the chunk token budget, per document.
    Chunk,
}

impl FromStr for KSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paragraph" => Ok(KSpec::Paragraph),
            "chunk" => Ok(KSpec::Chunk),
            n => match n.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(KSpec::Sentences(k)),
                _ => Err(Error::Config(format!("invalid k {s:?}: expected a positive integer, `paragraph` or `chunk`"))),
            },
        }
    }
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Sentences(k) => write!(f, "{k}"),
            KSpec::Paragraph => f.write_str("paragraph"),
            KSpec::Chunk => f.write_str("chunk"),
        }
    }
}

impl Serialize for KSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KSpec::Sentences(k) => s.serialize_u64(*k as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for KSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => KSpec::from_str(&k.to_string()),
            Raw::Str(s) => KSpec::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

fn default_true() -> bool {
    true
}
fn default_hidden() -> usize {
    100
}
fn default_layers() -> usize {
    3
}
fn default_chunk_budget() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub variant: Variant,
    pub k: KSpec,
    pub fusion: Fusion,
    #[serde(default = "default_true")]
    pub use_contextual: bool,
    #[serde(default = "default_true")]
    pub use_crf: bool,
    /// Pin BIO-invalid transitions to the forbidden score.
    #[serde(default)]
    pub hard_bio_mask: bool,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Dropout rate on encoder outputs during training; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chunk_budget")]
    pub chunk_budget: usize,
    /// Subword units per word token, for chunk sizing against a subword budget.
    #[serde(default)]
    pub subword_ratio: Option<f64>,
    #[serde(default)]
    pub roles: RoleSet,
    /// Input widths, fixed when the model is built.
    #[serde(default)]
    pub word_dim: usize,
    #[serde(default)]
    pub ctx_dim: usize,
}

impl ReaderConfig {
    pub fn multi_granularity() -> Self {
        ReaderConfig {
            variant: Variant::MultiGranularity,
            k: KSpec::Paragraph,
            fusion: Fusion::Gated,
            use_contextual: true,
            use_crf: true,
            hard_bio_mask: false,
            hidden: default_hidden(),
            layers: default_layers(),
            dropout: 0.0,
            seed: 0,
            chunk_budget: default_chunk_budget(),
            subword_ratio: None,
            roles: RoleSet::default(),
            word_dim: 0,
            ctx_dim: 0,
        }
    }

    pub fn k_sentence(k: KSpec) -> Self {
        ReaderConfig {
            variant: Variant::Ksentence,
            k,
            ..Self::multi_granularity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::MultiGranularity && self.k != KSpec::Paragraph {
            return Err(Error::Config("the multi-granularity reader reads paragraph windows; k must be `paragraph`".into()));
        }
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("hidden size and layer count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.chunk_budget == 0 {
            return Err(Error::Config("chunk budget must be positive".into()));
        }
        if let Some(r) = self.subword_ratio {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("subword ratio {r} must be positive")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + if self.use_contextual { self.ctx_dim } else { 0 }
    }
}

/// Frozen embedding resources shared by every window.
#[derive(Clone, Copy)]
pub struct Embedder<'a> {
    pub table: &'a WordEmbeddingTable,
    pub provider: &'a ContextualEmbeddingProvider,
}

/// Embedded inputs of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInputs {
    /// Each sentence embedded in its own context (multi-granularity only).
    pub sentence_level: Option<Tensor>,
    /// The window embedded as one context.
    pub window_level: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateParams {
    pub w_sentence: ParamId,
    pub w_paragraph: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Encoders {
    KSentence(LstmStack),
    MultiGranularity {
        sentence: LstmStack,
        paragraph: LstmStack,
        gate: Option<GateParams>,
    },
}

/// Parameter layout of a reader.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub encoders: Encoders,
    pub emit_w: ParamId,
    pub emit_b: ParamId,
    pub transitions: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reader {
    pub config: ReaderConfig,
    pub tagset: TagSet,
    pub layout: Layout,
    pub params: ParamStore,
    pins: Vec<usize>,
}

impl Reader {
    /// Builds a reader with seeded initial weights for inputs of
    /// `word_dim + ctx_dim` columns.
    pub fn new(config: &ReaderConfig, word_dim: usize, ctx_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        config.word_dim = word_dim;
        config.ctx_dim = if config.use_contextual { ctx_dim } else { 0 };
        let tagset = TagSet::new(config.roles.clone());
        let input = config.input_dim();
        if input == 0 {
            return Err(Error::Config("reader has no input features".into()));
        }
        let (h, layers) = (config.hidden, config.layers);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();

        let encoders = match config.variant {
            Variant::Ksentence => Encoders::KSentence(LstmStack::new(&mut params, "encoder", input, h, layers, &mut rng)?),
            Variant::MultiGranularity => {
                let sentence = LstmStack::new(&mut params, "sentence_encoder", input, h, layers, &mut rng)?;
                let paragraph = LstmStack::new(&mut params, "paragraph_encoder", input, h, layers, &mut rng)?;
                let gate = match config.fusion {
                    Fusion::Gated => {
                        let bound = 1.0 / ((2 * h) as f64).sqrt();
                        Some(GateParams {
                            w_sentence: params.add_uniform("fusion.w_sentence", 2 * h, 2 * h, bound, &mut rng),
                            w_paragraph: params.add_uniform("fusion.w_paragraph", 2 * h, 2 * h, bound, &mut rng),
                            bias: params.add("fusion.b", Tensor::zeros(1, 2 * h)),
                        })
                    }
                    Fusion::Sum => None,
                };
                Encoders::MultiGranularity { sentence, paragraph, gate }
            }
        };
        let t = tagset.len();
        let bound = 1.0 / ((2 * h) as f64).sqrt();
        let emit_w = params.add_uniform("emission.w", 2 * h, t, bound, &mut rng);
        let emit_b = params.add("emission.b", Tensor::zeros(1, t));
        let transitions = config
            .use_crf
            .then(|| params.add("crf.transitions", crf::init_transitions(&tagset, config.hard_bio_mask)));
        let pins = if config.use_crf {
            crf::pinned_transitions(&tagset, config.hard_bio_mask)
                .into_iter()
                .map(|(i, j)| i * (t + 2) + j)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Reader {
            config,
            tagset,
            layout: Layout {
                encoders,
                emit_w,
                emit_b,
                transitions,
            },
            params,
            pins,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.tagset.len()
    }

    /// Re-imposes the fixed transition scores.
    pub fn apply_pins(&mut self) {
        if let Some(a) = self.layout.transitions {
            let data = self.params.get_mut(a).data_mut();
            for &i in &self.pins {
                data[i] = FORBIDDEN;
            }
        }
    }

    /// Clears gradient entries of fixed transition scores.
    pub fn mask_pinned(&self, grads: &mut Gradients) {
        if let Some(a) = self.layout.transitions {
            let data = grads.get_mut(a).data_mut();
            for &i in &self.pins {
                data[i] = 0.0;
            }
        }
    }

    /// Embeds a window at the granularities this reader consumes.
    ///
    /// The k-sentence reader treats a one-sentence window as sentence
    /// context and a longer window as paragraph context.
    pub fn prepare(&self, window: &TaggedSequence, emb: Embedder<'_>) -> Result<WindowInputs> {
        if window.is_empty() {
            return Err(Error::Shape(format!("window {}@{} is empty", window.doc_id, window.start_sentence)));
        }
        let zero = ContextualEmbeddingProvider::Zero;
        let provider = if self.config.use_contextual { emb.provider } else { &zero };
        if emb.table.dim() != self.config.word_dim || provider.dim() != self.config.ctx_dim {
            return Err(Error::Config(format!(
                "reader expects word/contextual widths {}/{}, resources provide {}/{}",
                self.config.word_dim,
                self.config.ctx_dim,
                emb.table.dim(),
                provider.dim()
            )));
        }
        let last = window.end_sentence() - 1;
        let span = ContextSpan::new(window.start_sentence, last);
        match self.config.variant {
            Variant::Ksentence => {
                let gran = if window.num_sentences() == 1 { Granularity::Sentence } else { Granularity::Paragraph };
                let window_level = embed_tokens(emb.table, provider, &window.doc_id, &window.tokens, gran, span)?;
                Ok(WindowInputs {
                    sentence_level: None,
                    window_level,
                })
            }
            Variant::MultiGranularity => {
                let window_level = embed_tokens(emb.table, provider, &window.doc_id, &window.tokens, Granularity::Paragraph, span)?;
                let parts = window
                    .sentence_ranges()
                    .into_iter()
                    .enumerate()
                    .map(|(j, r)| {
                        embed_tokens(
                            emb.table,
                            provider,
                            &window.doc_id,
                            &window.tokens[r],
                            Granularity::Sentence,
                            ContextSpan::single(window.start_sentence + j),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = parts.iter().collect();
                Ok(WindowInputs {
                    sentence_level: Some(Tensor::concat_rows(&refs)?),
                    window_level,
                })
            }
        }
    }

    fn sentence_encoding(&self, g: &mut Graph<'_>, stack: &LstmStack, window: &TaggedSequence, inputs: &WindowInputs) -> Result<NodeId> {
        let x = inputs
            .sentence_level
            .as_ref()
            .ok_or_else(|| Error::Shape("sentence-level inputs missing".into()))?;
        let mut parts = Vec::with_capacity(window.num_sentences());
        for r in window.sentence_ranges() {
            if r.is_empty() {
                return Err(Error::Shape("empty sentence in window".into()));
            }
            let xs = g.input(x.slice_rows(r.start, r.len()));
            parts.push(stack.forward(g, xs)?);
        }
        g.concat_rows(&parts)
    }

    /// Per-token encoder output (`m × 2h`) before the emission projection.
    fn encode(&self, g: &mut Graph<'_>, window: &TaggedSequence, inputs: &WindowInputs) -> Result<NodeId> {
        if inputs.window_level.rows() != window.len() {
            return Err(Error::Shape("inputs do not match window length".into()));
        }
        match &self.layout.encoders {
            Encoders::KSentence(stack) => {
                let x = g.input(inputs.window_level.clone());
                stack.forward(g, x)
            }
            Encoders::MultiGranularity { sentence, paragraph, gate } => {
                let p_sent = self.sentence_encoding(g, sentence, window, inputs)?;
                let x = g.input(inputs.window_level.clone());
                let p_para = paragraph.forward(g, x)?;
                let fused = match gate {
                    Some(gp) => gated_fusion_node(g, gp, p_sent, p_para)?,
                    None => g.add(p_sent, p_para)?,
                };
                g.value(fused).check_finite("fused representation")?;
                Ok(fused)
            }
        }
    }

    fn emissions_node(&self, g: &mut Graph<'_>, window: &TaggedSequence, inputs: &WindowInputs, dropout_seed: Option<u64>) -> Result<NodeId> {
        let mut p = self.encode(g, window, inputs)?;
        if let (Some(seed), rate) = (dropout_seed, self.config.dropout) {
            if rate > 0.0 {
                let [m, w] = g.value(p).shape();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 - rate;
                let mask = (0..m * w).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let mask = g.input(Tensor::new(m, w, mask)?);
                p = g.mul(p, mask)?;
            }
        }
        let w = g.param(self.layout.emit_w);
        let b = g.param(self.layout.emit_b);
        let e = g.matmul(p, w)?;
        let e = g.add_row(e, b)?;
        g.value(e).check_finite("emission scores")?;
        Ok(e)
    }

    fn loss_node(&self, g: &mut Graph<'_>, window: &TaggedSequence, inputs: &WindowInputs, dropout_seed: Option<u64>) -> Result<NodeId> {
        let e = self.emissions_node(g, window, inputs, dropout_seed)?;
        match self.layout.transitions {
            Some(a) => {
                let a = g.param(a);
                g.crf_nll(e, a, &window.tags)
            }
            None => g.softmax_xent(e, &window.tags),
        }
    }

    /// Training loss of one window under `params` (which must share this
    /// reader's layout).
    pub fn loss_with(&self, params: &ParamStore, window: &TaggedSequence, inputs: &WindowInputs) -> Result<f64> {
        let mut g = Graph::new(params);
        let l = self.loss_node(&mut g, window, inputs, None)?;
        g.value(l).as_scalar()
    }

    pub fn loss(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<f64> {
        self.loss_with(&self.params, window, inputs)
    }

    /// Loss and parameter gradients of one window.
    pub fn loss_and_grad(&self, window: &TaggedSequence, inputs: &WindowInputs, dropout_seed: Option<u64>) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let l = self.loss_node(&mut g, window, inputs, dropout_seed)?;
        let loss = g.value(l).as_scalar()?;
        let mut grads = g.backward(l)?;
        self.mask_pinned(&mut grads);
        Ok((loss, grads))
    }

    /// Emission matrix `P` (`m × T`).
    pub fn emissions(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let e = self.emissions_node(&mut g, window, inputs, None)?;
        Ok(g.value(e).clone())
    }

    pub fn ksentence_forward(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<Tensor> {
        if self.config.variant != Variant::Ksentence {
            return Err(Error::Config("not a k-sentence reader".into()));
        }
        self.emissions(window, inputs)
    }

    pub fn mg_forward(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<Tensor> {
        if self.config.variant != Variant::MultiGranularity {
            return Err(Error::Config("not a multi-granularity reader".into()));
        }
        self.emissions(window, inputs)
    }

    fn mg_stacks(&self) -> Result<(&LstmStack, &LstmStack, Option<&GateParams>)> {
        match &self.layout.encoders {
            Encoders::MultiGranularity { sentence, paragraph, gate } => Ok((sentence, paragraph, gate.as_ref())),
            Encoders::KSentence(_) => Err(Error::Config("not a multi-granularity reader".into())),
        }
    }

    /// Sentence-level encodings `p̃`: each sentence encoded on its own.
    pub fn sentence_encoder(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<Tensor> {
        let (stack, _, _) = self.mg_stacks()?;
        let mut g = Graph::new(&self.params);
        let n = self.sentence_encoding(&mut g, stack, window, inputs)?;
        Ok(g.value(n).clone())
    }

    /// Paragraph-level encodings `p̂`: one pass over the whole window.
    pub fn paragraph_encoder(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<Tensor> {
        let (_, stack, _) = self.mg_stacks()?;
        if window.is_empty() {
            return Err(Error::Shape("empty paragraph".into()));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(inputs.window_level.clone());
        let n = stack.forward(&mut g, x)?;
        Ok(g.value(n).clone())
    }

    /// Fusion gate activations for a window (gated fusion only).
    pub fn gate_values(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<Tensor> {
        let (_, _, gate) = self.mg_stacks()?;
        let gate = gate.ok_or_else(|| Error::Config("reader uses sum fusion".into()))?;
        let p_sent = self.sentence_encoder(window, inputs)?;
        let p_para = self.paragraph_encoder(window, inputs)?;
        gate_activation(
            self.params.get(gate.w_sentence),
            self.params.get(gate.w_paragraph),
            self.params.get(gate.bias),
            &p_sent,
            &p_para,
        )
    }

    /// Best tag sequence: Viterbi with a CRF head, else per-token argmax.
    pub fn decode(&self, window: &TaggedSequence, inputs: &WindowInputs) -> Result<Vec<usize>> {
        let e = self.emissions(window, inputs)?;
        Ok(decode_emissions(&e, self.layout.transitions.map(|a| self.params.get(a))))
    }

    pub fn gate_params(&self) -> Option<&GateParams> {
        self.mg_stacks().ok().and_then(|(_, _, g)| g)
    }

    /// Compares backpropagated gradients of the window loss with central
    /// differences on a seeded sample of parameter coordinates.
    pub fn gradient_check(&self, window: &TaggedSequence, inputs: &WindowInputs, settings: &GradCheckSettings) -> Result<GradCheckReport> {
        let (_, analytic) = self.loss_and_grad(window, inputs, None)?;
        let mut params = self.params.clone();
        grad_check(&mut params, &analytic, |p| self.loss_with(p, window, inputs), settings)
    }
}

pub fn decode_emissions(emissions: &Tensor, transitions: Option<&Tensor>) -> Vec<usize> {
    match transitions {
        Some(a) => crf::viterbi(emissions, a).expect("reader shapes agree").0,
        None => crf::argmax_decode(emissions),
    }
}

/// Graph form of [`gated_fusion`].
pub fn gated_fusion_node(g: &mut Graph<'_>, gp: &GateParams, p_sent: NodeId, p_para: NodeId) -> Result<NodeId> {
    let w1 = g.param(gp.w_sentence);
    let w2 = g.param(gp.w_paragraph);
    let b = g.param(gp.bias);
    let a1 = g.matmul(p_sent, w1)?;
    let a2 = g.matmul(p_para, w2)?;
    let pre = g.add(a1, a2)?;
    let pre = g.add_row(pre, b)?;
    let gate = g.sigmoid(pre);
    let keep = g.mul(gate, p_sent)?;
    let rest = g.one_minus(gate);
    let other = g.mul(rest, p_para)?;
    g.add(keep, other)
}

/// `σ(p̃·W1 + p̂·W2 + b)` row by row.
pub fn gate_activation(w1: &Tensor, w2: &Tensor, b: &Tensor, p_sent: &Tensor, p_para: &Tensor) -> Result<Tensor> {
    p_sent.same_shape(p_para, "fusion inputs")?;
    let mut pre = p_sent.matmul(w1)?;
    pre.add_assign(&p_para.matmul(w2)?);
    if b.shape() != [1, pre.cols()] {
        return Err(Error::Shape(format!("gate bias {:?} for width {}", b.shape(), pre.cols())));
    }
    for r in 0..pre.rows() {
        for (v, bv) in pre.row_mut(r).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(crate::nn::sigmoid(&pre))
}

/// `g⊙p̃ + (1−g)⊙p̂` with `g` from [`gate_activation`].
pub fn gated_fusion(w1: &Tensor, w2: &Tensor, b: &Tensor, p_sent: &Tensor, p_para: &Tensor) -> Result<Tensor> {
    let gate = gate_activation(w1, w2, b, p_sent, p_para)?;
    let kept = gate.zip_map(p_sent, |g, x| g * x)?;
    let rest = gate.zip_map(p_para, |g, x| (1.0 - g) * x)?;
    kept.zip_map(&rest, |a, b| a + b)
}

pub fn sum_fusion(p_sent: &Tensor, p_para: &Tensor) -> Result<Tensor> {
    p_sent.zip_map(p_para, |a, b| a + b)
}
