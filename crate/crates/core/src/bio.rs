//! BIO annotation of documents from gold keys, and the windowing that turns
//! annotated documents into training and evaluation sequences.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Document, Filler, GoldKey, RoleLabel, RoleSet};
use crate::error::{Error, Result};

/// A BIO tag. Role indices refer to positions in the [`TagSet`]'s role list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

/// Tag inventory `[O, B-r1, I-r1, B-r2, I-r2, ...]` plus the two
/// boundary states the CRF uses, which sit just past the emission range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    roles: RoleSet,
}

impl Default for TagSet {
    fn default() -> Self {
        TagSet::new(RoleSet::default())
    }
}

impl TagSet {
    pub fn new(roles: RoleSet) -> Self {
        TagSet { roles }
    }

    pub fn roles(&self) -> &RoleSet {
        &self.roles
    }

    /// Number of emission tags, `2·|roles| + 1`.
    pub fn len(&self) -> usize {
        2 * self.roles.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self) -> usize {
        self.len()
    }

    pub fn stop(&self) -> usize {
        self.len() + 1
    }

    pub fn index(&self, tag: Tag) -> usize {
        match tag {
            Tag::Outside => 0,
            Tag::Begin(r) => 1 + 2 * r,
            Tag::Inside(r) => 2 + 2 * r,
        }
    }

    pub fn tag(&self, index: usize) -> Option<Tag> {
        match index {
            0 => Some(Tag::Outside),
            i if i < self.len() => {
                let r = (i - 1) / 2;
                Some(if i % 2 == 1 { Tag::Begin(r) } else { Tag::Inside(r) })
            }
            _ => None,
        }
    }

    pub fn name(&self, index: usize) -> String {
        match self.tag(index) {
            Some(Tag::Outside) => "O".to_string(),
            Some(Tag::Begin(r)) => format!("B-{}", self.roles.roles()[r]),
            Some(Tag::Inside(r)) => format!("I-{}", self.roles.roles()[r]),
            None if index == self.start() => "<START>".to_string(),
            None if index == self.stop() => "<STOP>".to_string(),
            None => format!("<{index}>"),
        }
    }

    pub fn parse(&self, name: &str) -> Result<usize> {
        if name == "O" {
            return Ok(0);
        }
        let role_of = |r: &str| self.roles.position(&RoleLabel::new(r));
        let parsed = match name.split_once('-') {
            Some(("B", r)) => role_of(r).map(Tag::Begin),
            Some(("I", r)) => role_of(r).map(Tag::Inside),
            _ => None,
        };
        parsed
            .map(|t| self.index(t))
            .ok_or_else(|| Error::Invalid(format!("unknown tag symbol {name:?}")))
    }

    /// True when `to` may follow `from` under BIO: `I-r` only after `B-r`
    /// or `I-r`. `from` may be the START state.
    pub fn allowed(&self, from: usize, to: usize) -> bool {
        match self.tag(to) {
            Some(Tag::Inside(r)) => matches!(self.tag(from), Some(Tag::Begin(q)) | Some(Tag::Inside(q)) if q == r),
            _ => true,
        }
    }

    pub fn is_valid_sequence(&self, tags: &[usize]) -> bool {
        let mut prev = self.start();
        for &t in tags {
            if t >= self.len() || !self.allowed(prev, t) {
                return false;
            }
            prev = t;
        }
        true
    }
}

/// A labelled role span over token positions `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub role: usize,
    pub start: usize,
    pub end: usize,
}

/// Writes B/I tags for each span; spans must not overlap.
pub fn spans_to_tags(tagset: &TagSet, len: usize, spans: &[Span]) -> Vec<usize> {
    let mut tags = vec![0; len];
    for s in spans {
        tags[s.start] = tagset.index(Tag::Begin(s.role));
        for t in &mut tags[s.start + 1..s.end] {
            *t = tagset.index(Tag::Inside(s.role));
        }
    }
    tags
}

/// Maximal `B-r (I-r)*` runs. An orphan `I-r` opens a new span.
pub fn tags_to_spans(tagset: &TagSet, tags: &[usize]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &t) in tags.iter().enumerate() {
        let tag = tagset
            .tag(t)
            .ok_or_else(|| Error::Invalid(format!("unknown tag index {t}")))?;
        match tag {
            Tag::Inside(r) if open.map(|s| s.role) == Some(r) => {
                if let Some(s) = open.as_mut() {
                    s.end = i + 1;
                }
            }
            Tag::Begin(r) | Tag::Inside(r) => {
                spans.extend(open.take());
                open = Some(Span { role: r, start: i, end: i + 1 });
            }
            Tag::Outside => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// A document together with its per-sentence tag indices.
#[derive(Clone, Debug)]
pub struct AnnotatedDocument {
    pub document: Document,
    pub tags: Vec<Vec<usize>>,
    /// Gold fillers none of whose alternatives were tagged anywhere.
    pub unmatched: Vec<(RoleLabel, Filler)>,
}

#[derive(Debug)]
struct Candidate {
    len: usize,
    role: usize,
    sentence: usize,
    start: usize,
    filler: (usize, usize),
}

fn lower_tokens(s: &str) -> Vec<String> {
    tokenize(s).into_iter().map(|t| t.to_lowercase()).collect()
}

/// Tags every case-insensitive, token-aligned occurrence of each gold filler
/// alternative inside a single sentence. Overlaps resolve longest first,
/// then by role order, then by earliest position.
pub fn annotate_document(doc: &Document, key: &GoldKey, tagset: &TagSet) -> Result<AnnotatedDocument> {
    if doc.doc_id != key.doc_id {
        return Err(Error::Invalid(format!(
            "gold key {:?} does not belong to document {:?}",
            key.doc_id, doc.doc_id
        )));
    }
    key.validate(tagset.roles())?;
    let lowered: Vec<Vec<String>> = doc
        .sentences
        .iter()
        .map(|s| s.iter().map(|t| t.to_lowercase()).collect())
        .collect();

    let mut candidates = Vec::new();
    for (role_idx, role) in tagset.roles().roles().iter().enumerate() {
        for (fi, filler) in key.fillers_for(role).iter().enumerate() {
            for alt in &filler.alternatives {
                let needle = lower_tokens(alt);
                if needle.is_empty() {
                    continue;
                }
                for (si, sent) in lowered.iter().enumerate() {
                    if needle.len() > sent.len() {
                        continue;
                    }
                    for start in 0..=sent.len() - needle.len() {
                        if sent[start..start + needle.len()] == needle[..] {
                            candidates.push(Candidate {
                                len: needle.len(),
                                role: role_idx,
                                sentence: si,
                                start,
                                filler: (role_idx, fi),
                            });
                        }
                    }
                }
            }
        }
    }
    candidates.sort_by_key(|c| (std::cmp::Reverse(c.len), c.role, c.sentence, c.start));

    let mut taken: Vec<Vec<bool>> = doc.sentences.iter().map(|s| vec![false; s.len()]).collect();
    let mut spans: Vec<Vec<Span>> = vec![Vec::new(); doc.sentences.len()];
    let mut localized = BTreeSet::new();
    for c in candidates {
        let slots = &mut taken[c.sentence][c.start..c.start + c.len];
        if slots.iter().any(|&t| t) {
            continue;
        }
        slots.iter_mut().for_each(|t| *t = true);
        spans[c.sentence].push(Span {
            role: c.role,
            start: c.start,
            end: c.start + c.len,
        });
        localized.insert(c.filler);
    }

    let tags = doc
        .sentences
        .iter()
        .zip(&spans)
        .map(|(s, sp)| spans_to_tags(tagset, s.len(), sp))
        .collect();

    let mut unmatched = Vec::new();
    for (ri, role) in tagset.roles().roles().iter().enumerate() {
        for (fi, filler) in key.fillers_for(role).iter().enumerate() {
            if !localized.contains(&(ri, fi)) {
                unmatched.push((role.clone(), filler.clone()));
            }
        }
    }

    Ok(AnnotatedDocument {
        document: doc.clone(),
        tags,
        unmatched,
    })
}

/// A window of consecutive sentences with aligned tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSequence {
    pub doc_id: String,
    pub start_sentence: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
    pub sentence_lengths: Vec<usize>,
}

impl TaggedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_lengths.len()
    }

    /// Index one past the last sentence of the window.
    pub fn end_sentence(&self) -> usize {
        self.start_sentence + self.sentence_lengths.len()
    }

    pub fn is_positive(&self) -> bool {
        self.tags.iter().any(|&t| t != 0)
    }

    /// Token offsets of each sentence as half-open ranges.
    pub fn sentence_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut offset = 0;
        self.sentence_lengths
            .iter()
            .map(|&l| {
                let r = offset..offset + l;
                offset += l;
                r
            })
            .collect()
    }

    pub fn check(&self, tagset: &TagSet) -> Result<()> {
        let total: usize = self.sentence_lengths.iter().sum();
        if self.tokens.len() != total || self.tags.len() != total {
            return Err(Error::Invalid(format!(
                "window {}@{}: {} tokens, {} tags, sentence lengths sum to {total}",
                self.doc_id,
                self.start_sentence,
                self.tokens.len(),
                self.tags.len()
            )));
        }
        if self.sentence_lengths.iter().any(|&l| l == 0) {
            return Err(Error::Invalid(format!("window {}@{} has an empty sentence", self.doc_id, self.start_sentence)));
        }
        if !tagset.is_valid_sequence(&self.tags) {
            return Err(Error::Invalid(format!("window {}@{} is not BIO-valid", self.doc_id, self.start_sentence)));
        }
        Ok(())
    }
}

impl AnnotatedDocument {
    /// The window over sentences `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> TaggedSequence {
        let sents = &self.document.sentences[start..end];
        TaggedSequence {
            doc_id: self.document.doc_id.clone(),
            start_sentence: start,
            tokens: sents.iter().flatten().cloned().collect(),
            tags: self.tags[start..end].iter().flatten().copied().collect(),
            sentence_lengths: sents.iter().map(Vec::len).collect(),
        }
    }

    pub fn num_sentences(&self) -> usize {
        self.document.num_sentences()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("window size k must be at least 1".into()));
    }
    Ok(())
}

/// One overlapping candidate per starting sentence, truncated at the end of
/// the document.
pub fn candidate_windows(doc: &AnnotatedDocument, k: usize) -> Result<Vec<TaggedSequence>> {
    check_k(k)?;
    let n = doc.num_sentences();
    Ok((0..n).map(|i| doc.window(i, (i + k).min(n))).collect())
}

/// Keeps all of the smaller of the positive/negative classes plus a
/// uniform sample of the same size from the larger one, then shuffles.
/// When either class is empty every candidate is kept.
pub fn balance_windows(candidates: Vec<TaggedSequence>, seed: u64) -> Vec<TaggedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, neg): (Vec<_>, Vec<_>) = candidates.into_iter().partition(TaggedSequence::is_positive);
    let mut out = if pos.is_empty() || neg.is_empty() {
        pos.into_iter().chain(neg).collect::<Vec<_>>()
    } else {
        let (small, large) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
        let mut picked = rand::seq::index::sample(&mut rng, large.len(), small.len()).into_vec();
        picked.sort_unstable();
        let mut large: Vec<Option<TaggedSequence>> = large.into_iter().map(Some).collect();
        let sampled: Vec<_> = picked.into_iter().filter_map(|i| large[i].take()).collect();
        small.into_iter().chain(sampled).collect()
    };
    out.shuffle(&mut rng);
    out
}

pub fn build_training_windows(doc: &AnnotatedDocument, k: usize, seed: u64) -> Result<Vec<TaggedSequence>> {
    Ok(balance_windows(candidate_windows(doc, k)?, seed))
}

/// Contiguous, non-overlapping windows of `k` sentences; the last may be short.
pub fn build_eval_windows(doc: &AnnotatedDocument, k: usize) -> Result<Vec<TaggedSequence>> {
    check_k(k)?;
    let n = doc.num_sentences();
    Ok((0..n).step_by(k).map(|i| doc.window(i, (i + k).min(n))).collect())
}

/// One window per actual paragraph.
pub fn build_paragraph_windows(doc: &AnnotatedDocument) -> Vec<TaggedSequence> {
    doc.document
        .paragraphs()
        .into_iter()
        .map(|r| doc.window(r.start, r.end))
        .collect()
}

/// Mean paragraph length in sentences over the corpus, rounded half up,
/// at least 1.
pub fn paragraph_k<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Result<usize> {
    let (mut total, mut count) = (0usize, 0usize);
    for doc in docs {
        for p in doc.paragraphs() {
            total += p.len();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("cannot compute paragraph k of an empty corpus".into()));
    }
    let mean = total as f64 / count as f64;
    Ok(((mean + 0.5).floor() as usize).max(1))
}

/// Largest `k` (at most the number of sentences) such that every run of
/// `k` consecutive sentences fits within `token_budget`. With a subword
/// ratio each sentence counts as `ceil(len · ratio)` units.
pub fn chunk_k(sentence_lengths: &[usize], token_budget: usize, subword_ratio: Option<f64>) -> Result<usize> {
    if sentence_lengths.is_empty() {
        return Err(Error::Invalid("cannot compute chunk k of an empty document".into()));
    }
    let units: Vec<usize> = sentence_lengths
        .iter()
        .map(|&l| match subword_ratio {
            Some(r) => (l as f64 * r).ceil() as usize,
            None => l,
        })
        .collect();
    if let Some((i, &u)) = units.iter().enumerate().find(|(_, &u)| u > token_budget) {
        return Err(Error::Invalid(format!(
            "sentence {i} has length {u}, exceeding the chunk budget of {token_budget}"
        )));
    }
    let fits = |k: usize| units.windows(k).all(|w| w.iter().sum::<usize>() <= token_budget);
    let mut k = 1;
    while k < units.len() && fits(k + 1) {
        k += 1;
    }
    Ok(k)
}

pub fn chunk_k_for(doc: &Document, token_budget: usize, subword_ratio: Option<f64>) -> Result<usize> {
    let lengths: Vec<usize> = doc.sentences.iter().map(Vec::len).collect();
    chunk_k(&lengths, token_budget, subword_ratio)
        .map_err(|e| Error::Invalid(format!("document {}: {e}", doc.doc_id)))
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowRecord {
    doc_id: String,
    start_sentence: usize,
    tokens: Vec<String>,
    tags: Vec<String>,
    sentence_lengths: Vec<usize>,
}

pub fn write_windows<W: Write>(mut w: W, tagset: &TagSet, windows: &[TaggedSequence]) -> Result<()> {
    for win in windows {
        let rec = WindowRecord {
            doc_id: win.doc_id.clone(),
            start_sentence: win.start_sentence,
            tokens: win.tokens.clone(),
            tags: win.tags.iter().map(|&t| tagset.name(t)).collect(),
            sentence_lengths: win.sentence_lengths.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_windows(path: impl AsRef<Path>, tagset: &TagSet, windows: &[TaggedSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_windows(&mut w, tagset, windows)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_windows<R: BufRead>(reader: R, tagset: &TagSet) -> Result<Vec<TaggedSequence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WindowRecord = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            line: i + 1,
            field: "window".into(),
            message: e.to_string(),
        })?;
        let tags = rec.tags.iter().map(|t| tagset.parse(t)).collect::<Result<Vec<_>>>()?;
        let seq = TaggedSequence {
            doc_id: rec.doc_id,
            start_sentence: rec.start_sentence,
            tokens: rec.tokens,
            tags,
            sentence_lengths: rec.sentence_lengths,
        };
        seq.check(tagset)?;
        out.push(seq);
    }
    Ok(out)
}

pub fn load_windows(path: impl AsRef<Path>, tagset: &TagSet) -> Result<Vec<TaggedSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_windows(BufReader::new(file), tagset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(words: &str) -> Vec<String> {
        words.split_whitespace().map(String::from).collect()
    }

    fn doc(n: usize) -> Document {
        let sentences = (0..n).map(|i| sent(&format!("w{i} x{i}"))).collect();
        Document::new("d", sentences, vec![0]).unwrap()
    }

    fn key(doc_id: &str, entries: &[(&str, &str)]) -> GoldKey {
        let mut k = GoldKey::empty(doc_id);
        for (role, text) in entries {
            k.fillers.entry(RoleLabel::new(*role)).or_default().push(Filler::new([*text]));
        }
        k
    }

    fn names(ts: &TagSet, tags: &[usize]) -> Vec<String> {
        tags.iter().map(|&t| ts.name(t)).collect()
    }

    #[test]
    fn tagset_layout() {
        let ts = TagSet::default();
        assert_eq!(ts.len(), 11);
        assert_eq!((ts.start(), ts.stop()), (11, 12));
        for i in 0..ts.len() {
            assert_eq!(ts.parse(&ts.name(i)).unwrap(), i);
            assert_eq!(ts.index(ts.tag(i).unwrap()), i);
        }
        assert!(ts.parse("B-Nobody").is_err());
        assert!(ts.tag(11).is_none());
    }

    #[test]
    fn tags_planted_filler() {
        let ts = TagSet::default();
        let d = Document::new("d", vec![sent("four terrorists kidnapped him")], vec![0]).unwrap();
        let a = annotate_document(&d, &key("d", &[("PerpInd", "Four Terrorists")]), &ts).unwrap();
        assert_eq!(names(&ts, &a.tags[0]), ["B-PerpInd", "I-PerpInd", "O", "O"]);
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn empty_key_is_all_outside() {
        let ts = TagSet::default();
        let d = doc(3);
        let a = annotate_document(&d, &GoldKey::empty("d"), &ts).unwrap();
        assert!(a.tags.iter().flatten().all(|&t| t == 0));
    }

    #[test]
    fn longest_match_wins() {
        let ts = TagSet::default();
        let d = Document::new("d", vec![sent("the bank burned")], vec![0]).unwrap();
        let a = annotate_document(&d, &key("d", &[("Target", "bank"), ("Target", "the bank")]), &ts).unwrap();
        assert_eq!(names(&ts, &a.tags[0]), ["B-Target", "I-Target", "O"]);
        // "bank" was consumed by the longer match, so it is reported as never localized.
        assert_eq!(a.unmatched.len(), 1);
    }

    #[test]
    fn equal_length_overlap_prefers_earlier_role() {
        let ts = TagSet::default();
        let d = Document::new("d", vec![sent("the guerrillas fled")], vec![0]).unwrap();
        let a = annotate_document(&d, &key("d", &[("Victim", "guerrillas"), ("PerpInd", "guerrillas")]), &ts).unwrap();
        assert_eq!(names(&ts, &a.tags[0]), ["O", "B-PerpInd", "O"]);
    }

    #[test]
    fn fillers_do_not_cross_sentences() {
        let ts = TagSet::default();
        let d = Document::new("d", vec![sent("a car"), sent("bomb went off")], vec![0]).unwrap();
        let a = annotate_document(&d, &key("d", &[("Weapon", "car bomb")]), &ts).unwrap();
        assert!(a.tags.iter().flatten().all(|&t| t == 0));
        assert_eq!(a.unmatched.len(), 1);
    }

    #[test]
    fn mismatched_doc_id() {
        assert!(annotate_document(&doc(1), &GoldKey::empty("other"), &TagSet::default()).is_err());
    }

    #[test]
    fn candidate_windows_truncate_at_end() {
        let ts = TagSet::default();
        let a = annotate_document(&doc(5), &GoldKey::empty("d"), &ts).unwrap();
        let w = candidate_windows(&a, 2).unwrap();
        let spans: Vec<_> = w.iter().map(|w| (w.start_sentence, w.end_sentence())).collect();
        assert_eq!(spans, [(0, 2), (1, 3), (2, 4), (3, 5), (4, 5)]);
        assert!(candidate_windows(&a, 0).is_err());
        assert!(build_training_windows(&a, 0, 1).is_err());
    }

    #[test]
    fn all_positive_keeps_everything() {
        let ts = TagSet::default();
        let d = doc(4);
        let entries: Vec<(&str, String)> = (0..4).map(|i| ("Victim", format!("w{i}"))).collect();
        let mut k = GoldKey::empty("d");
        for (r, t) in &entries {
            k.fillers.entry(RoleLabel::new(*r)).or_default().push(Filler::new([t.as_str()]));
        }
        let a = annotate_document(&d, &k, &ts).unwrap();
        let w = build_training_windows(&a, 1, 9).unwrap();
        assert_eq!(w.len(), 4);
    }

    #[test]
    fn training_windows_are_seeded() {
        let ts = TagSet::default();
        let a = annotate_document(&doc(12), &key("d", &[("Victim", "w3"), ("Weapon", "x7")]), &ts).unwrap();
        let w1 = build_training_windows(&a, 2, 42).unwrap();
        let w2 = build_training_windows(&a, 2, 42).unwrap();
        assert_eq!(w1, w2);
        let pos = w1.iter().filter(|w| w.is_positive()).count();
        assert_eq!(pos * 2, w1.len());
    }

    #[test]
    fn eval_windows_partition() {
        let ts = TagSet::default();
        let a = annotate_document(&doc(5), &GoldKey::empty("d"), &ts).unwrap();
        let spans = |k| {
            build_eval_windows(&a, k)
                .unwrap()
                .iter()
                .map(|w| (w.start_sentence, w.end_sentence()))
                .collect::<Vec<_>>()
        };
        assert_eq!(spans(2), [(0, 2), (2, 4), (4, 5)]);
        assert_eq!(spans(7), [(0, 5)]);
        assert_eq!(spans(1).len(), 5);
        assert!(build_eval_windows(&a, 0).is_err());
    }

    #[test]
    fn paragraph_windows_follow_starts() {
        let ts = TagSet::default();
        let sentences = (0..5).map(|i| sent(&format!("s{i}"))).collect();
        let d = Document::new("d", sentences, vec![0, 2, 3]).unwrap();
        let a = annotate_document(&d, &GoldKey::empty("d"), &ts).unwrap();
        let w: Vec<_> = build_paragraph_windows(&a).iter().map(|w| w.num_sentences()).collect();
        assert_eq!(w, [2, 1, 2]);
    }

    #[test]
    fn paragraph_k_rounds_half_up() {
        let mk = |starts: Vec<usize>, n: usize| {
            Document::new("d", (0..n).map(|_| sent("a")).collect(), starts).unwrap()
        };
        assert_eq!(paragraph_k([&mk(vec![0, 2], 6)]).unwrap(), 3);
        assert_eq!(paragraph_k([&mk(vec![0, 1, 2], 3)]).unwrap(), 1);
        assert_eq!(paragraph_k([&mk(vec![0, 1], 3)]).unwrap(), 2);
        assert!(paragraph_k(std::iter::empty()).is_err());
    }

    #[test]
    fn chunk_k_cases() {
        assert_eq!(chunk_k(&[10; 60], 512, None).unwrap(), 51);
        assert_eq!(chunk_k(&[7, 9, 8], 9, None).unwrap(), 1);
        assert_eq!(chunk_k(&[100, 300, 200, 250], 512, None).unwrap(), 2);
        assert_eq!(chunk_k(&[10; 5], 512, None).unwrap(), 5);
        assert_eq!(chunk_k(&[10; 60], 512, Some(1.5)).unwrap(), 34);
        let err = chunk_k(&[10, 600], 512, None).unwrap_err().to_string();
        assert!(err.contains("sentence 1"), "{err}");
    }

    /// Exhaustive check of the chunk size: every contiguous run of k sentences
    /// is summed directly.
    fn chunk_oracle(lengths: &[usize], budget: usize) -> usize {
        (1..=lengths.len())
            .filter(|&k| (0..=lengths.len() - k).all(|i| lengths[i..i + k].iter().sum::<usize>() <= budget))
            .max()
            .unwrap()
    }

    #[test]
    fn window_dump_round_trip() {
        let ts = TagSet::default();
        let a = annotate_document(&doc(3), &key("d", &[("Weapon", "w1 x1")]), &ts).unwrap();
        let w = build_eval_windows(&a, 2).unwrap();
        let mut buf = Vec::new();
        write_windows(&mut buf, &ts, &w).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"B-Weapon\""));
        assert_eq!(read_windows(buf.as_slice(), &ts).unwrap(), w);
    }

    fn arb_spans(len: usize) -> impl Strategy<Value = Vec<Span>> {
        proptest::collection::vec((0..5usize, 1..4usize, 0..3usize), 0..8).prop_map(move |raw| {
            let mut spans = Vec::new();
            let mut pos = 0;
            for (role, l, gap) in raw {
                let start = pos + gap;
                if start + l > len {
                    break;
                }
                spans.push(Span { role, start, end: start + l });
                pos = start + l;
            }
            spans
        })
    }

    proptest! {
        #[test]
        fn bio_round_trip(spans in arb_spans(30)) {
            let ts = TagSet::default();
            let tags = spans_to_tags(&ts, 30, &spans);
            prop_assert!(ts.is_valid_sequence(&tags));
            prop_assert_eq!(tags_to_spans(&ts, &tags).unwrap(), spans);
        }

        #[test]
        fn annotation_is_bio_valid(
            words in proptest::collection::vec(proptest::collection::vec(0..6u8, 1..8), 1..6),
            gold in proptest::collection::vec((0..5usize, proptest::collection::vec(0..6u8, 1..4)), 0..6),
        ) {
            let ts = TagSet::default();
            let sentences: Vec<Vec<String>> = words.iter().map(|s| s.iter().map(|w| format!("t{w}")).collect()).collect();
            let d = Document::new("d", sentences, vec![0]).unwrap();
            let mut k = GoldKey::empty("d");
            for (role, toks) in gold {
                let text: Vec<String> = toks.iter().map(|w| format!("T{w}")).collect();
                k.fillers.entry(ts.roles().roles()[role].clone()).or_default().push(Filler::new([text.join(" ")]));
            }
            let a = annotate_document(&d, &k, &ts).unwrap();
            for s in &a.tags {
                prop_assert!(ts.is_valid_sequence(s));
            }
        }

        #[test]
        fn eval_windows_reconstruct_stream(n in 1..15usize, k in 1..6usize) {
            let ts = TagSet::default();
            let a = annotate_document(&doc(n), &GoldKey::empty("d"), &ts).unwrap();
            let flat: Vec<String> = build_eval_windows(&a, k).unwrap().into_iter().flat_map(|w| w.tokens).collect();
            let expect: Vec<String> = a.document.tokens().map(String::from).collect();
            prop_assert_eq!(flat, expect);
        }

        #[test]
        fn balanced_classes(n in 2..20usize, planted in proptest::collection::vec(0..20usize, 0..6), seed in 0..1000u64) {
            let ts = TagSet::default();
            let mut k = GoldKey::empty("d");
            for p in planted {
                k.fillers.entry(RoleLabel::new("Victim")).or_default().push(Filler::new([format!("w{}", p % n)]));
            }
            let a = annotate_document(&doc(n), &k, &ts).unwrap();
            let cands = candidate_windows(&a, 2).unwrap();
            let np = cands.iter().filter(|w| w.is_positive()).count();
            let nn = cands.len() - np;
            let out = build_training_windows(&a, 2, seed).unwrap();
            let op = out.iter().filter(|w| w.is_positive()).count();
            if np == 0 || nn == 0 {
                prop_assert_eq!(out.len(), cands.len());
            } else {
                prop_assert_eq!(op, np.min(nn));
                prop_assert_eq!(out.len() - op, np.min(nn));
            }
        }

        #[test]
        fn chunk_k_matches_exhaustive(lengths in proptest::collection::vec(1..50usize, 1..12), budget in 50..200usize) {
            prop_assert_eq!(chunk_k(&lengths, budget, None).unwrap(), chunk_oracle(&lengths, budget));
        }
    }
}
