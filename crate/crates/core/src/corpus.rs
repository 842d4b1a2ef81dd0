//! Documents, gold role-filler keys and the JSONL corpus format.
//!
//! One record per line:
//!
//! ```text
//! {"doc_id": "DEV-MUC3-0001", "sentences": [["A", "bomb", "exploded", "."]],
//!  "paragraph_starts": [0], "gold": {"Weapon": [["a bomb", "bomb"]]}}
//! ```
//!
//! Each gold entry is a list of alternative strings for the same filler.
//! Roles absent from `gold` have no fillers.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of an event role, e.g. `PerpInd`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoleLabel(String);

impl RoleLabel {
    pub fn new(name: impl Into<String>) -> Self {
        RoleLabel(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RoleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub const DEFAULT_ROLES: [&str; 5] = ["PerpInd", "PerpOrg", "Target", "Victim", "Weapon"];

/// The configured, ordered role inventory. Order is significant: it fixes
/// tag indices and breaks ties between overlapping gold matches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoleSet(Vec<RoleLabel>);

impl Default for RoleSet {
    fn default() -> Self {
        RoleSet(DEFAULT_ROLES.iter().map(|r| RoleLabel::new(*r)).collect())
    }
}

impl RoleSet {
    pub fn new(roles: Vec<RoleLabel>) -> Result<Self> {
        if roles.is_empty() {
            return Err(Error::Config("role set must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for r in &roles {
            if r.as_str().is_empty() || !seen.insert(r.clone()) {
                return Err(Error::Config(format!("invalid or duplicate role {:?}", r.as_str())));
            }
        }
        Ok(RoleSet(roles))
    }

    pub fn roles(&self) -> &[RoleLabel] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, role: &RoleLabel) -> Option<usize> {
        self.0.iter().position(|r| r == role)
    }

    pub fn contains(&self, role: &RoleLabel) -> bool {
        self.position(role).is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub paragraph_starts: Vec<usize>,
}

impl Document {
    /// Builds a document, checking the sentence and paragraph invariants.
    pub fn new(
        doc_id: impl Into<String>,
        sentences: Vec<Vec<String>>,
        paragraph_starts: Vec<usize>,
    ) -> Result<Self> {
        let doc = Document {
            doc_id: doc_id.into(),
            sentences,
            paragraph_starts,
        };
        doc.validate().map_err(|(field, msg)| Error::Document(format!("{field}: {msg}")))?;
        Ok(doc)
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.doc_id.is_empty() {
            return Err(("doc_id", "doc_id must not be empty".into()));
        }
        if self.sentences.is_empty() {
            return Err(("sentences", "document has no sentences".into()));
        }
        for (i, s) in self.sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(("sentences", format!("sentence {i} is empty")));
            }
            for tok in s {
                if tok.is_empty() {
                    return Err(("sentences", format!("sentence {i} contains an empty token")));
                }
                if tok.chars().any(char::is_whitespace) {
                    return Err(("sentences", format!("token {tok:?} in sentence {i} contains whitespace")));
                }
            }
        }
        match self.paragraph_starts.first() {
            Some(0) => {}
            _ => return Err(("paragraph_starts", "paragraph_starts must begin at 0".into())),
        }
        for w in self.paragraph_starts.windows(2) {
            if w[1] <= w[0] {
                return Err(("paragraph_starts", "paragraph_starts must be strictly increasing".into()));
            }
        }
        if let Some(&last) = self.paragraph_starts.last() {
            if last >= self.sentences.len() {
                return Err((
                    "paragraph_starts",
                    format!("paragraph start {last} out of range for {} sentences", self.sentences.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Paragraph extents as half-open sentence ranges.
    pub fn paragraphs(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.sentences.len();
        self.paragraph_starts
            .iter()
            .enumerate()
            .map(|(i, &start)| {
                let end = self.paragraph_starts.get(i + 1).copied().unwrap_or(n);
                start..end
            })
            .collect()
    }

    /// The flat token stream of the whole document.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(String::as_str)
    }
}

/// One gold filler: any of the alternative strings counts as the filler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Filler {
    pub alternatives: Vec<String>,
}

impl Filler {
    pub fn new<S: Into<String>>(alternatives: impl IntoIterator<Item = S>) -> Self {
        Filler {
            alternatives: alternatives.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldKey {
    pub doc_id: String,
    pub fillers: BTreeMap<RoleLabel, Vec<Filler>>,
}

impl GoldKey {
    pub fn empty(doc_id: impl Into<String>) -> Self {
        GoldKey {
            doc_id: doc_id.into(),
            fillers: BTreeMap::new(),
        }
    }

    pub fn fillers_for(&self, role: &RoleLabel) -> &[Filler] {
        self.fillers.get(role).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn validate(&self, roles: &RoleSet) -> Result<()> {
        for (role, fillers) in &self.fillers {
            if !roles.contains(role) {
                return Err(Error::Document(format!("unknown role {role}")));
            }
            for f in fillers {
                if f.alternatives.is_empty() {
                    return Err(Error::Document(format!("{role}: empty alternative list")));
                }
                if f.alternatives.iter().any(|a| a.trim().is_empty()) {
                    return Err(Error::Document(format!("{role}: empty filler string")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    doc_id: String,
    sentences: Vec<Vec<String>>,
    paragraph_starts: Vec<usize>,
    #[serde(default)]
    gold: BTreeMap<String, Vec<Vec<String>>>,
}

fn parse_record(line: &str, lineno: usize, roles: &RoleSet) -> Result<(Document, GoldKey)> {
    let corpus_err = |field: &str, message: String| Error::Corpus {
        line: lineno,
        field: field.to_string(),
        message,
    };
    let rec: Record = serde_json::from_str(line).map_err(|e| corpus_err("record", e.to_string()))?;
    let doc = Document {
        doc_id: rec.doc_id,
        sentences: rec.sentences,
        paragraph_starts: rec.paragraph_starts,
    };
    doc.validate().map_err(|(field, msg)| corpus_err(field, msg))?;

    let mut fillers = BTreeMap::new();
    for (role, entries) in rec.gold {
        let role = RoleLabel::new(role);
        if !roles.contains(&role) {
            return Err(corpus_err("gold", format!("unknown role {role}")));
        }
        let mut out = Vec::with_capacity(entries.len());
        for alts in entries {
            if alts.is_empty() {
                return Err(corpus_err("gold", format!("{role}: alternative list is empty")));
            }
            if alts.iter().any(|a| a.trim().is_empty()) {
                return Err(corpus_err("gold", format!("{role}: filler string is empty")));
            }
            out.push(Filler { alternatives: alts });
        }
        fillers.insert(role, out);
    }
    let key = GoldKey {
        doc_id: doc.doc_id.clone(),
        fillers,
    };
    Ok((doc, key))
}

/// Reads a JSONL corpus. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>, roles: &RoleSet) -> Result<Vec<(Document, GoldKey)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), roles)
}

pub fn read_corpus<R: BufRead>(reader: R, roles: &RoleSet) -> Result<Vec<(Document, GoldKey)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (doc, key) = parse_record(&line, i + 1, roles)?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::Corpus {
                line: i + 1,
                field: "doc_id".into(),
                message: format!("duplicate doc_id {:?}", doc.doc_id),
            });
        }
        out.push((doc, key));
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut writer: W, corpus: &[(Document, GoldKey)]) -> Result<()> {
    for (doc, key) in corpus {
        let rec = Record {
            doc_id: doc.doc_id.clone(),
            sentences: doc.sentences.clone(),
            paragraph_starts: doc.paragraph_starts.clone(),
            gold: key
                .fillers
                .iter()
                .map(|(r, fs)| (r.as_str().to_string(), fs.iter().map(|f| f.alternatives.clone()).collect()))
                .collect(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[(Document, GoldKey)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(&mut w, corpus)?;
    w.flush().map_err(|e| Error::io(path, e))
}

const ABBREVIATIONS: [&str; 5] = ["mr.", "dr.", "u.s.", "st.", "no."];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '—' | '–')
}

fn is_abbreviation(word: &str) -> bool {
    let lower = word.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Whitespace split, then leading and trailing punctuation characters
/// become tokens of their own. Stoplisted abbreviations stay intact.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if is_abbreviation(word) {
            out.push(word.to_string());
            continue;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        while start < chars.len() && is_punct(chars[start]) {
            start += 1;
        }
        let mut end = chars.len();
        while end > start && is_punct(chars[end - 1]) {
            end -= 1;
        }
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

/// Splits one paragraph into sentence strings. A boundary is a `.`, `?` or
/// `!` followed by whitespace and then an uppercase letter or digit, unless
/// the word ending at the mark is a stoplisted abbreviation.
fn split_sentences(paragraph: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = paragraph.char_indices().collect();
    let mut sentences = Vec::new();
    let mut sent_start = 0;
    for (idx, &(byte, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let Some(&(_, next)) = chars.get(idx + 1) else { continue };
        if !next.is_whitespace() {
            continue;
        }
        let following = chars[idx + 1..].iter().map(|&(_, c)| c).find(|c| !c.is_whitespace());
        match following {
            Some(f) if f.is_uppercase() || f.is_ascii_digit() => {}
            _ => continue,
        }
        let end = byte + c.len_utf8();
        let word_start = paragraph[..end]
            .rfind(char::is_whitespace)
            .map(|p| p + paragraph[p..].chars().next().map_or(1, char::len_utf8))
            .unwrap_or(0);
        if is_abbreviation(&paragraph[word_start..end]) {
            continue;
        }
        sentences.push(&paragraph[sent_start..end]);
        sent_start = end;
    }
    sentences.push(&paragraph[sent_start..]);
    sentences.into_iter().filter(|s| !s.trim().is_empty()).collect()
}

/// Splits raw text into tokenized sentences and paragraph starts.
/// Paragraphs are separated by blank lines.
pub fn split_and_tokenize(raw_text: &str) -> Result<(Vec<Vec<String>>, Vec<usize>)> {
    if raw_text.trim().is_empty() {
        return Err(Error::Invalid("cannot split empty or all-whitespace text".into()));
    }
    let mut paragraphs: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in raw_text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                paragraphs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        paragraphs.push(current.join("\n"));
    }

    let mut sentences = Vec::new();
    let mut starts = Vec::new();
    for para in &paragraphs {
        let before = sentences.len();
        for s in split_sentences(para) {
            let toks = tokenize(s);
            if !toks.is_empty() {
                sentences.push(toks);
            }
        }
        if sentences.len() > before {
            starts.push(before);
        }
    }
    Ok((sentences, starts))
}
