//! Frozen word embeddings and contextual token-embedding providers.
//!
//! Word vectors come from GloVe-style text files (`token v1 ... vd` per
//! line). Contextual vectors come from a precomputed CTXE store, a
//! deterministic hash-based stub, or nowhere at all (width 0).
//!
//! CTXE layout, little-endian:
//!
//! ```text
//! "CTXE"  u32 version (=1)  u32 d_c
//! repeated: u16 key_len, key bytes (UTF-8), u32 m, m·d_c f32 (row-major)
//! ```
//!
//! Keys are `doc_id|granularity|start_sentence|end_sentence` with an
//! inclusive end sentence and granularity `sentence` or `paragraph`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_WORD_DIM: usize = 100;

/// Immutable token → vector table. Lookups fall back to the lowercased
/// token and then to the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl WordEmbeddingTable {
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut index = HashMap::new();
        let mut data = Vec::new();
        for (tok, v) in entries {
            if v.len() != dim {
                return Err(Error::Embedding(format!("vector of length {} in a table of dimension {dim}", v.len())));
            }
            let tok = tok.into();
            if index.contains_key(&tok) {
                continue;
            }
            index.insert(tok, index.len());
            data.extend(v);
        }
        Ok(WordEmbeddingTable { dim, index, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn row(&self, token: &str) -> Option<&[f64]> {
        let i = match self.index.get(token) {
            Some(&i) => i,
            None => *self.index.get(&token.to_lowercase())?,
        };
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.row(token).is_some()
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        self.row(token).map_or_else(|| vec![0.0; self.dim], <[f64]>::to_vec)
    }

    /// Digest of the full table contents, independent of hash-map order.
    pub fn checksum(&self) -> String {
        let mut entries: Vec<(&String, &usize)> = self.index.iter().collect();
        entries.sort();
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for (tok, &i) in entries {
            h.update(tok.as_bytes());
            h.update([0u8]);
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_word_embeddings<R: BufRead>(reader: R) -> Result<WordEmbeddingTable> {
    let mut dim = None;
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Embedding(format!("line {}: {e}", i + 1)))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Embedding(format!(
                    "line {}: expected {d} values, found {}",
                    i + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        entries.push((token.to_string(), values));
    }
    let dim = dim.ok_or_else(|| Error::Embedding("empty embedding file".into()))?;
    WordEmbeddingTable::from_entries(dim, entries)
}

pub fn load_word_embeddings(path: impl AsRef<Path>) -> Result<WordEmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_word_embeddings(BufReader::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Sentence,
    Paragraph,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Sentence => "sentence",
            Granularity::Paragraph => "paragraph",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A contiguous run of sentences; `last_sentence` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContextSpan {
    pub first_sentence: usize,
    pub last_sentence: usize,
}

impl ContextSpan {
    pub fn new(first_sentence: usize, last_sentence: usize) -> Self {
        ContextSpan {
            first_sentence,
            last_sentence,
        }
    }

    pub fn single(sentence: usize) -> Self {
        ContextSpan::new(sentence, sentence)
    }
}

pub fn store_key(doc_id: &str, granularity: Granularity, span: ContextSpan) -> String {
    format!("{doc_id}|{granularity}|{}|{}", span.first_sentence, span.last_sentence)
}

const CTXE_MAGIC: &[u8; 4] = b"CTXE";
const CTXE_VERSION: u32 = 1;

/// Precomputed contextual vectors read from a CTXE file.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextStore {
    dim: usize,
    records: HashMap<String, Tensor>,
    order: Vec<String>,
}

impl ContextStore {
    pub fn new(dim: usize) -> Self {
        ContextStore {
            dim,
            records: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.records.get(key)
    }

    /// Keys in file order.
    pub fn keys(&self) -> &[String] {
        &self.order
    }

    /// Adds a record; values are stored at `f32` precision like the file.
    pub fn insert(&mut self, key: impl Into<String>, matrix: &Tensor) -> Result<()> {
        let key = key.into();
        if matrix.cols() != self.dim {
            return Err(Error::Embedding(format!(
                "record {key} has width {}, store has {}",
                matrix.cols(),
                self.dim
            )));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Embedding("record key too long".into()));
        }
        if self.records.contains_key(&key) {
            return Err(Error::Embedding(format!("duplicate record {key}")));
        }
        let rounded = matrix.map(|v| v as f32 as f64);
        self.order.push(key.clone());
        self.records.insert(key, rounded);
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: String| Error::Embedding(format!("CTXE: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(format!("missing header: {e}")))?;
        if &magic != CTXE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CTXE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let mut store = ContextStore::new(dim);
        loop {
            let mut len_bytes = [0u8; 2];
            if r.read(&mut len_bytes[..1])? == 0 {
                break;
            }
            r.read_exact(&mut len_bytes[1..]).map_err(|e| bad(format!("truncated key length: {e}")))?;
            let key_len = u16::from_le_bytes(len_bytes) as usize;
            let mut key = vec![0u8; key_len];
            r.read_exact(&mut key).map_err(|e| bad(format!("truncated key: {e}")))?;
            let key = String::from_utf8(key).map_err(|e| bad(format!("key is not UTF-8: {e}")))?;
            let m = r.read_u32::<LittleEndian>().map_err(|e| bad(format!("truncated record {key}: {e}")))? as usize;
            let mut values = vec![0f32; m * dim];
            r.read_f32_into::<LittleEndian>(&mut values)
                .map_err(|e| bad(format!("truncated record {key}: {e}")))?;
            let t = Tensor::new(m, dim, values.into_iter().map(f64::from).collect())?;
            store.insert(key, &t)?;
        }
        Ok(store)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CTXE_MAGIC)?;
        w.write_u32::<LittleEndian>(CTXE_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for key in &self.order {
            let t = &self.records[key];
            w.write_u16::<LittleEndian>(key.len() as u16)?;
            w.write_all(key.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rows() as u32)?;
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Source of frozen contextual token vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextualEmbeddingProvider {
    /// No contextual features (width 0).
    Zero,
    /// Values in `[-1, 1]` derived from a SHA-256 of
    /// `(seed, doc_id, granularity, span, position, token)`.
    Stub { dim: usize, seed: u64 },
    File(ContextStore),
}

impl ContextualEmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            ContextualEmbeddingProvider::Zero => 0,
            ContextualEmbeddingProvider::Stub { dim, .. } => *dim,
            ContextualEmbeddingProvider::File(s) => s.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ContextualEmbeddingProvider::Zero => "zero",
            ContextualEmbeddingProvider::Stub { .. } => "deterministic_stub",
            ContextualEmbeddingProvider::File(_) => "file_backed",
        }
    }

    /// `|tokens| × d_c` contextual matrix for `tokens` read in the given span.
    pub fn contextual_embed(&self, doc_id: &str, tokens: &[String], granularity: Granularity, span: ContextSpan) -> Result<Tensor> {
        match self {
            ContextualEmbeddingProvider::Zero => Ok(Tensor::zeros(tokens.len(), 0)),
            ContextualEmbeddingProvider::Stub { dim, seed } => {
                let mut data = Vec::with_capacity(tokens.len() * dim);
                for (pos, tok) in tokens.iter().enumerate() {
                    data.extend(stub_vector(*seed, *dim, doc_id, granularity, span, pos, tok));
                }
                Tensor::new(tokens.len(), *dim, data)
            }
            ContextualEmbeddingProvider::File(store) => {
                let key = store_key(doc_id, granularity, span);
                let t = store
                    .get(&key)
                    .ok_or_else(|| Error::Embedding(format!("no contextual record for key {key}")))?;
                if t.rows() != tokens.len() {
                    return Err(Error::Embedding(format!(
                        "record {key} has {} rows for {} tokens",
                        t.rows(),
                        tokens.len()
                    )));
                }
                Ok(t.clone())
            }
        }
    }
}

fn stub_vector(seed: u64, dim: usize, doc_id: &str, granularity: Granularity, span: ContextSpan, pos: usize, token: &str) -> Vec<f64> {
    let mut base = Sha256::new();
    base.update(seed.to_le_bytes());
    for part in [doc_id, granularity.as_str(), token] {
        base.update((part.len() as u64).to_le_bytes());
        base.update(part.as_bytes());
    }
    for n in [span.first_sentence, span.last_sentence, pos] {
        base.update((n as u64).to_le_bytes());
    }
    let mut out = Vec::with_capacity(dim);
    let mut block = 0u64;
    while out.len() < dim {
        let mut h = base.clone();
        h.update(block.to_le_bytes());
        let digest = h.finalize();
        for chunk in digest.chunks_exact(4) {
            if out.len() == dim {
                break;
            }
            let u = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            out.push(u as f64 / u32::MAX as f64 * 2.0 - 1.0);
        }
        block += 1;
    }
    out
}

/// Row `i` is the word vector of `tokens[i]` followed by its contextual row.
pub fn embed_tokens(
    table: &WordEmbeddingTable,
    provider: &ContextualEmbeddingProvider,
    doc_id: &str,
    tokens: &[String],
    granularity: Granularity,
    span: ContextSpan,
) -> Result<Tensor> {
    let ctx = provider.contextual_embed(doc_id, tokens, granularity, span)?;
    let d = table.dim();
    let width = d + ctx.cols();
    let mut data = Vec::with_capacity(tokens.len() * width);
    for (i, tok) in tokens.iter().enumerate() {
        match table.row(tok) {
            Some(r) => data.extend_from_slice(r),
            None => data.extend(std::iter::repeat(0.0).take(d)),
        }
        data.extend_from_slice(ctx.row(i));
    }
    Tensor::new(tokens.len(), width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn loads_text_table() {
        let t = read_word_embeddings("a 0.1 0.2\nb 0.3 0.4\n".as_bytes()).unwrap();
        assert_eq!((t.dim(), t.len()), (2, 2));
        assert_eq!(t.lookup("b"), vec![0.3, 0.4]);
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let err = read_word_embeddings("a 0.1\nb 0.1 0.2\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn empty_file() {
        let err = read_word_embeddings("".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("empty embedding file"));
    }

    #[test]
    fn lookup_fallbacks() {
        let t = read_word_embeddings("bomb 1 2\nBank 3 4\n".as_bytes()).unwrap();
        assert_eq!(t.lookup("Bomb"), vec![1.0, 2.0]);
        assert_eq!(t.lookup("Bank"), vec![3.0, 4.0]);
        assert_eq!(t.lookup("bank"), vec![0.0, 0.0]);
        assert_eq!(t.lookup("unseen"), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_provider_has_no_columns() {
        let m = ContextualEmbeddingProvider::Zero
            .contextual_embed("d", &toks("a b"), Granularity::Sentence, ContextSpan::single(0))
            .unwrap();
        assert_eq!(m.shape(), [2, 0]);
    }

    #[test]
    fn stub_is_deterministic_and_granularity_aware() {
        let p = ContextualEmbeddingProvider::Stub { dim: 20, seed: 3 };
        let t = toks("the bomb exploded");
        let span = ContextSpan::new(0, 0);
        let a = p.contextual_embed("d", &t, Granularity::Sentence, span).unwrap();
        let b = p.contextual_embed("d", &t, Granularity::Sentence, span).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [3, 20]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = p.contextual_embed("d", &t, Granularity::Paragraph, span).unwrap();
        for i in 0..3 {
            assert_ne!(a.row(i), c.row(i));
        }
    }

    #[test]
    fn concatenates_word_and_context() {
        let table = WordEmbeddingTable::from_entries(2, [("x", vec![1.0, 0.0])]).unwrap();
        let mut store = ContextStore::new(2);
        store.insert("d|sentence|0|0", &Tensor::from_rows(&[[0.5, -0.5]]).unwrap()).unwrap();
        let p = ContextualEmbeddingProvider::File(store);
        let m = embed_tokens(&table, &p, "d", &toks("x"), Granularity::Sentence, ContextSpan::single(0)).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.5, -0.5]);

        let stub = ContextualEmbeddingProvider::Stub { dim: 3, seed: 0 };
        let m = embed_tokens(&table, &stub, "d", &toks("x y"), Granularity::Sentence, ContextSpan::single(0)).unwrap();
        assert_eq!(m.shape(), [2, 5]);
        let m = embed_tokens(&table, &ContextualEmbeddingProvider::Zero, "d", &toks("x y"), Granularity::Sentence, ContextSpan::single(0)).unwrap();
        assert_eq!(m.shape(), [2, 2]);
    }

    #[test]
    fn file_provider_errors() {
        let mut store = ContextStore::new(1);
        store.insert("d|paragraph|0|1", &Tensor::zeros(2, 1)).unwrap();
        let p = ContextualEmbeddingProvider::File(store);
        let err = p
            .contextual_embed("d", &toks("a b"), Granularity::Sentence, ContextSpan::new(0, 1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("d|sentence|0|1"), "{err}");
        assert!(p.contextual_embed("d", &toks("a"), Granularity::Paragraph, ContextSpan::new(0, 1)).is_err());
    }

    #[test]
    fn ctxe_bytes_are_exact() {
        let mut store = ContextStore::new(2);
        store.insert("d|sentence|0|0", &Tensor::from_rows(&[[1.0, -2.0]]).unwrap()).unwrap();
        let mut buf = Vec::new();
        store.write(&mut buf).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"CTXE");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&14u16.to_le_bytes());
        expect.extend_from_slice(b"d|sentence|0|0");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(ContextStore::read(buf.as_slice()).unwrap(), store);
    }

    #[test]
    fn ctxe_rejects_garbage() {
        assert!(ContextStore::read(&b"NOPE"[..]).is_err());
        let mut buf = Vec::new();
        let mut store = ContextStore::new(2);
        store.insert("k", &Tensor::zeros(3, 2)).unwrap();
        store.write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ContextStore::read(buf.as_slice()).is_err());
    }

    #[test]
    fn checksum_tracks_contents() {
        let a = WordEmbeddingTable::from_entries(1, [("x", vec![1.0]), ("y", vec![2.0])]).unwrap();
        let b = WordEmbeddingTable::from_entries(1, [("y", vec![2.0]), ("x", vec![1.0])]).unwrap();
        let c = WordEmbeddingTable::from_entries(1, [("x", vec![1.0]), ("y", vec![2.5])]).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    proptest::proptest! {
        #[test]
        fn ctxe_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 3), 1..5), n in 1..4usize) {
            let mut store = ContextStore::new(3);
            for i in 0..n {
                let t = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap();
                store.insert(format!("doc{i}|paragraph|0|{i}"), &t).unwrap();
            }
            let mut buf = Vec::new();
            store.write(&mut buf).unwrap();
            proptest::prop_assert_eq!(ContextStore::read(buf.as_slice()).unwrap(), store);
        }
    }
}
