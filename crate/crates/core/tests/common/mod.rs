#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rolefill::corpus::{Document, Filler, GoldKey, RoleLabel, DEFAULT_ROLES};
use rolefill::embeddings::WordEmbeddingTable;

pub const BACKGROUND: [&str; 20] = [
    "attacked", "yesterday", "city", "near", "police", "said", "reported", "that", "after", "downtown", "during",
    "night", "officials", "morning", "killed", "when", "army", "capital", "residents", "later",
];

/// Six filler words per role, in the order of [`DEFAULT_ROLES`].
pub const ROLE_WORDS: [[&str; 6]; 5] = [
    ["gunmen", "guerrillas", "terrorists", "commandos", "rebels", "assassins"],
    ["fmln", "eln", "farc", "sendero", "mrta", "contras"],
    ["embassy", "bank", "bridge", "tower", "pipeline", "station"],
    ["mayor", "priest", "judge", "colonel", "journalist", "senator"],
    ["bomb", "dynamite", "rifles", "grenades", "mortar", "explosives"],
];

/// The 50-word vocabulary of the synthetic corpus.
pub fn vocabulary() -> Vec<&'static str> {
    BACKGROUND.iter().chain(ROLE_WORDS.iter().flatten()).copied().collect()
}

/// Documents of background words with planted one- or two-word fillers.
/// Each document has six to nine sentences in two or three paragraphs.
/// The fillers sit in one event sentence, occasionally spilling into the
/// next, and every role word appears at most once per document.
pub fn synthetic_corpus(n_docs: usize, seed: u64) -> Vec<(Document, GoldKey)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|d| {
            let doc_id = format!("syn-{d:03}");
            let n_sent = rng.gen_range(6..=9);
            let mut sentences: Vec<Vec<String>> = (0..n_sent)
                .map(|_| {
                    let len = rng.gen_range(4..=7);
                    (0..len).map(|_| BACKGROUND.choose(&mut rng).unwrap().to_string()).collect()
                })
                .collect();
            let mut key = GoldKey::empty(doc_id.clone());
            let mut used: Vec<&str> = Vec::new();
            let event = rng.gen_range(0..n_sent - 1);
            // (sentence, gap between background tokens, phrase)
            let mut planted: Vec<(usize, usize, Vec<&str>)> = Vec::new();
            for _ in 0..rng.gen_range(2..=4) {
                let role = rng.gen_range(0..ROLE_WORDS.len());
                let free: Vec<&str> = ROLE_WORDS[role].iter().copied().filter(|w| !used.contains(w)).collect();
                let len = if free.len() >= 2 && rng.gen_bool(0.3) { 2 } else { 1 };
                let phrase: Vec<&str> = free.choose_multiple(&mut rng, len).copied().collect();
                used.extend(&phrase);
                let s = if rng.gen_bool(0.2) { event + 1 } else { event };
                let gap = rng.gen_range(0..=sentences[s].len());
                key.fillers
                    .entry(RoleLabel::new(DEFAULT_ROLES[role]))
                    .or_default()
                    .push(Filler::new([phrase.join(" ")]));
                planted.push((s, gap, phrase));
            }
            planted.sort_by_key(|(s, gap, _)| std::cmp::Reverse((*s, *gap)));
            for (s, gap, phrase) in planted {
                for w in phrase.into_iter().rev() {
                    sentences[s].insert(gap, w.to_string());
                }
            }
            let mut starts = vec![0, rng.gen_range(2..=3)];
            if n_sent >= 7 && rng.gen_bool(0.5) {
                starts.push(rng.gen_range(starts[1] + 2..n_sent));
            }
            (Document::new(doc_id, sentences, starts).unwrap(), key)
        })
        .collect()
}

/// Random vectors in `[-1, 1]` for every vocabulary word.
pub fn synthetic_table(dim: usize, seed: u64) -> WordEmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<(&str, Vec<f64>)> = vocabulary()
        .into_iter()
        .map(|w| (w, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    WordEmbeddingTable::from_entries(dim, rows).unwrap()
}

/// Writes the vectors of [`synthetic_table`] in whitespace-separated text form.
pub fn write_glove(path: &Path, dim: usize, seed: u64) {
    let table = synthetic_table(dim, seed);
    let mut text = String::new();
    for w in vocabulary() {
        text.push_str(w);
        for v in table.lookup(w) {
            write!(text, " {v}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// Gold fillers of a corpus as extraction records, one per filler.
pub fn perfect_extractions(corpus: &[(Document, GoldKey)]) -> String {
    let mut out = String::new();
    for (_, key) in corpus {
        for (role, fillers) in &key.fillers {
            for f in fillers {
                let text = &f.alternatives[0];
                let head = text.split_whitespace().last().unwrap();
                let rec: BTreeMap<&str, &str> =
                    [("doc_id", key.doc_id.as_str()), ("role", role.as_str()), ("text", text), ("head", head)].into();
                out.push_str(&serde_json::to_string(&rec).unwrap());
                out.push('\n');
            }
        }
    }
    out
}
