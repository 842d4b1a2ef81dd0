//! Turning decoded tags into role-filler extractions and scoring them
//! against gold keys by head-noun or exact match.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bio::{self, TagSet, TaggedSequence};
use crate::corpus::{tokenize, Filler, GoldKey, RoleLabel, RoleSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    HeadNoun,
    Exact,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::HeadNoun => "head_noun",
            MatchMode::Exact => "exact",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_noun" => Ok(MatchMode::HeadNoun),
            "exact" => Ok(MatchMode::Exact),
            _ => Err(Error::Config(format!("unknown match mode {s:?}"))),
        }
    }
}

/// One extracted role filler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub doc_id: String,
    pub role: RoleLabel,
    pub text: String,
    pub head: String,
}

/// Word lists driving head-noun extraction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadNounRules {
    /// Stripped from the front of a phrase.
    pub determiners: Vec<String>,
    /// The phrase is cut before the first of these.
    pub prepositions: Vec<String>,
    pub punctuation: Vec<String>,
}

impl Default for HeadNounRules {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        HeadNounRules {
            determiners: words(&[
                "the", "a", "an", "some", "two", "three", "four", "several", "many", "its", "his", "her", "their",
            ]),
            prepositions: words(&["of", "in", "at", "on", "from", "with", "by", "for"]),
            punctuation: words(&[","]),
        }
    }
}

impl HeadNounRules {
    /// Reads rules from JSON; omitted lists keep their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn is_determiner(&self, lower: &str) -> bool {
        self.determiners.iter().any(|d| d == lower)
    }

    fn is_break(&self, lower: &str) -> bool {
        self.prepositions.iter().chain(&self.punctuation).any(|p| p == lower)
    }
}

/// Head noun of a phrase: leading determiners are dropped, the phrase is
/// cut at the first preposition or comma, and the last remaining token is
/// returned lowercased. When nothing remains the last token of the whole
/// phrase is used instead.
pub fn head_noun<S: AsRef<str>>(phrase: &[S], rules: &HeadNounRules) -> Result<String> {
    let lower: Vec<String> = phrase.iter().map(|t| t.as_ref().to_lowercase()).collect();
    let Some(fallback) = lower.last() else {
        return Err(Error::Invalid("head noun of an empty phrase".into()));
    };
    let start = lower.iter().position(|t| !rules.is_determiner(t)).unwrap_or(lower.len());
    let rest = &lower[start..];
    let end = rest.iter().position(|t| rules.is_break(t)).unwrap_or(rest.len());
    Ok(rest[..end].last().unwrap_or(fallback).clone())
}

/// Comparison key of a filler string under `mode`; `None` for a string
/// without tokens.
pub fn match_key(text: &str, mode: MatchMode, rules: &HeadNounRules) -> Option<String> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return None;
    }
    Some(match mode {
        MatchMode::HeadNoun => head_noun(&tokens, rules).expect("phrase is non-empty"),
        MatchMode::Exact => tokens.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>().join(" "),
    })
}

/// Deduplicates strings by key, keeping the first string seen for each key.
/// The result is ordered by key.
pub fn conflate<S: AsRef<str>>(texts: &[S], mode: MatchMode, rules: &HeadNounRules) -> Vec<(String, String)> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    for t in texts {
        if let Some(k) = match_key(t.as_ref(), mode, rules) {
            out.entry(k).or_insert_with(|| t.as_ref().to_string());
        }
    }
    out.into_iter().collect()
}

/// Collapses gold fillers whose alternative keys overlap. Each returned set
/// holds every key that identifies one conflated gold item.
pub fn conflate_gold(fillers: &[Filler], mode: MatchMode, rules: &HeadNounRules) -> Vec<BTreeSet<String>> {
    let keysets: Vec<BTreeSet<String>> = fillers
        .iter()
        .map(|f| f.alternatives.iter().filter_map(|a| match_key(a, mode, rules)).collect())
        .filter(|s: &BTreeSet<String>| !s.is_empty())
        .collect();
    let mut parent: Vec<usize> = (0..keysets.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (i, keys) in keysets.iter().enumerate() {
        for k in keys {
            match owner.get(k.as_str()) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    owner.insert(k, i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (i, keys) in keysets.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().extend(keys.iter().cloned());
    }
    groups.into_values().collect()
}

/// Hit counts for one role, pooled over documents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub predicted: usize,
    pub hits: usize,
    pub gold: usize,
    pub matched_gold: usize,
}

impl Counts {
    pub fn spurious(&self) -> usize {
        self.predicted - self.hits
    }

    pub fn misses(&self) -> usize {
        self.gold - self.matched_gold
    }

    /// Precision and recall. Both are 1 when there are neither predictions
    /// nor gold fillers, and both are 0 when only one side is empty.
    pub fn precision_recall(&self) -> (f64, f64) {
        match (self.predicted, self.gold) {
            (0, 0) => (1.0, 1.0),
            (0, _) => (0.0, 0.0),
            (_, 0) => (0.0, 0.0),
            (p, g) => (self.hits as f64 / p as f64, self.matched_gold as f64 / g as f64),
        }
    }

    fn add(&mut self, other: Counts) {
        self.predicted += other.predicted;
        self.hits += other.hits;
        self.gold += other.gold;
        self.matched_gold += other.matched_gold;
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Counts for one document and role. Both sides are conflated first.
pub fn count_matches<S: AsRef<str>>(preds: &[S], gold: &[Filler], mode: MatchMode, rules: &HeadNounRules) -> Counts {
    let pred_keys: BTreeSet<String> = conflate(preds, mode, rules).into_iter().map(|(k, _)| k).collect();
    let gold_sets = conflate_gold(gold, mode, rules);
    let gold_keys: BTreeSet<&String> = gold_sets.iter().flatten().collect();
    Counts {
        predicted: pred_keys.len(),
        hits: pred_keys.iter().filter(|k| gold_keys.contains(k)).count(),
        gold: gold_sets.len(),
        matched_gold: gold_sets.iter().filter(|s| s.iter().any(|k| pred_keys.contains(k))).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleScore {
    pub role: RoleLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hits: usize,
    pub spurious: usize,
    pub misses: usize,
    pub predicted: usize,
    pub gold: usize,
}

pub fn score_role(role: RoleLabel, counts: Counts) -> RoleScore {
    let (precision, recall) = counts.precision_recall();
    RoleScore {
        role,
        precision,
        recall,
        f1: f1(precision, recall),
        hits: counts.hits,
        spurious: counts.spurious(),
        misses: counts.misses(),
        predicted: counts.predicted,
        gold: counts.gold,
    }
}

/// Per-role scores and their macro averages under one match mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: MatchMode,
    pub roles: Vec<RoleScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Unweighted mean of the per-role F1 scores.
    pub macro_f1: f64,
    /// Harmonic mean of the macro precision and macro recall.
    pub f1_of_macro_pr: f64,
}

/// Averages per-role scores in `roles` order; every role must be present.
pub fn macro_report(mode: MatchMode, scores: &[RoleScore], roles: &RoleSet) -> Result<ModeReport> {
    let ordered = roles
        .roles()
        .iter()
        .map(|r| {
            scores
                .iter()
                .find(|s| &s.role == r)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("no score for role {r}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = ordered.len().max(1) as f64;
    let mean = |f: fn(&RoleScore) -> f64| ordered.iter().map(f).sum::<f64>() / n;
    let (p, r) = (mean(|s| s.precision), mean(|s| s.recall));
    Ok(ModeReport {
        mode,
        macro_precision: p,
        macro_recall: r,
        macro_f1: mean(|s| s.f1),
        f1_of_macro_pr: f1(p, r),
        roles: ordered,
    })
}

/// Scores extractions against gold keys: counts are pooled over documents
/// within a role, then averaged across roles.
pub fn evaluate(
    extractions: &[Extraction],
    gold: &[GoldKey],
    roles: &RoleSet,
    mode: MatchMode,
    rules: &HeadNounRules,
) -> Result<ModeReport> {
    let mut by_doc: BTreeMap<&str, BTreeMap<&RoleLabel, Vec<&str>>> = BTreeMap::new();
    for key in gold {
        by_doc.entry(&key.doc_id).or_default();
    }
    for e in extractions {
        if !roles.contains(&e.role) {
            return Err(Error::Invalid(format!("extraction for unknown role {}", e.role)));
        }
        let doc = by_doc
            .get_mut(e.doc_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("extraction for document {:?} which has no gold key", e.doc_id)))?;
        doc.entry(&e.role).or_default().push(&e.text);
    }
    let mut scores = Vec::with_capacity(roles.len());
    for role in roles.roles() {
        let mut total = Counts::default();
        for key in gold {
            let preds = by_doc[key.doc_id.as_str()].get(role).map(Vec::as_slice).unwrap_or(&[]);
            total.add(count_matches(preds, key.fillers_for(role), mode, rules));
        }
        scores.push(score_role(role.clone(), total));
    }
    macro_report(mode, &scores, roles)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_noun: Option<ModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<ModeReport>,
}

impl ExtractionReport {
    pub fn evaluate(
        extractions: &[Extraction],
        gold: &[GoldKey],
        roles: &RoleSet,
        modes: &[MatchMode],
        rules: &HeadNounRules,
    ) -> Result<Self> {
        let mut report = ExtractionReport::default();
        for &mode in modes {
            let r = Some(evaluate(extractions, gold, roles, mode, rules)?);
            match mode {
                MatchMode::HeadNoun => report.head_noun = r,
                MatchMode::Exact => report.exact = r,
            }
        }
        Ok(report)
    }

    pub fn modes(&self) -> impl Iterator<Item = &ModeReport> {
        self.head_noun.iter().chain(&self.exact)
    }

    /// Percentages in a fixed-width table, one block per mode.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for m in self.modes() {
            let width = m.roles.iter().map(|s| s.role.as_str().len()).max().unwrap_or(0).max(14);
            let _ = writeln!(out, "[{}]", m.mode);
            let _ = writeln!(
                out,
                "{:<width$} {:>7} {:>7} {:>7} {:>5} {:>5} {:>5}",
                "role", "P", "R", "F1", "hit", "spur", "miss"
            );
            for s in &m.roles {
                let _ = writeln!(
                    out,
                    "{:<width$} {:>7.2} {:>7.2} {:>7.2} {:>5} {:>5} {:>5}",
                    s.role.as_str(),
                    100.0 * s.precision,
                    100.0 * s.recall,
                    100.0 * s.f1,
                    s.hits,
                    s.spurious,
                    s.misses
                );
            }
            let _ = writeln!(
                out,
                "{:<width$} {:>7.2} {:>7.2} {:>7.2}",
                "macro",
                100.0 * m.macro_precision,
                100.0 * m.macro_recall,
                100.0 * m.macro_f1
            );
            let _ = writeln!(out, "{:<width$} {:>23.2}", "F1(macro P,R)", 100.0 * m.f1_of_macro_pr);
        }
        out
    }
}

/// Spans of a tag sequence given as tag names.
pub fn tags_to_spans<S: AsRef<str>>(tagset: &TagSet, tags: &[S]) -> Result<Vec<bio::Span>> {
    let idx = tags.iter().map(|t| tagset.parse(t.as_ref())).collect::<Result<Vec<_>>>()?;
    bio::tags_to_spans(tagset, &idx)
}

/// Extractions for the spans in `tags` over the window's tokens.
pub fn extract(window: &TaggedSequence, tags: &[usize], tagset: &TagSet, rules: &HeadNounRules) -> Result<Vec<Extraction>> {
    if tags.len() != window.len() {
        return Err(Error::Shape(format!("{} tags for {} tokens", tags.len(), window.len())));
    }
    bio::tags_to_spans(tagset, tags)?
        .into_iter()
        .map(|s| {
            let words = &window.tokens[s.start..s.end];
            Ok(Extraction {
                doc_id: window.doc_id.clone(),
                role: tagset.roles().roles()[s.role].clone(),
                text: words.join(" "),
                head: head_noun(words, rules)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rules() -> HeadNounRules {
        HeadNounRules::default()
    }

    fn hn(s: &str) -> String {
        head_noun(&tokenize(s), &rules()).unwrap()
    }

    #[test]
    fn head_noun_examples() {
        assert_eq!(hn("the bomb"), "bomb");
        assert_eq!(hn("members of the civil group"), "members");
        assert_eq!(hn("four terrorists"), "terrorists");
        assert_eq!(hn("The"), "the");
        assert_eq!(hn("a car, a bus"), "car");
        assert!(head_noun::<&str>(&[], &rules()).is_err());
    }

    #[test]
    fn custom_rules_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        std::fs::write(&path, r#"{"determiners":["los"]}"#).unwrap();
        let r = HeadNounRules::load(&path).unwrap();
        assert_eq!(head_noun(&["los", "terroristas"], &r).unwrap(), "terroristas");
        assert_eq!(head_noun(&["the", "bomb", "of"], &r).unwrap(), "bomb");
        assert_eq!(head_noun(&["the", "bomb"], &r).unwrap(), "bomb");
        assert_eq!(r.prepositions, rules().prepositions);
    }

    #[test]
    fn conflation_examples() {
        let preds = ["the bomb", "a bomb"];
        assert_eq!(conflate(&preds, MatchMode::HeadNoun, &rules()).len(), 1);
        assert_eq!(conflate(&preds, MatchMode::Exact, &rules()).len(), 2);
        let gold = [Filler::new(["21 houses"]), Filler::new(["1 bus"])];
        let sets = conflate_gold(&gold, MatchMode::HeadNoun, &rules());
        assert_eq!(sets.len(), 2);
        let keys: BTreeSet<&str> = sets.iter().flatten().map(String::as_str).collect();
        assert_eq!(keys, BTreeSet::from(["bus", "houses"]));
    }

    #[test]
    fn gold_alternatives_chain_together() {
        let gold = [
            Filler::new(["the bank", "banco"]),
            Filler::new(["el banco popular", "banco"]),
            Filler::new(["popular"]),
            Filler::new(["a car"]),
        ];
        let sets = conflate_gold(&gold, MatchMode::HeadNoun, &rules());
        assert_eq!(sets.len(), 2);
    }

    #[test]
    fn score_formulas() {
        let s = score_role(
            RoleLabel::new("Weapon"),
            Counts {
                predicted: 2,
                hits: 1,
                gold: 2,
                matched_gold: 1,
            },
        );
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!((s.spurious, s.misses), (1, 1));
        let empty = score_role(
            RoleLabel::new("Weapon"),
            Counts {
                gold: 3,
                ..Counts::default()
            },
        );
        assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));
        assert!((f1(0.5644, 0.6277) - 0.5944).abs() < 1e-4);
    }

    fn role_scores(f1s: &[f64]) -> Vec<RoleScore> {
        RoleSet::default()
            .roles()
            .iter()
            .zip(f1s)
            .map(|(r, &f)| RoleScore {
                role: r.clone(),
                precision: f,
                recall: f,
                f1: f,
                hits: 0,
                spurious: 0,
                misses: 0,
                predicted: 0,
                gold: 0,
            })
            .collect()
    }

    #[test]
    fn macro_averages() {
        let roles = RoleSet::default();
        assert_eq!(macro_report(MatchMode::HeadNoun, &role_scores(&[1.0; 5]), &roles).unwrap().macro_f1, 1.0);
        let r = macro_report(MatchMode::HeadNoun, &role_scores(&[1.0, 0.0, 0.0, 0.0, 0.0]), &roles).unwrap();
        assert!((r.macro_f1 - 0.2).abs() < 1e-12);
        let table2 = macro_report(
            MatchMode::HeadNoun,
            &role_scores(&[0.5265, 0.5823, 0.6218, 0.5497, 0.6799]),
            &roles,
        )
        .unwrap();
        assert!((table2.macro_f1 - 0.59204).abs() < 1e-9);
        assert!(macro_report(MatchMode::HeadNoun, &role_scores(&[1.0; 4]), &roles).is_err());
    }

    fn gold_key(doc: &str, entries: &[(&str, &[&[&str]])]) -> GoldKey {
        let mut k = GoldKey::empty(doc);
        for (role, fillers) in entries {
            k.fillers
                .insert(RoleLabel::new(*role), fillers.iter().map(|alts| Filler::new(alts.iter().copied())).collect());
        }
        k
    }

    fn ex(doc: &str, role: &str, text: &str) -> Extraction {
        Extraction {
            doc_id: doc.into(),
            role: RoleLabel::new(role),
            text: text.into(),
            head: hn(text),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gold = vec![
            gold_key("d1", &[("PerpInd", &[&["four terrorists"]]), ("Target", &[&["21 houses"], &["1 bus"]])]),
            gold_key("d2", &[("Weapon", &[&["the bomb", "a bomb"]])]),
        ];
        let preds = vec![
            ex("d1", "PerpInd", "four terrorists"),
            ex("d1", "Target", "21 houses"),
            ex("d1", "Target", "1 bus"),
            ex("d2", "Weapon", "the bomb"),
        ];
        let report =
            ExtractionReport::evaluate(&preds, &gold, &RoleSet::default(), &[MatchMode::HeadNoun, MatchMode::Exact], &rules())
                .unwrap();
        for m in report.modes() {
            assert_eq!(m.macro_f1, 1.0);
            assert!(m.roles.iter().all(|s| s.f1 == 1.0));
        }
        assert!(report.to_table().contains("macro"));
    }

    #[test]
    fn pooled_within_role() {
        let gold = vec![
            gold_key("d1", &[("Victim", &[&["the mayor"]])]),
            gold_key("d2", &[("Victim", &[&["a priest"], &["two nuns"]])]),
        ];
        let preds = vec![ex("d1", "Victim", "mayor"), ex("d2", "Victim", "the mayor"), ex("d2", "Victim", "nuns")];
        let r = evaluate(&preds, &gold, &RoleSet::default(), MatchMode::HeadNoun, &rules()).unwrap();
        let v = r.roles.iter().find(|s| s.role.as_str() == "Victim").unwrap();
        assert_eq!((v.hits, v.spurious, v.misses), (2, 1, 1));
        assert!((v.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((v.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_document_or_role_is_an_error() {
        let gold = vec![gold_key("d1", &[])];
        let roles = RoleSet::default();
        assert!(evaluate(&[ex("d9", "Victim", "x")], &gold, &roles, MatchMode::Exact, &rules()).is_err());
        assert!(evaluate(&[ex("d1", "Villain", "x")], &gold, &roles, MatchMode::Exact, &rules()).is_err());
    }

    #[test]
    fn span_examples() {
        let ts = TagSet::default();
        let spans = tags_to_spans(&ts, &["B-PerpInd", "I-PerpInd", "O", "O"]).unwrap();
        assert_eq!(spans.len(), 1);
        let w = TaggedSequence {
            doc_id: "d".into(),
            start_sentence: 0,
            tokens: ["four", "terrorists", "kidnapped", "him"].map(String::from).to_vec(),
            tags: vec![0; 4],
            sentence_lengths: vec![4],
        };
        let tags: Vec<usize> = ["B-PerpInd", "I-PerpInd", "O", "O"].iter().map(|t| ts.parse(t).unwrap()).collect();
        let e = extract(&w, &tags, &ts, &rules()).unwrap();
        assert_eq!(e, vec![ex("d", "PerpInd", "four terrorists")]);
        assert!(tags_to_spans(&ts, &["O", "O"]).unwrap().is_empty());
        let orphan = tags_to_spans(&ts, &["I-Weapon", "O"]).unwrap();
        assert_eq!((orphan.len(), orphan[0].start, orphan[0].end), (1, 0, 1));
        assert!(tags_to_spans(&ts, &["B-Nope"]).is_err());
    }

    const WORDS: &[&str] = &["the", "a", "bomb", "car", "of", "group", "two", "men", ",", "Bus", "house"];

    fn phrase() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(WORDS), 1..5).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn head_is_a_token_of_the_phrase(p in phrase()) {
            let toks = tokenize(&p);
            let h = head_noun(&toks, &rules()).unwrap();
            prop_assert!(toks.iter().any(|t| t.to_lowercase() == h));
        }

        #[test]
        fn conflation_is_idempotent(ps in prop::collection::vec(phrase(), 0..8), exact in any::<bool>()) {
            let mode = if exact { MatchMode::Exact } else { MatchMode::HeadNoun };
            let once = conflate(&ps, mode, &rules());
            let texts: Vec<&str> = once.iter().map(|(_, t)| t.as_str()).collect();
            prop_assert_eq!(conflate(&texts, mode, &rules()), once);
        }

        #[test]
        fn duplicates_do_not_change_scores(
            ps in prop::collection::vec(phrase(), 0..6),
            gs in prop::collection::vec(prop::collection::vec(phrase(), 1..3), 0..4),
            dup in 0usize..6,
        ) {
            let gold: Vec<Filler> = gs.into_iter().map(Filler::new).collect();
            for mode in [MatchMode::HeadNoun, MatchMode::Exact] {
                let base = count_matches(&ps, &gold, mode, &rules());
                let mut more = ps.clone();
                if !ps.is_empty() {
                    more.push(ps[dup % ps.len()].clone());
                }
                prop_assert_eq!(count_matches(&more, &gold, mode, &rules()), base);
            }
        }

        #[test]
        fn exact_hit_implies_head_hit(p in phrase(), g in phrase()) {
            let gold = [Filler::new([g])];
            let exact = count_matches(&[&p], &gold, MatchMode::Exact, &rules());
            let head = count_matches(&[&p], &gold, MatchMode::HeadNoun, &rules());
            prop_assert!(exact.hits <= head.hits);
        }
    }
}
