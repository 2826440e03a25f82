//! Distantly supervised corpus: sentence records, candidate attachment,
//! cleaning rules and document-level stratified splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::ontology::{Ontology, RolesetId, TypeId};

/// Inclusive token interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.start <= idx && idx <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMention {
    pub mention_id: String,
    pub start: usize,
    pub end: usize,
    pub roleset_id: RolesetId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_type_id: Option<TypeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_type_ids: Vec<TypeId>,
    /// Set when the adjudicated gold type lies outside the roleset's candidates.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gold_override: bool,
}

impl EventMention {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn is_clean(&self) -> bool {
        self.candidate_type_ids.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: String,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
    /// Provenance tag of the source corpus, e.g. `amr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<EventMention>,
}

impl Sentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn span_text(&self, span: Span) -> String {
        self.tokens[span.start..=span.end].join(" ")
    }

    fn is_amr(&self) -> bool {
        self.source.as_deref().is_some_and(|s| s.eq_ignore_ascii_case("amr"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Corpus { sentences }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corpus = Corpus::new(io::read_jsonl(path)?);
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.sentences)
    }

    /// Checks id uniqueness, non-empty token lists and span bounds.
    pub fn validate(&self) -> Result<()> {
        let mut sent_ids = HashSet::new();
        let mut mention_ids = HashSet::new();
        for s in &self.sentences {
            if !sent_ids.insert(&s.sent_id) {
                return Err(Error::Validation(format!("duplicate sent_id {}", s.sent_id)));
            }
            if s.tokens.is_empty() {
                return Err(Error::Validation(format!("sentence {} has no tokens", s.sent_id)));
            }
            for m in &s.mentions {
                if !mention_ids.insert(&m.mention_id) {
                    return Err(Error::Validation(format!("duplicate mention_id {}", m.mention_id)));
                }
                if m.start > m.end || m.end >= s.tokens.len() {
                    return Err(Error::Validation(format!(
                        "mention {} span [{}, {}] outside sentence {} of {} tokens",
                        m.mention_id,
                        m.start,
                        m.end,
                        s.sent_id,
                        s.tokens.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_mentions(&self) -> usize {
        self.sentences.iter().map(|s| s.mentions.len()).sum()
    }

    pub fn mentions(&self) -> impl Iterator<Item = (&Sentence, &EventMention)> {
        self.sentences
            .iter()
            .flat_map(|s| s.mentions.iter().map(move |m| (s, m)))
    }

    /// Mentions per roleset, the input to the ontology's minimum-count rule.
    pub fn roleset_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for (_, m) in self.mentions() {
            *counts.entry(m.roleset_id.0.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn doc_ids(&self) -> BTreeSet<&str> {
        self.sentences.iter().map(|s| s.doc_id.as_str()).collect()
    }

    /// Drop gold labels, leaving only candidate sets (training view).
    pub fn without_gold(&self) -> Corpus {
        let mut out = self.clone();
        for s in &mut out.sentences {
            for m in &mut s.mentions {
                m.gold_type_id = None;
                m.gold_override = false;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachReport {
    pub kept: usize,
    pub dropped_unmapped: usize,
    pub dropped_unknown_gold: usize,
    pub gold_overrides: usize,
}

/// Populate candidate sets from the roleset mapping, dropping mentions whose
/// roleset is not mapped.
pub fn attach_candidates(corpus: &Corpus, ont: &Ontology) -> (Corpus, AttachReport) {
    let mut report = AttachReport::default();
    let mut out = corpus.clone();
    for s in &mut out.sentences {
        s.mentions.retain_mut(|m| {
            let Some(mapping) = ont.mapping(m.roleset_id.as_str()) else {
                report.dropped_unmapped += 1;
                return false;
            };
            if let Some(gold) = &m.gold_type_id {
                if ont.get_type(gold.as_str()).is_none() {
                    report.dropped_unknown_gold += 1;
                    return false;
                }
            }
            m.candidate_type_ids = mapping.candidate_type_ids.clone();
            m.gold_override = m
                .gold_type_id
                .as_ref()
                .is_some_and(|g| !m.candidate_type_ids.contains(g));
            if m.gold_override {
                report.gold_overrides += 1;
            }
            report.kept += 1;
            true
        });
    }
    (out, report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub special_tokens_removed: usize,
    pub mentions_lost_to_special_tokens: usize,
    pub short_sentences_removed: usize,
    pub duplicate_sentences_removed: usize,
    pub overlapping_mentions_removed: usize,
    pub modal_mentions_removed: usize,
}

pub const MIN_SENTENCE_TOKENS: usize = 3;

/// Trace and bracket markers stripped during cleaning.
pub fn is_special_token(tok: &str) -> bool {
    tok.contains('*') || matches!(tok, "-LRB-" | "-RRB-" | "(" | ")" | "[" | "]")
}

/// Apply the corpus cleaning rules. Deduplication is corpus-global and keeps
/// the first occurrence.
pub fn clean_corpus(corpus: &Corpus) -> (Corpus, CleanReport) {
    let mut report = CleanReport::default();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut sentences = Vec::with_capacity(corpus.sentences.len());

    for s in &corpus.sentences {
        let mut s = s.clone();
        strip_special_tokens(&mut s, &mut report);
        if s.tokens.len() < MIN_SENTENCE_TOKENS {
            report.short_sentences_removed += 1;
            continue;
        }
        if !seen.insert(s.tokens.clone()) {
            report.duplicate_sentences_removed += 1;
            continue;
        }

        let spans: Vec<Span> = s.mentions.iter().map(EventMention::span).collect();
        let overlapping: Vec<bool> = spans
            .iter()
            .enumerate()
            .map(|(i, a)| spans.iter().enumerate().any(|(j, b)| i != j && a.overlaps(b)))
            .collect();
        let mut idx = 0;
        s.mentions.retain(|_| {
            let keep = !overlapping[idx];
            idx += 1;
            keep
        });
        report.overlapping_mentions_removed += overlapping.iter().filter(|o| **o).count();

        if s.is_amr() {
            let before = s.mentions.len();
            s.mentions
                .retain(|m| !matches!(m.pos_tag.as_deref(), Some("MD") | Some("TO")));
            report.modal_mentions_removed += before - s.mentions.len();
        }
        sentences.push(s);
    }
    (Corpus::new(sentences), report)
}

fn strip_special_tokens(s: &mut Sentence, report: &mut CleanReport) {
    if !s.tokens.iter().any(|t| is_special_token(t)) {
        return;
    }
    // new_index[i] = position of old token i after removal, if kept
    let mut new_index = Vec::with_capacity(s.tokens.len());
    let mut kept = Vec::with_capacity(s.tokens.len());
    for t in s.tokens.drain(..) {
        if is_special_token(&t) {
            new_index.push(None);
            report.special_tokens_removed += 1;
        } else {
            new_index.push(Some(kept.len()));
            kept.push(t);
        }
    }
    s.tokens = kept;
    s.mentions.retain_mut(|m| {
        let inside = || new_index[m.start..=m.end].iter().flatten();
        match (inside().next().copied(), inside().last().copied()) {
            (Some(a), Some(b)) => {
                m.start = a;
                m.end = b;
                true
            }
            _ => {
                report.mentions_lost_to_special_tokens += 1;
                false
            }
        }
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub allow_empty: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: (0.90, 0.05, 0.05),
            seed: 0,
            allow_empty: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Assign whole documents to train/dev/test, stratified by genre.
pub fn split_corpus(corpus: &Corpus, cfg: &SplitConfig) -> Result<CorpusSplit> {
    let (r_train, r_dev, r_test) = cfg.ratios;
    if [r_train, r_dev, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (r_train + r_dev + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Argument(format!(
            "split ratios {:?} must be non-negative and sum to 1",
            cfg.ratios
        )));
    }

    // genre of a document = genre of its first sentence
    let mut doc_genre: BTreeMap<&str, &str> = BTreeMap::new();
    for s in &corpus.sentences {
        doc_genre
            .entry(s.doc_id.as_str())
            .or_insert_with(|| s.genre.as_deref().unwrap_or(""));
    }
    if doc_genre.len() < 3 && !cfg.allow_empty {
        return Err(Error::Argument(format!(
            "{} documents cannot form three non-empty splits",
            doc_genre.len()
        )));
    }

    let mut by_genre: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (doc, genre) in &doc_genre {
        by_genre.entry(genre).or_default().push(doc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut parts: [Vec<&str>; 3] = Default::default();
    for docs in by_genre.values_mut() {
        docs.shuffle(&mut rng);
        let n = docs.len();
        let n_dev = (((n as f64) * r_dev).round() as usize).min(n);
        let n_test = (((n as f64) * r_test).round() as usize).min(n - n_dev);
        let n_train = n - n_dev - n_test;
        parts[0].extend(&docs[..n_train]);
        parts[1].extend(&docs[n_train..n_train + n_dev]);
        parts[2].extend(&docs[n_train + n_dev..]);
    }

    if !cfg.allow_empty {
        for target in 1..3 {
            if parts[target].is_empty() {
                let donor = (0..3)
                    .filter(|&i| i != target)
                    .max_by_key(|&i| (parts[i].len(), usize::from(i == 0)))
                    .unwrap_or(0);
                if parts[donor].len() > 1 {
                    let doc = parts[donor].pop().unwrap_or_default();
                    parts[target].push(doc);
                }
            }
        }
        if parts[0].is_empty() && parts[1].len() > 1 {
            let doc = parts[1].pop().unwrap_or_default();
            parts[0].push(doc);
        }
    }

    let assignment: BTreeMap<&str, usize> = parts
        .iter()
        .enumerate()
        .flat_map(|(i, docs)| docs.iter().map(move |d| (*d, i)))
        .collect();
    let mut out: [Vec<Sentence>; 3] = Default::default();
    for s in &corpus.sentences {
        out[assignment[s.doc_id.as_str()]].push(s.clone());
    }
    let [train, dev, test] = out;
    Ok(CorpusSplit {
        train: Corpus::new(train),
        dev: Corpus::new(dev),
        test: Corpus::new(test),
    })
}
