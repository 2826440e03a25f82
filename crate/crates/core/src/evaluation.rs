//! Exact-span metrics: trigger identification and classification P/R/F1,
//! Hit@K, per-stage ranking/classification Hit@K, frequency-group F1 and
//! the error taxonomy.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Span};
use crate::error::{Error, Result};
use crate::ontology::{Ontology, Relation, RolesetId, TypeId};
use crate::ranker::RankedType;

/// One predicted event inside a sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub ranked_types: Vec<RankedType>,
    pub chosen_type: Option<TypeId>,
}

impl PredictedEvent {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Predictions for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sent_id: String,
    pub events: Vec<PredictedEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldMention {
    pub sent_id: String,
    pub mention_id: String,
    pub span: Span,
    pub type_id: Option<TypeId>,
    pub roleset_id: RolesetId,
}

/// Gold mentions of a corpus. A mention without an adjudicated type falls
/// back to its single candidate, if it has exactly one.
pub fn gold_mentions(corpus: &Corpus) -> Vec<GoldMention> {
    corpus
        .mentions()
        .map(|(s, m)| GoldMention {
            sent_id: s.sent_id.clone(),
            mention_id: m.mention_id.clone(),
            span: m.span(),
            type_id: m
                .gold_type_id
                .clone()
                .or_else(|| match m.candidate_type_ids.as_slice() {
                    [only] => Some(only.clone()),
                    _ => None,
                }),
            roleset_id: m.roleset_id.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            true_positives: tp,
            predicted,
            gold,
        }
    }
}

/// Predicted events keyed by sentence, with duplicate spans removed
/// (first occurrence kept).
struct PredIndex<'a> {
    by_sent: HashMap<&'a str, BTreeMap<Span, &'a PredictedEvent>>,
    total: usize,
    duplicates: usize,
}

impl<'a> PredIndex<'a> {
    fn new(preds: &'a [PredictionRecord]) -> Self {
        let mut by_sent: HashMap<&str, BTreeMap<Span, &PredictedEvent>> = HashMap::new();
        let mut total = 0;
        let mut duplicates = 0;
        for rec in preds {
            let entry = by_sent.entry(rec.sent_id.as_str()).or_default();
            for ev in &rec.events {
                match entry.entry(ev.span()) {
                    Entry::Occupied(_) => duplicates += 1,
                    Entry::Vacant(v) => {
                        v.insert(ev);
                        total += 1;
                    }
                }
            }
        }
        if duplicates > 0 {
            log::warn!("{duplicates} duplicate predicted spans scored once");
        }
        PredIndex {
            by_sent,
            total,
            duplicates,
        }
    }

    fn get(&self, sent_id: &str, span: Span) -> Option<&'a PredictedEvent> {
        self.by_sent.get(sent_id).and_then(|m| m.get(&span).copied())
    }

    fn events(&self) -> impl Iterator<Item = (&'a str, &'a PredictedEvent)> + '_ {
        self.by_sent.iter().flat_map(|(s, m)| m.values().map(move |e| (*s, *e)))
    }
}

/// Gold spans keyed by sentence; a repeated gold span is matched at most once.
fn gold_spans(gold: &[GoldMention]) -> HashMap<(&str, Span), Vec<&GoldMention>> {
    let mut out: HashMap<(&str, Span), Vec<&GoldMention>> = HashMap::new();
    for g in gold {
        out.entry((g.sent_id.as_str(), g.span)).or_default().push(g);
    }
    out
}

/// A prediction on a repeated gold span is correct if it matches any of them.
fn type_matches(gs: &[&GoldMention], chosen: Option<&TypeId>) -> bool {
    chosen.is_some_and(|c| gs.iter().any(|g| g.type_id.as_ref() == Some(c)))
}

/// Exact-span trigger identification.
pub fn score_ti(preds: &[PredictionRecord], gold: &[GoldMention]) -> Prf {
    let idx = PredIndex::new(preds);
    let spans = gold_spans(gold);
    let tp = idx
        .events()
        .filter(|(s, e)| spans.contains_key(&(*s, e.span())))
        .count();
    Prf::from_counts(tp, idx.total, gold.len())
}

/// Exact span and matching type.
pub fn score_tc(preds: &[PredictionRecord], gold: &[GoldMention]) -> Prf {
    let idx = PredIndex::new(preds);
    let spans = gold_spans(gold);
    let tp = idx
        .events()
        .filter(|(s, e)| {
            spans
                .get(&(*s, e.span()))
                .is_some_and(|gs| type_matches(gs, e.chosen_type.as_ref()))
        })
        .count();
    Prf::from_counts(tp, idx.total, gold.len())
}

/// Whether `gold` is within the first `k` of `ranked` (whole list if shorter).
pub fn hit(ranked: &[TypeId], gold: &TypeId, k: usize) -> bool {
    ranked.iter().take(k).any(|t| t == gold)
}

/// Fraction of gold mentions whose span was predicted exactly and whose gold
/// type is among the top-K ranked types.
pub fn score_hit_at_k(preds: &[PredictionRecord], gold: &[GoldMention], ks: &[usize]) -> BTreeMap<usize, f64> {
    let idx = PredIndex::new(preds);
    let spans = gold_spans(gold);
    // a repeated gold span is credited at most once
    let rankings: Vec<(Vec<TypeId>, Vec<&TypeId>)> = spans
        .iter()
        .filter_map(|((sent, span), gs)| {
            let ev = idx.get(sent, *span)?;
            Some((
                ev.ranked_types.iter().map(|r| r.type_id.clone()).collect(),
                gs.iter().filter_map(|g| g.type_id.as_ref()).collect(),
            ))
        })
        .collect();
    ks.iter()
        .map(|&k| {
            let hits = rankings
                .iter()
                .filter(|(ranked, tys)| tys.iter().any(|t| hit(ranked, t, k)))
                .count();
            let rate = if gold.is_empty() {
                0.0
            } else {
                hits as f64 / gold.len() as f64
            };
            (k, rate)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Support {
    pub sentences: usize,
    pub gold_mentions: usize,
    pub predicted_events: usize,
    pub duplicate_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ti: Prf,
    pub tc: Prf,
    pub hit_at: BTreeMap<usize, f64>,
    pub support: Support,
}

pub const DEFAULT_KS: [usize; 6] = [1, 2, 5, 10, 20, 50];

pub fn evaluate(preds: &[PredictionRecord], gold: &[GoldMention], ks: &[usize]) -> MetricReport {
    let idx = PredIndex::new(preds);
    let sentences: BTreeSet<&str> = gold
        .iter()
        .map(|g| g.sent_id.as_str())
        .chain(preds.iter().map(|p| p.sent_id.as_str()))
        .collect();
    MetricReport {
        ti: score_ti(preds, gold),
        tc: score_tc(preds, gold),
        hit_at: score_hit_at_k(preds, gold, ks),
        support: Support {
            sentences: sentences.len(),
            gold_mentions: gold.len(),
            predicted_events: idx.total,
            duplicate_predictions: idx.duplicates,
        },
    }
}

/// Ranker and classifier output for one gold mention, with stage 1 bypassed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagewiseRecord {
    pub mention_id: String,
    pub gold_type_id: Option<TypeId>,
    /// Ranker order over (at least) the top 50 types.
    pub ranked: Vec<TypeId>,
    /// Classifier order (descending p_yes) over the ranker's top-K.
    pub classified: Vec<TypeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub mentions: usize,
    pub ranking_hit_at: BTreeMap<usize, f64>,
    /// Mentions whose gold type is in the ranker's top `coverage_k`.
    pub covered: usize,
    pub coverage_k: usize,
    /// `None` when no mention is covered.
    pub classification_hit_at: Option<BTreeMap<usize, f64>>,
}

pub const RANKING_KS: [usize; 3] = [10, 20, 50];
pub const CLASSIFICATION_KS: [usize; 3] = [1, 2, 5];

pub fn per_stage_report(
    records: &[StagewiseRecord],
    ranking_ks: &[usize],
    classification_ks: &[usize],
    coverage_k: usize,
) -> StageReport {
    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let ranking_hit_at = ranking_ks
        .iter()
        .map(|&k| {
            let n = records
                .iter()
                .filter(|r| r.gold_type_id.as_ref().is_some_and(|g| hit(&r.ranked, g, k)))
                .count();
            (k, rate(n, records.len()))
        })
        .collect();
    let covered: Vec<&StagewiseRecord> = records
        .iter()
        .filter(|r| r.gold_type_id.as_ref().is_some_and(|g| hit(&r.ranked, g, coverage_k)))
        .collect();
    let classification_hit_at = if covered.is_empty() {
        log::warn!("no mention has its gold type in the ranker top-{coverage_k}; classification metrics undefined");
        None
    } else {
        Some(
            classification_ks
                .iter()
                .map(|&k| {
                    let n = covered
                        .iter()
                        .filter(|r| hit(&r.classified, r.gold_type_id.as_ref().expect("covered"), k))
                        .count();
                    (k, rate(n, covered.len()))
                })
                .collect(),
        )
    };
    StageReport {
        mentions: records.len(),
        ranking_hit_at,
        covered: covered.len(),
        coverage_k,
        classification_hit_at,
    }
}

/// Training frequency of each type: a mention with N candidates adds 1/N
/// to each of them.
pub fn type_frequencies(train: &Corpus) -> BTreeMap<TypeId, f64> {
    let mut out = BTreeMap::new();
    for (_, m) in train.mentions() {
        let n = m.candidate_type_ids.len();
        for t in &m.candidate_type_ids {
            *out.entry(t.clone()).or_insert(0.0) += 1.0 / n as f64;
        }
    }
    out
}

/// Split types into `groups` near-equal groups by ascending frequency
/// (type id breaks ties). Group 0 holds the rarest types; types missing from
/// `freq` have frequency 0.
pub fn frequency_groups(types: &[TypeId], freq: &BTreeMap<TypeId, f64>, groups: usize) -> BTreeMap<TypeId, usize> {
    let f = |t: &TypeId| freq.get(t).copied().unwrap_or(0.0);
    let mut sorted: Vec<&TypeId> = types.iter().collect::<BTreeSet<_>>().into_iter().collect();
    sorted.sort_by(|a, b| f(a).total_cmp(&f(b)).then_with(|| a.cmp(b)));
    let n = sorted.len();
    sorted
        .into_iter()
        .enumerate()
        .map(|(rank, t)| (t.clone(), rank * groups / n.max(1)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: usize,
    pub types: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub tc: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileReport {
    pub groups: Vec<GroupReport>,
    /// Types that never occur in training.
    pub absent_types: usize,
}

/// TC P/R/F1 within each frequency group. Gold mentions belong to the group
/// of their gold type; predictions to the group of their chosen type.
pub fn frequency_quartile_analysis(
    preds: &[PredictionRecord],
    gold: &[GoldMention],
    freq: &BTreeMap<TypeId, f64>,
    types: &[TypeId],
) -> QuartileReport {
    const GROUPS: usize = 4;
    let mut all: BTreeSet<TypeId> = types.iter().cloned().collect();
    all.extend(gold.iter().filter_map(|g| g.type_id.clone()));
    let all: Vec<TypeId> = all.into_iter().collect();
    let absent = all
        .iter()
        .filter(|t| freq.get(*t).copied().unwrap_or(0.0) == 0.0)
        .count();
    if absent > 0 {
        log::info!("{absent} types absent from training assigned to the lowest group");
    }
    let group_of = frequency_groups(&all, freq, GROUPS);
    let idx = PredIndex::new(preds);
    let spans = gold_spans(gold);

    let mut tp = [0usize; GROUPS];
    let mut n_pred = [0usize; GROUPS];
    let mut n_gold = [0usize; GROUPS];
    for g in gold {
        if let Some(grp) = g.type_id.as_ref().and_then(|t| group_of.get(t)) {
            n_gold[*grp] += 1;
        }
    }
    for (s, e) in idx.events() {
        let Some(grp) = e.chosen_type.as_ref().and_then(|t| group_of.get(t)) else {
            continue;
        };
        n_pred[*grp] += 1;
        let correct = spans
            .get(&(s, e.span()))
            .is_some_and(|gs| type_matches(gs, e.chosen_type.as_ref()));
        if correct {
            tp[*grp] += 1;
        }
    }
    let groups = (0..GROUPS)
        .map(|grp| {
            let freqs: Vec<f64> = group_of
                .iter()
                .filter(|(_, g)| **g == grp)
                .map(|(t, _)| freq.get(t).copied().unwrap_or(0.0))
                .collect();
            GroupReport {
                group: grp,
                types: freqs.len(),
                min_frequency: freqs.iter().copied().reduce(f64::min).unwrap_or(0.0),
                max_frequency: freqs.iter().copied().fold(0.0, f64::max),
                tc: Prf::from_counts(tp[grp], n_pred[grp], n_gold[grp]),
            }
        })
        .collect();
    QuartileReport {
        groups,
        absent_types: absent,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    CandidateSet,
    ExtendedRoleset,
    Child,
    Parent,
    Sibling,
    Other,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::CandidateSet => "candidate_set",
            ErrorCategory::ExtendedRoleset => "extended_roleset",
            ErrorCategory::Child => "child",
            ErrorCategory::Parent => "parent",
            ErrorCategory::Sibling => "sibling",
            ErrorCategory::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub mention_id: String,
    pub predicted: TypeId,
    pub gold: TypeId,
    pub gold_roleset: RolesetId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedError {
    pub mention_id: String,
    pub predicted: TypeId,
    pub gold: TypeId,
    pub category: ErrorCategory,
}

/// Correctly spanned predictions whose chosen type differs from gold.
pub fn collect_errors(preds: &[PredictionRecord], gold: &[GoldMention]) -> Vec<ErrorCase> {
    let idx = PredIndex::new(preds);
    gold.iter()
        .filter_map(|g| {
            let gold_type = g.type_id.as_ref()?;
            let chosen = idx.get(&g.sent_id, g.span)?.chosen_type.as_ref()?;
            (chosen != gold_type).then(|| ErrorCase {
                mention_id: g.mention_id.clone(),
                predicted: chosen.clone(),
                gold: gold_type.clone(),
                gold_roleset: g.roleset_id.clone(),
            })
        })
        .collect()
}

/// Categorize one misclassification. Order: candidate set, extended roleset,
/// hierarchy (child, parent, sibling of the gold relative to the prediction),
/// other. With `prioritize_hierarchy`, hierarchy is checked before the
/// extended roleset.
pub fn categorize_error(case: &ErrorCase, ont: &Ontology, prioritize_hierarchy: bool) -> ErrorCategory {
    let Some(mapping) = ont.mapping(case.gold_roleset.as_str()) else {
        log::warn!("unknown gold roleset {} for {}", case.gold_roleset, case.mention_id);
        return ErrorCategory::Other;
    };
    if case.predicted != case.gold && mapping.candidate_type_ids.contains(&case.predicted) {
        return ErrorCategory::CandidateSet;
    }
    let extended = || {
        ont.mappings_for_predicate(case.gold_roleset.predicate())
            .any(|m| m.candidate_type_ids.contains(&case.predicted))
    };
    let hierarchy = || match ont.hierarchy_relation(case.predicted.as_str(), case.gold.as_str()) {
        Ok(Relation::Child) => Some(ErrorCategory::Child),
        Ok(Relation::Parent) => Some(ErrorCategory::Parent),
        Ok(Relation::Sibling) => Some(ErrorCategory::Sibling),
        _ => None,
    };
    if prioritize_hierarchy {
        if let Some(c) = hierarchy() {
            return c;
        }
        if extended() {
            return ErrorCategory::ExtendedRoleset;
        }
    } else {
        if extended() {
            return ErrorCategory::ExtendedRoleset;
        }
        if let Some(c) = hierarchy() {
            return c;
        }
    }
    ErrorCategory::Other
}

pub fn categorize_errors(cases: &[ErrorCase], ont: &Ontology, prioritize_hierarchy: bool) -> Vec<CategorizedError> {
    cases
        .iter()
        .map(|c| CategorizedError {
            mention_id: c.mention_id.clone(),
            predicted: c.predicted.clone(),
            gold: c.gold.clone(),
            category: categorize_error(c, ont, prioritize_hierarchy),
        })
        .collect()
}

/// CSV with header `mention_id,predicted,gold,category`.
pub fn errors_to_csv(errors: &[CategorizedError]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    w.write_record(["mention_id", "predicted", "gold", "category"])
        .map_err(fail)?;
    for e in errors {
        w.write_record([
            e.mention_id.as_str(),
            e.predicted.as_str(),
            e.gold.as_str(),
            e.category.as_str(),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))
}

/// Count of errors per category, every category present.
pub fn category_counts(errors: &[CategorizedError]) -> BTreeMap<ErrorCategory, usize> {
    let mut out: BTreeMap<ErrorCategory, usize> = [
        ErrorCategory::CandidateSet,
        ErrorCategory::ExtendedRoleset,
        ErrorCategory::Child,
        ErrorCategory::Parent,
        ErrorCategory::Sibling,
        ErrorCategory::Other,
    ]
    .into_iter()
    .map(|c| (c, 0))
    .collect();
    for e in errors {
        *out.entry(e.category).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{EventType, RolesetMapping};
    use proptest::prelude::*;

    fn gm(sent: &str, id: &str, s: usize, e: usize, ty: &str) -> GoldMention {
        GoldMention {
            sent_id: sent.into(),
            mention_id: id.into(),
            span: Span::new(s, e),
            type_id: Some(ty.into()),
            roleset_id: "x.01".into(),
        }
    }

    fn ev(s: usize, e: usize, ranked: &[&str], chosen: &str) -> PredictedEvent {
        PredictedEvent {
            start: s,
            end: e,
            ranked_types: ranked
                .iter()
                .enumerate()
                .map(|(i, t)| RankedType {
                    type_id: (*t).into(),
                    score: -(i as f64),
                })
                .collect(),
            chosen_type: Some(chosen.into()),
        }
    }

    fn rec(sent: &str, events: Vec<PredictedEvent>) -> PredictionRecord {
        PredictionRecord {
            sent_id: sent.into(),
            events,
        }
    }

    #[test]
    fn identity_scores_one() {
        let gold = vec![gm("s1", "m1", 0, 0, "A"), gm("s1", "m2", 3, 4, "B")];
        let preds = vec![rec("s1", vec![ev(0, 0, &["A"], "A"), ev(3, 4, &["B"], "B")])];
        assert_eq!(score_ti(&preds, &gold).f1, 1.0);
        assert_eq!(score_tc(&preds, &gold).f1, 1.0);
    }

    #[test]
    fn hand_counted_ti() {
        let gold = vec![
            gm("s1", "m1", 0, 0, "A"),
            gm("s1", "m2", 2, 2, "A"),
            gm("s2", "m3", 1, 1, "A"),
            gm("s2", "m4", 4, 5, "A"),
        ];
        let preds = vec![rec("s1", vec![ev(0, 0, &[], "A")]), rec("s2", vec![ev(4, 4, &[], "A")])];
        let p = score_ti(&preds, &gold);
        assert_eq!(p.precision, 0.5);
        assert_eq!(p.recall, 0.25);
        assert!((p.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_predictions() {
        let gold = vec![gm("s1", "m1", 0, 0, "A")];
        let p = score_ti(&[], &gold);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wrong_types_decouple() {
        let gold = vec![gm("s1", "m1", 0, 0, "A"), gm("s2", "m2", 1, 1, "B")];
        let preds = vec![rec("s1", vec![ev(0, 0, &[], "B")]), rec("s2", vec![ev(1, 1, &[], "A")])];
        assert_eq!(score_ti(&preds, &gold).f1, 1.0);
        assert_eq!(score_tc(&preds, &gold).f1, 0.0);
    }

    #[test]
    fn duplicate_spans_scored_once() {
        let gold = vec![gm("s1", "m1", 0, 0, "A")];
        let preds = vec![rec("s1", vec![ev(0, 0, &[], "A"), ev(0, 0, &[], "B")])];
        let r = evaluate(&preds, &gold, &[1]);
        assert_eq!(r.ti.predicted, 1);
        assert_eq!(r.ti.precision, 1.0);
        assert_eq!(r.tc.f1, 1.0);
        assert_eq!(r.support.duplicate_predictions, 1);
    }

    #[test]
    fn hit_at_rank_three() {
        let gold = vec![gm("s1", "m1", 0, 0, "C"), gm("s2", "m2", 0, 0, "C")];
        let preds = vec![
            rec("s1", vec![ev(0, 0, &["A", "B", "C", "D"], "A")]),
            rec("s2", vec![ev(0, 0, &["B", "A", "C"], "B")]),
        ];
        let h = score_hit_at_k(&preds, &gold, &[1, 2, 5, 100]);
        assert_eq!(h[&1], 0.0);
        assert_eq!(h[&2], 0.0);
        assert_eq!(h[&5], 1.0);
        assert_eq!(h[&100], 1.0);
    }

    #[test]
    fn unmatched_spans_are_misses() {
        let gold = vec![gm("s1", "m1", 0, 0, "A"), gm("s1", "m2", 2, 2, "A")];
        let preds = vec![rec("s1", vec![ev(0, 0, &["A"], "A"), ev(3, 3, &["A"], "A")])];
        assert_eq!(score_hit_at_k(&preds, &gold, &[1])[&1], 0.5);
    }

    fn sw(id: &str, gold: &str, ranked: &[&str], classified: &[&str]) -> StagewiseRecord {
        StagewiseRecord {
            mention_id: id.into(),
            gold_type_id: Some(gold.into()),
            ranked: ranked.iter().map(|t| (*t).into()).collect(),
            classified: classified.iter().map(|t| (*t).into()).collect(),
        }
    }

    #[test]
    fn stage_report_restricts_to_covered() {
        let recs = vec![
            sw("m1", "A", &["A", "B"], &["B", "A"]),
            sw("m2", "C", &["A", "B"], &["A", "B"]),
        ];
        let r = per_stage_report(&recs, &[1, 10], &[1, 2], 2);
        assert_eq!(r.ranking_hit_at[&1], 0.5);
        assert_eq!(r.ranking_hit_at[&10], 0.5);
        assert_eq!(r.covered, 1);
        let c = r.classification_hit_at.unwrap();
        assert_eq!(c[&1], 0.0);
        assert_eq!(c[&2], 1.0);

        let none = per_stage_report(&recs[1..], &[10], &[1], 2);
        assert!(none.classification_hit_at.is_none());
    }

    #[test]
    fn full_coverage_matches_global_hit() {
        let recs = vec![
            sw("m1", "A", &["A", "B", "C"], &["B", "A", "C"]),
            sw("m2", "C", &["C", "A", "B"], &["C", "A", "B"]),
        ];
        let r = per_stage_report(&recs, &[3], &[1, 2], 3);
        assert_eq!(r.covered, 2);
        let c = r.classification_hit_at.unwrap();
        assert_eq!(c[&1], 0.5);
        assert_eq!(c[&2], 1.0);
    }

    #[test]
    fn fractional_frequencies() {
        let corpus: Corpus = serde_json::from_value(serde_json::json!({"sentences": [{
        "sent_id": "s", "doc_id": "d", "tokens": ["a", "b"],
        "mentions": [
            {"mention_id": "m1", "start": 0, "end": 0, "roleset_id": "a.01", "candidate_type_ids": ["A", "B"]},
            {"mention_id": "m2", "start": 1, "end": 1, "roleset_id": "b.01", "candidate_type_ids": ["A"]}
        ]}]}))
        .unwrap();
        let f = type_frequencies(&corpus);
        assert_eq!(f[&TypeId::from("A")], 1.5);
        assert_eq!(f[&TypeId::from("B")], 0.5);
    }

    #[test]
    fn uniform_frequencies_give_equal_groups() {
        let types: Vec<TypeId> = (0..10).map(|i| format!("T{i}").into()).collect();
        let freq: BTreeMap<TypeId, f64> = types.iter().map(|t| (t.clone(), 3.0)).collect();
        let g = frequency_groups(&types, &freq, 4);
        let mut sizes = [0; 4];
        for v in g.values() {
            sizes[*v] += 1;
        }
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(g[&TypeId::from("T0")], 0);
        assert_eq!(g[&TypeId::from("T9")], 3);
    }

    #[test]
    fn planted_frequency_ordering() {
        // frequent types are always right, rare types always wrong
        let types: Vec<TypeId> = (0..8).map(|i| format!("T{i}").into()).collect();
        let freq: BTreeMap<TypeId, f64> = types
            .iter()
            .enumerate()
            .filter(|(i, _)| *i > 0)
            .map(|(i, t)| (t.clone(), (i * 10) as f64))
            .collect();
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        for (i, t) in types.iter().enumerate() {
            let sent = format!("s{i}");
            gold.push(gm(&sent, &format!("m{i}"), 0, 0, t.as_str()));
            let chosen = if i >= 4 { t.as_str() } else { "T7" };
            preds.push(rec(&sent, vec![ev(0, 0, &[], chosen)]));
        }
        let r = frequency_quartile_analysis(&preds, &gold, &freq, &types);
        assert_eq!(r.absent_types, 1);
        assert_eq!(r.groups[0].tc.f1, 0.0);
        assert_eq!(r.groups[1].tc.f1, 0.0);
        assert_eq!(r.groups[2].tc.f1, 1.0);
        assert!(r.groups[3].tc.f1 > 0.0);
    }

    fn taxonomy_ontology() -> Ontology {
        let ty = |id: &str, parent: Option<&str>| EventType {
            type_id: id.into(),
            name: id.into(),
            definition: "d".into(),
            parent_id: parent.map(Into::into),
        };
        let map = |r: &str, c: &[&str]| RolesetMapping {
            roleset_id: r.into(),
            candidate_type_ids: c.iter().map(|t| (*t).into()).collect(),
        };
        Ontology::new(
            vec![
                ty("research", None),
                ty("research_method", None),
                ty("settlement_payment", None),
                ty("settlement_building", None),
                ty("work_general", None),
                ty("work_econ", Some("work_general")),
                ty("conflict", None),
                ty("social_conflict", Some("conflict")),
                ty("armed_conflict", Some("conflict")),
                ty("physical_examination", None),
                ty("inspection", Some("physical_examination")),
                ty("wear", None),
                ty("wears", None),
            ],
            vec![
                map("research.01", &["research", "research_method"]),
                map("settlement.01", &["settlement_payment"]),
                map("settlement.02", &["settlement_building", "work_econ"]),
                map("work.01", &["work_econ"]),
                map("conflict.01", &["armed_conflict"]),
                map("examine.01", &["physical_examination"]),
                map("wear.01", &["wear"]),
            ],
        )
        .unwrap()
    }

    fn case(pred: &str, gold: &str, roleset: &str) -> ErrorCase {
        ErrorCase {
            mention_id: "m".into(),
            predicted: pred.into(),
            gold: gold.into(),
            gold_roleset: roleset.into(),
        }
    }

    #[test]
    fn taxonomy_examples() {
        let ont = taxonomy_ontology();
        let c = |p, g, r| categorize_error(&case(p, g, r), &ont, false);
        assert_eq!(
            c("research_method", "research", "research.01"),
            ErrorCategory::CandidateSet
        );
        assert_eq!(
            c("settlement_building", "settlement_payment", "settlement.01"),
            ErrorCategory::ExtendedRoleset
        );
        assert_eq!(c("work_general", "work_econ", "work.01"), ErrorCategory::Child);
        assert_eq!(
            c("social_conflict", "armed_conflict", "conflict.01"),
            ErrorCategory::Sibling
        );
        assert_eq!(
            c("inspection", "physical_examination", "examine.01"),
            ErrorCategory::Parent
        );
        assert_eq!(c("wears", "wear", "wear.01"), ErrorCategory::Other);
        assert_eq!(c("wears", "wear", "missing.01"), ErrorCategory::Other);
    }

    #[test]
    fn hierarchy_priority_flag() {
        let ont = taxonomy_ontology();
        // extended roleset via settlement.02, and the gold is the prediction's parent
        let both = case("work_econ", "work_general", "settlement.01");
        assert_eq!(categorize_error(&both, &ont, false), ErrorCategory::ExtendedRoleset);
        assert_eq!(categorize_error(&both, &ont, true), ErrorCategory::Parent);
    }

    #[test]
    fn csv_output() {
        let ont = taxonomy_ontology();
        let errs = categorize_errors(&[case("research_method", "research", "research.01")], &ont, false);
        let csv = String::from_utf8(errors_to_csv(&errs).unwrap()).unwrap();
        assert_eq!(
            csv,
            "mention_id,predicted,gold,category\nm,research_method,research,candidate_set\n"
        );
        assert_eq!(category_counts(&errs)[&ErrorCategory::CandidateSet], 1);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<GoldMention>, Vec<PredictionRecord>)> {
        let types = ["A", "B", "C", "D"];
        let gold = prop::collection::vec((0usize..4, 0usize..6, 0usize..2, 0usize..4), 0..12);
        let preds = prop::collection::vec(
            (
                0usize..4,
                0usize..6,
                0usize..2,
                0usize..4,
                Just(types.to_vec()).prop_shuffle(),
            ),
            0..12,
        );
        (gold, preds).prop_map(move |(g, p)| {
            let gold: Vec<GoldMention> = g
                .into_iter()
                .enumerate()
                .map(|(i, (s, st, l, t))| gm(&format!("s{s}"), &format!("m{i}"), st, st + l, types[t]))
                .collect();
            let mut recs: BTreeMap<String, Vec<PredictedEvent>> = BTreeMap::new();
            for (s, st, l, t, ranked) in p {
                recs.entry(format!("s{s}"))
                    .or_default()
                    .push(ev(st, st + l, &ranked, types[t]));
            }
            (gold, recs.into_iter().map(|(s, e)| rec(&s, e)).collect())
        })
    }

    proptest! {
        #[test]
        fn metric_invariants((gold, preds) in arb_case()) {
            let ti = score_ti(&preds, &gold);
            let tc = score_tc(&preds, &gold);
            prop_assert!(tc.f1 <= ti.f1 + 1e-12);
            for v in [ti.precision, ti.recall, ti.f1, tc.precision, tc.recall, tc.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let h = score_hit_at_k(&preds, &gold, &[1, 2, 3, 4, 50]);
            prop_assert!(h[&1] <= h[&2] && h[&2] <= h[&3] && h[&3] <= h[&4]);
            prop_assert_eq!(h[&4], h[&50]);

            // duplicate predicted spans keep their first occurrence, so event order within a record is fixed
            let mut rev = preds.clone();
            rev.reverse();
            let mut gold_rev = gold.clone();
            gold_rev.reverse();
            prop_assert_eq!(score_tc(&rev, &gold_rev).f1, tc.f1);
        }
    }
}
