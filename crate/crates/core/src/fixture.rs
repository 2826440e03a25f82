//! Synthetic planted-signal ontology and corpus.
//!
//! Every type owns two trigger words and six context words. A sentence of
//! type `t` holds one trigger of `t`, a few of its context words and shared
//! filler. Clean mentions carry roleset `<name>.01`, which maps to `t` alone;
//! noisy mentions carry `<name>.02`, which maps to `t` plus one or two
//! distractor types.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EventMention, Sentence};
use crate::error::Result;
use crate::io;
use crate::ontology::{EventType, FilterRules, Ontology, RolesetMapping, TypeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub num_types: usize,
    pub sentences_per_type: usize,
    /// Probability that a mention gets the multi-candidate roleset.
    pub noise_rate: f64,
    pub sentences_per_doc: usize,
    pub genres: usize,
    /// Sentences of the denied type (dropped by the filter rules).
    pub denied_type_sentences: usize,
    /// Probability of inserting a trace token into a sentence.
    pub trace_rate: f64,
    /// Probability that a noisy mention borrows its trigger and one context
    /// word from another of its candidate types.
    pub ambiguity_rate: f64,
    /// Types whose mentions always take the multi-candidate roleset. The
    /// remaining types are noised at the rate that keeps the overall share of
    /// noisy mentions at `noise_rate`; the count is capped so that share is
    /// never exceeded.
    pub noisy_only_types: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            num_types: 20,
            sentences_per_type: 50,
            noise_rate: 0.3,
            sentences_per_doc: 5,
            genres: 2,
            denied_type_sentences: 0,
            trace_rate: 0.1,
            ambiguity_rate: 0.3,
            noisy_only_types: 4,
            seed: 13,
        }
    }
}

/// Ground truth of one generated mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub mention_id: String,
    pub sent_id: String,
    pub type_id: TypeId,
    pub candidate_type_ids: Vec<TypeId>,
    pub noisy: bool,
    /// Type whose trigger the sentence borrows, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confuser: Option<TypeId>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub ontology: Ontology,
    pub corpus: Corpus,
    pub filter: FilterRules,
    pub truth: Vec<TruthRecord>,
}

struct Seed {
    name: &'static str,
    definition: &'static str,
    triggers: [&'static str; 2],
    context: [&'static str; 6],
}

macro_rules! seeds {
    ($(($n:literal, $d:literal, [$t1:literal, $t2:literal], [$($c:literal),*])),* $(,)?) => {
        &[$(Seed { name: $n, definition: $d, triggers: [$t1, $t2], context: [$($c),*] }),*]
    };
}

const SEEDS: &[Seed] = seeds![
    (
        "payment",
        "transfer of money or funds from a bank to settle a debt",
        ["payment", "paid"],
        ["wired", "funds", "bank", "money", "debt", "treaty"]
    ),
    (
        "attack",
        "violent assault by troops or armed forces with weapons",
        ["attack", "raided"],
        ["troops", "armed", "forces", "assault", "violent", "weapons"]
    ),
    (
        "election",
        "voters choosing a candidate for office by ballot",
        ["election", "voted"],
        ["voters", "ballot", "candidate", "polls", "campaign", "office"]
    ),
    (
        "marriage",
        "union of a bride and groom in a wedding with vows",
        ["marriage", "married"],
        ["bride", "groom", "wedding", "couple", "rings", "vows"]
    ),
    (
        "arrest",
        "police officers detain a suspect in custody",
        ["arrest", "detained"],
        ["police", "suspect", "custody", "officers", "charges", "warrant"]
    ),
    (
        "discovery",
        "a scientist finding an unknown comet or fossil",
        ["discovery", "found"],
        ["scientist", "comet", "fossil", "detect", "unknown", "telescope"]
    ),
    (
        "research",
        "systematic study in a lab by scholars",
        ["research", "studied"],
        ["study", "lab", "data", "scholars", "theory", "results"]
    ),
    (
        "work",
        "a job done for a wage or salary from an employer",
        ["worked", "labor"],
        ["wage", "job", "factory", "salary", "shifts", "employer"]
    ),
    (
        "conflict",
        "struggle between rivals or opposing groups in a dispute",
        ["conflict", "clashed"],
        ["rivals", "groups", "tension", "dispute", "border", "feud"]
    ),
    (
        "construction",
        "builders raising a tower or bridge at a site",
        ["built", "erected"],
        ["tower", "bridge", "cement", "cranes", "site", "builders"]
    ),
    (
        "travel",
        "a trip abroad by train or flight",
        ["travel", "toured"],
        ["trip", "train", "flight", "tourists", "abroad", "luggage"]
    ),
    (
        "trade",
        "exchange of goods between a market and a port",
        ["trade", "exported"],
        ["goods", "market", "tariffs", "cargo", "imports", "port"]
    ),
    (
        "birth",
        "a mother bearing a newborn baby with a midwife",
        ["birth", "born"],
        ["baby", "mother", "infant", "nurse", "midwife", "newborn"]
    ),
    (
        "death",
        "end of a life marked by a funeral with a widow at the grave",
        ["death", "died"],
        ["funeral", "grave", "mourners", "illness", "widow", "coffin"]
    ),
    (
        "meeting",
        "a summit of delegate talks following an agenda",
        ["meeting", "met"],
        ["summit", "agenda", "delegate", "talks", "minutes", "chair"]
    ),
    (
        "lawsuit",
        "legal action in court before a judge by a plaintiff",
        ["lawsuit", "sued"],
        ["court", "judge", "plaintiff", "lawyers", "damages", "verdict"]
    ),
    (
        "injury",
        "harm to a patient such as a bruise or fracture",
        ["injury", "wounded"],
        ["bruise", "fracture", "medics", "bleeding", "ankle", "patient"]
    ),
    (
        "protest",
        "a rally of a crowd with banners and slogans",
        ["protest", "marched"],
        ["banners", "crowd", "slogans", "rally", "activist", "square"]
    ),
    (
        "hiring",
        "taking on a recruit as staff after an interview",
        ["hiring", "hired"],
        ["recruit", "applicant", "resume", "interview", "staff", "vacancy"]
    ),
    (
        "sale",
        "selling goods to a buyer for a price at a shop",
        ["sale", "sold"],
        ["buyer", "price", "discount", "shop", "receipt", "auction"]
    ),
    (
        "inspection",
        "careful review by an inspector with a checklist and audit",
        ["inspection", "examined"],
        ["inspector", "checklist", "audit", "defects", "review", "scan"]
    ),
    (
        "settlement",
        "resolution of claims by a deal on agreed terms",
        ["settlement", "settled"],
        ["accord", "terms", "mediator", "compromise", "claims", "deal"]
    ),
    (
        "flood",
        "overflow of river water after heavy rain",
        ["flood", "flooded"],
        ["river", "rain", "water", "levees", "torrent", "basement"]
    ),
    (
        "fire",
        "uncontrolled blaze of flames and smoke",
        ["fire", "burned"],
        ["flames", "smoke", "blaze", "firemen", "ashes", "alarm"]
    ),
];

const FILLER: &[&str] = &[
    "the",
    "a",
    "an",
    "of",
    "in",
    "on",
    "at",
    "was",
    "were",
    "is",
    "by",
    "for",
    "with",
    "after",
    "before",
    "during",
    "near",
    "this",
    "that",
    "their",
    "its",
    "yesterday",
    "today",
    "morning",
    "week",
    "city",
    "local",
    "several",
    "many",
    "officials",
    "reported",
    "said",
    "people",
    "area",
    "later",
    "again",
    "also",
    "finally",
    "early",
    "region",
];

pub const DENIED_TYPE_ID: &str = "Q241625";
pub const DENIED_ROLESET: &str = "wish.01";

const TRACES: &[&str] = &["*T*-1", "*-2", "*PRO*", "*U*"];

struct Planted {
    type_id: TypeId,
    name: String,
    definition: String,
    triggers: Vec<String>,
    context: Vec<String>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    loop {
        let syl = rng.random_range(2..=3);
        let w: String = (0..syl)
            .flat_map(|_| [*C.choose(rng).unwrap() as char, *V.choose(rng).unwrap() as char])
            .collect();
        // distinct 8-char prefixes keep hashed pieces distinct
        if !FILLER.contains(&w.as_str()) && used.insert(w.clone()) {
            return w;
        }
    }
}

fn planted_types(n: usize, rng: &mut ChaCha8Rng) -> Vec<Planted> {
    let mut used: BTreeSet<String> = SEEDS
        .iter()
        .flat_map(|s| s.triggers.iter().chain(&s.context).copied())
        .map(String::from)
        .collect();
    (0..n)
        .map(|i| {
            let type_id = TypeId::from(format!("Q{}", 100 + i));
            if let Some(s) = SEEDS.get(i) {
                return Planted {
                    type_id,
                    name: s.name.into(),
                    definition: s.definition.into(),
                    triggers: s.triggers.iter().map(|t| t.to_string()).collect(),
                    context: s.context.iter().map(|t| t.to_string()).collect(),
                };
            }
            let triggers: Vec<String> = (0..2).map(|_| pseudo_word(rng, &mut used)).collect();
            let context: Vec<String> = (0..6).map(|_| pseudo_word(rng, &mut used)).collect();
            Planted {
                type_id,
                name: triggers[0].clone(),
                definition: format!("event of {} with {} and {}", context[0], context[1], context[2]),
                triggers,
                context,
            }
        })
        .collect()
}

/// Generate the ontology, raw corpus (every mention carries its true type),
/// filter rules and truth table.
pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.num_types < 2 {
        return Err(crate::Error::Argument("fixture needs at least two types".into()));
    }
    for (name, r) in [
        ("noise", spec.noise_rate),
        ("trace", spec.trace_rate),
        ("ambiguity", spec.ambiguity_rate),
    ] {
        if !(0.0..=1.0).contains(&r) {
            return Err(crate::Error::Argument(format!("{name} rate {r} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted = planted_types(spec.num_types, &mut rng);
    let n = planted.len();

    let mut types: Vec<EventType> = planted
        .iter()
        .enumerate()
        .map(|(i, p)| EventType {
            type_id: p.type_id.clone(),
            name: p.name.clone(),
            definition: p.definition.clone(),
            parent_id: (i >= 4).then(|| planted[i % 4].type_id.clone()),
        })
        .collect();
    types.push(EventType {
        type_id: DENIED_TYPE_ID.into(),
        name: "wish".into(),
        definition: "desire or hope for something".into(),
        parent_id: None,
    });

    let mut mappings = Vec::new();
    let mut noisy_candidates = Vec::with_capacity(n);
    for (i, p) in planted.iter().enumerate() {
        mappings.push(RolesetMapping {
            roleset_id: format!("{}.01", p.name).into(),
            candidate_type_ids: vec![p.type_id.clone()],
        });
        let mut cands = vec![p.type_id.clone(), planted[(i + 1) % n].type_id.clone()];
        if i % 2 == 0 && n > 2 {
            let d2 = planted[(i + n / 2 + 1) % n].type_id.clone();
            if !cands.contains(&d2) {
                cands.push(d2);
            }
        }
        cands.shuffle(&mut rng);
        mappings.push(RolesetMapping {
            roleset_id: format!("{}.02", p.name).into(),
            candidate_type_ids: cands.clone(),
        });
        noisy_candidates.push(cands);
    }
    mappings.push(RolesetMapping {
        roleset_id: DENIED_ROLESET.into(),
        candidate_type_ids: vec![DENIED_TYPE_ID.into()],
    });
    let ontology = Ontology::new(types, mappings)?;

    // (type index or None for the denied type, noisy)
    let noisy_only = spec
        .noisy_only_types
        .min((spec.noise_rate * n as f64).floor() as usize)
        .min(n - 1);
    let rest_rate = ((spec.noise_rate * n as f64 - noisy_only as f64) / (n - noisy_only) as f64).clamp(0.0, 1.0);
    let mut plan: Vec<(Option<usize>, bool)> = Vec::new();
    for i in 0..n {
        for _ in 0..spec.sentences_per_type {
            let noisy = i >= n - noisy_only || rng.random_bool(rest_rate);
            plan.push((Some(i), noisy));
        }
    }
    plan.extend((0..spec.denied_type_sentences).map(|_| (None, false)));
    plan.shuffle(&mut rng);

    let denied = Planted {
        type_id: DENIED_TYPE_ID.into(),
        name: "wish".into(),
        definition: String::new(),
        triggers: vec!["wished".into(), "hoped".into()],
        context: ["dream", "longing", "desire", "hope", "future", "someday"]
            .map(String::from)
            .to_vec(),
    };

    let per_doc = spec.sentences_per_doc.max(1);
    let mut sentences = Vec::with_capacity(plan.len());
    let mut truth = Vec::with_capacity(plan.len());
    for (k, (ty, noisy)) in plan.into_iter().enumerate() {
        let p = ty.map_or(&denied, |i| &planted[i]);
        let doc = k / per_doc;
        let sent_id = format!("s{k:05}");
        let mention_id = format!("{sent_id}.m0");

        let confuser = match ty {
            Some(i) if noisy && rng.random_bool(spec.ambiguity_rate) => {
                let own = &planted[i].type_id;
                let others: Vec<usize> = planted
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| &q.type_id != own && noisy_candidates[i].contains(&q.type_id))
                    .map(|(j, _)| j)
                    .collect();
                others.choose(&mut rng).map(|&j| &planted[j])
            }
            _ => None,
        };

        let len = rng.random_range(8..=12);
        let n_ctx = if confuser.is_some() { 3 } else { rng.random_range(2..=3) };
        let mut words: Vec<String> = p.context.choose_multiple(&mut rng, n_ctx).cloned().collect();
        if let Some(c) = confuser {
            words.push(c.context.choose(&mut rng).unwrap().clone());
        }
        while words.len() < len - 1 {
            words.push(FILLER.choose(&mut rng).unwrap().to_string());
        }
        words.shuffle(&mut rng);
        let trigger_at = rng.random_range(0..=words.len());
        let trigger = confuser.unwrap_or(p).triggers.choose(&mut rng).unwrap().clone();
        words.insert(trigger_at, trigger);
        let mut at = trigger_at;
        if rng.random_bool(spec.trace_rate) {
            let pos = rng.random_range(0..=words.len());
            words.insert(pos, TRACES.choose(&mut rng).unwrap().to_string());
            if pos <= at {
                at += 1;
            }
        }

        let (roleset, candidates) = match ty {
            Some(i) if noisy => (format!("{}.02", p.name), noisy_candidates[i].clone()),
            Some(_) => (format!("{}.01", p.name), vec![p.type_id.clone()]),
            None => (DENIED_ROLESET.to_string(), vec![p.type_id.clone()]),
        };
        sentences.push(Sentence {
            sent_id: sent_id.clone(),
            doc_id: format!("d{doc:04}"),
            genre: Some(format!("g{}", doc % spec.genres.max(1))),
            source: None,
            tokens: words,
            mentions: vec![EventMention {
                mention_id: mention_id.clone(),
                start: at,
                end: at,
                roleset_id: roleset.into(),
                pos_tag: Some(if at % 2 == 0 { "VBD" } else { "NN" }.into()),
                gold_type_id: Some(p.type_id.clone()),
                candidate_type_ids: Vec::new(),
                gold_override: false,
            }],
        });
        truth.push(TruthRecord {
            mention_id,
            sent_id,
            type_id: p.type_id.clone(),
            candidate_type_ids: candidates,
            noisy,
            confuser: confuser.map(|c| c.type_id.clone()),
        });
    }

    Ok(Fixture {
        ontology,
        corpus: Corpus::new(sentences),
        filter: FilterRules {
            deny_types: vec![DENIED_TYPE_ID.into()],
            ..FilterRules::default()
        },
        truth,
    })
}

/// Write `ontology.jsonl`, `corpus.jsonl`, `filter.json` and `truth.jsonl`.
pub fn write_fixture(fixture: &Fixture, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    fixture.ontology.save(&dir.join("ontology.jsonl"))?;
    fixture.corpus.save(&dir.join("corpus.jsonl"))?;
    io::write_json(&dir.join("filter.json"), &fixture.filter)?;
    io::write_jsonl(&dir.join("truth.jsonl"), &fixture.truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = FixtureSpec::default();
        let a = generate_fixture(&spec).unwrap();
        assert_eq!(a.corpus.num_mentions(), 1000);
        assert_eq!(a.truth.len(), 1000);
        assert_eq!(a.ontology.num_types(), 21);
        let b = generate_fixture(&spec).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn zero_noise_is_clean() {
        let f = generate_fixture(&FixtureSpec {
            noise_rate: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!(f.truth.iter().all(|t| !t.noisy && t.candidate_type_ids.len() == 1));
    }

    #[test]
    fn half_noise_within_three_sigma() {
        let f = generate_fixture(&FixtureSpec {
            noise_rate: 0.5,
            ..Default::default()
        })
        .unwrap();
        let n = f.truth.len() as f64;
        let noisy = f.truth.iter().filter(|t| t.candidate_type_ids.len() > 1).count() as f64;
        let sigma = (n * 0.25).sqrt();
        assert!((noisy - n / 2.0).abs() <= 3.0 * sigma, "{noisy}");
    }

    #[test]
    fn truth_consistent_with_ontology() {
        let f = generate_fixture(&FixtureSpec {
            num_types: 30,
            sentences_per_type: 5,
            denied_type_sentences: 3,
            ..Default::default()
        })
        .unwrap();
        for (s, m) in f.corpus.mentions() {
            let t = f.truth.iter().find(|t| t.mention_id == m.mention_id).unwrap();
            let mapping = f.ontology.mapping(m.roleset_id.as_str()).unwrap();
            assert_eq!(mapping.candidate_type_ids, t.candidate_type_ids);
            assert!(t.candidate_type_ids.contains(&t.type_id));
            let trig = &s.tokens[m.start];
            assert!(!trig.contains('*'));
        }
        let filtered = f.ontology.filter(&f.filter, &Default::default());
        assert!(filtered.get_type(DENIED_TYPE_ID).is_none());
        assert!(filtered.mapping(DENIED_ROLESET).is_none());
    }
}
