//! Event-type ontology: types with definitions and a single-parent hierarchy,
//! plus the roleset → candidate-type mapping that supplies partial labels.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Opaque event-type identifier (Wikidata Qnode style, e.g. `Q1345`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeId(pub String);

/// Predicate roleset identifier such as `pay.01`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RolesetId(pub String);

macro_rules! string_id {
    ($t:ty) => {
        impl $t {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl From<&str> for $t {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
        impl From<String> for $t {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
        impl Borrow<str> for $t {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}
string_id!(TypeId);
string_id!(RolesetId);

impl RolesetId {
    /// Lemma part of the roleset: everything before the final `.`.
    pub fn predicate(&self) -> &str {
        match self.0.rfind('.') {
            Some(i) => &self.0[..i],
            None => &self.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventType {
    pub type_id: TypeId,
    pub name: String,
    pub definition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<TypeId>,
}

impl EventType {
    /// Text the ranker encodes for this type: name followed by definition.
    pub fn description(&self) -> String {
        if self.definition.is_empty() {
            self.name.clone()
        } else {
            format!("{} {}", self.name, self.definition)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolesetMapping {
    pub roleset_id: RolesetId,
    pub candidate_type_ids: Vec<TypeId>,
}

impl RolesetMapping {
    pub fn is_clean(&self) -> bool {
        self.candidate_type_ids.len() == 1
    }
}

/// Direct hierarchy relation of a gold type relative to a predicted type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Same,
    Child,
    Parent,
    Sibling,
    Unrelated,
}

/// Declarative curation applied after loading.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub deny_types: Vec<TypeId>,
    pub deny_rolesets: Vec<RolesetId>,
    /// Rolesets with fewer supplied mentions are dropped; `0` disables the rule.
    pub min_mentions: usize,
}

impl FilterRules {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn is_empty(&self) -> bool {
        self.deny_types.is_empty() && self.deny_rolesets.is_empty() && self.min_mentions == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ontology {
    types: BTreeMap<TypeId, EventType>,
    mappings: BTreeMap<RolesetId, RolesetMapping>,
    warnings: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ParentField {
    One(TypeId),
    Many(Vec<TypeId>),
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Type {
        type_id: TypeId,
        name: String,
        definition: String,
        #[serde(default)]
        parent_id: Option<ParentField>,
    },
    Mapping {
        roleset_id: RolesetId,
        candidate_type_ids: Vec<TypeId>,
    },
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RecordOut<'a> {
    Type(&'a EventType),
    Mapping(&'a RolesetMapping),
}

impl Ontology {
    /// Build and validate an ontology.
    pub fn new(types: Vec<EventType>, mappings: Vec<RolesetMapping>) -> Result<Self> {
        Self::with_warnings(types, mappings, Vec::new())
    }

    fn with_warnings(types: Vec<EventType>, mappings: Vec<RolesetMapping>, warnings: Vec<String>) -> Result<Self> {
        let mut type_map = BTreeMap::new();
        for t in types {
            if t.definition.trim().is_empty() {
                return Err(Error::Validation(format!("type {} has an empty definition", t.type_id)));
            }
            if let Some(prev) = type_map.insert(t.type_id.clone(), t) {
                return Err(Error::Validation(format!("duplicate type id {}", prev.type_id)));
            }
        }

        let mut dangling = BTreeSet::new();
        for t in type_map.values() {
            if let Some(p) = &t.parent_id {
                if !type_map.contains_key(p) {
                    dangling.insert(p.to_string());
                }
            }
        }

        let mut mapping_map = BTreeMap::new();
        for m in mappings {
            if m.candidate_type_ids.is_empty() {
                return Err(Error::Validation(format!(
                    "roleset {} has no candidate types",
                    m.roleset_id
                )));
            }
            let unique: BTreeSet<_> = m.candidate_type_ids.iter().collect();
            if unique.len() != m.candidate_type_ids.len() {
                return Err(Error::Validation(format!(
                    "roleset {} lists a candidate type twice",
                    m.roleset_id
                )));
            }
            for c in &m.candidate_type_ids {
                if !type_map.contains_key(c) {
                    dangling.insert(c.to_string());
                }
            }
            if mapping_map.contains_key(&m.roleset_id) {
                return Err(Error::Validation(format!("duplicate roleset {}", m.roleset_id)));
            }
            mapping_map.insert(m.roleset_id.clone(), m);
        }
        if !dangling.is_empty() {
            return Err(Error::Dangling {
                ids: dangling.into_iter().collect(),
            });
        }

        let ont = Ontology {
            types: type_map,
            mappings: mapping_map,
            warnings,
        };
        if let Some(members) = ont.find_cycle() {
            return Err(Error::Cycle { members });
        }
        Ok(ont)
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        // 0 = unvisited, 1 = on current chain, 2 = done
        let mut state: HashMap<&TypeId, u8> = HashMap::new();
        for start in self.types.keys() {
            if state.get(start).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut chain = Vec::new();
            let mut cur = Some(start);
            while let Some(id) = cur {
                match state.get(id).copied().unwrap_or(0) {
                    1 => {
                        let pos = chain.iter().position(|c| *c == id).unwrap_or(0);
                        let mut members: Vec<String> = chain[pos..].iter().map(|c: &&TypeId| c.to_string()).collect();
                        members.sort();
                        return Some(members);
                    }
                    2 => break,
                    _ => {}
                }
                state.insert(id, 1);
                chain.push(id);
                cur = self.types[id].parent_id.as_ref();
            }
            for id in chain {
                state.insert(id, 2);
            }
        }
        None
    }

    /// Parse the JSON-lines ontology document.
    pub fn from_reader(reader: impl BufRead, origin: &str) -> Result<Self> {
        let records: Vec<Record> = io::parse_jsonl(reader, origin)?;
        let mut types = Vec::new();
        let mut mappings = Vec::new();
        let mut warnings = Vec::new();
        for r in records {
            match r {
                Record::Type {
                    type_id,
                    name,
                    definition,
                    parent_id,
                } => {
                    let parent_id = match parent_id {
                        None => None,
                        Some(ParentField::One(p)) => Some(p),
                        Some(ParentField::Many(ps)) => {
                            if ps.len() > 1 {
                                let msg = format!("type {type_id} lists {} parents; keeping {}", ps.len(), ps[0]);
                                log::warn!("{msg}");
                                warnings.push(msg);
                            }
                            ps.into_iter().next()
                        }
                    };
                    types.push(EventType {
                        type_id,
                        name,
                        definition,
                        parent_id,
                    });
                }
                Record::Mapping {
                    roleset_id,
                    candidate_type_ids,
                } => mappings.push(RolesetMapping {
                    roleset_id,
                    candidate_type_ids,
                }),
            }
        }
        Self::with_warnings(types, mappings, warnings)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut records: Vec<RecordOut<'_>> = self.types.values().map(RecordOut::Type).collect();
        records.extend(self.mappings.values().map(RecordOut::Mapping));
        io::to_jsonl(&records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_jsonl()?)
    }

    pub fn types(&self) -> impl Iterator<Item = &EventType> {
        self.types.values()
    }

    pub fn type_ids(&self) -> impl Iterator<Item = &TypeId> {
        self.types.keys()
    }

    pub fn mappings(&self) -> impl Iterator<Item = &RolesetMapping> {
        self.mappings.values()
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_mappings(&self) -> usize {
        self.mappings.len()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn get_type(&self, id: &str) -> Option<&EventType> {
        self.types.get(id)
    }

    pub fn type_or_err(&self, id: &str) -> Result<&EventType> {
        self.get_type(id).ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn mapping(&self, roleset: &str) -> Option<&RolesetMapping> {
        self.mappings.get(roleset)
    }

    pub fn parent(&self, id: &str) -> Option<&TypeId> {
        self.types.get(id).and_then(|t| t.parent_id.as_ref())
    }

    /// All mappings whose roleset shares `predicate`.
    pub fn mappings_for_predicate<'a>(&'a self, predicate: &'a str) -> impl Iterator<Item = &'a RolesetMapping> + 'a {
        self.mappings
            .values()
            .filter(move |m| m.roleset_id.predicate() == predicate)
    }

    /// Relation of `b` (gold) relative to `a` (prediction), one edge deep.
    pub fn hierarchy_relation(&self, a: &str, b: &str) -> Result<Relation> {
        let ta = self.type_or_err(a)?;
        let tb = self.type_or_err(b)?;
        if ta.type_id == tb.type_id {
            return Ok(Relation::Same);
        }
        if tb.parent_id.as_ref() == Some(&ta.type_id) {
            return Ok(Relation::Child);
        }
        if ta.parent_id.as_ref() == Some(&tb.type_id) {
            return Ok(Relation::Parent);
        }
        match (&ta.parent_id, &tb.parent_id) {
            (Some(pa), Some(pb)) if pa == pb => Ok(Relation::Sibling),
            _ => Ok(Relation::Unrelated),
        }
    }

    /// Apply curation rules. `mention_counts` is consulted only when
    /// `rules.min_mentions > 0`; absent rolesets count as zero.
    pub fn filter(&self, rules: &FilterRules, mention_counts: &BTreeMap<String, usize>) -> Ontology {
        let deny_types: BTreeSet<&str> = rules.deny_types.iter().map(|t| t.as_str()).collect();
        let deny_rolesets: BTreeSet<&str> = rules.deny_rolesets.iter().map(|r| r.as_str()).collect();

        let types: BTreeMap<TypeId, EventType> = self
            .types
            .iter()
            .filter(|(id, _)| !deny_types.contains(id.as_str()))
            .map(|(id, t)| {
                let mut t = t.clone();
                if t.parent_id.as_ref().is_some_and(|p| deny_types.contains(p.as_str())) {
                    t.parent_id = None;
                }
                (id.clone(), t)
            })
            .collect();

        let mappings = self
            .mappings
            .iter()
            .filter(|(rid, _)| !deny_rolesets.contains(rid.as_str()))
            .filter(|(rid, _)| {
                rules.min_mentions == 0 || mention_counts.get(rid.as_str()).copied().unwrap_or(0) >= rules.min_mentions
            })
            .filter_map(|(rid, m)| {
                let kept: Vec<TypeId> = m
                    .candidate_type_ids
                    .iter()
                    .filter(|c| types.contains_key(*c))
                    .cloned()
                    .collect();
                (!kept.is_empty()).then(|| {
                    (
                        rid.clone(),
                        RolesetMapping {
                            roleset_id: rid.clone(),
                            candidate_type_ids: kept,
                        },
                    )
                })
            })
            .collect();

        Ontology {
            types,
            mappings,
            warnings: self.warnings.clone(),
        }
    }
}

/// Load and validate an ontology document.
pub fn load_ontology(path: &Path) -> Result<Ontology> {
    Ontology::load(path)
}

pub fn filter_ontology(ont: &Ontology, rules: &FilterRules, mention_counts: &BTreeMap<String, usize>) -> Ontology {
    ont.filter(rules, mention_counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ty(id: &str, name: &str, parent: Option<&str>) -> EventType {
        EventType {
            type_id: id.into(),
            name: name.into(),
            definition: format!("definition of {name}"),
            parent_id: parent.map(TypeId::from),
        }
    }

    fn mapping(r: &str, c: &[&str]) -> RolesetMapping {
        RolesetMapping {
            roleset_id: r.into(),
            candidate_type_ids: c.iter().map(|s| TypeId::from(*s)).collect(),
        }
    }

    fn parse(doc: &str) -> Result<Ontology> {
        Ontology::from_reader(doc.as_bytes(), "test")
    }

    #[test]
    fn loads_three_types_one_mapping() {
        let doc = r#"{"kind":"type","type_id":"Q1","name":"a","definition":"x"}
{"kind":"type","type_id":"Q2","name":"b","definition":"y","parent_id":"Q1"}
{"kind":"type","type_id":"Q3","name":"c","definition":"z"}
{"kind":"mapping","roleset_id":"pay.01","candidate_type_ids":["Q1","Q3"]}
"#;
        let ont = parse(doc).unwrap();
        assert_eq!(ont.num_types(), 3);
        assert_eq!(ont.num_mappings(), 1);
        let again = Ontology::from_reader(&ont.to_jsonl().unwrap()[..], "rt").unwrap();
        assert_eq!(again, ont);
    }

    #[test]
    fn dangling_mapping_reference_is_cited() {
        let doc = r#"{"kind":"type","type_id":"Q1","name":"a","definition":"x"}
{"kind":"mapping","roleset_id":"pay.01","candidate_type_ids":["Q1","Q9"]}
"#;
        match parse(doc) {
            Err(Error::Dangling { ids }) => assert_eq!(ids, vec!["Q9".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parent_cycle_is_named() {
        let doc = r#"{"kind":"type","type_id":"A","name":"a","definition":"x","parent_id":"B"}
{"kind":"type","type_id":"B","name":"b","definition":"y","parent_id":"A"}
{"kind":"type","type_id":"C","name":"c","definition":"z","parent_id":"A"}
"#;
        match parse(doc) {
            Err(Error::Cycle { members }) => assert_eq!(members, vec!["A", "B"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_names_line() {
        let doc = "{\"kind\":\"type\",\"type_id\":\"Q1\",\"name\":\"a\",\"definition\":\"x\"}\n{\"kind\":\"type\",\"name\":\"b\"}\n";
        let err = parse(doc).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("test:2"));
    }

    #[test]
    fn multiple_parents_keep_first_with_warning() {
        let doc = r#"{"kind":"type","type_id":"A","name":"a","definition":"x"}
{"kind":"type","type_id":"B","name":"b","definition":"y"}
{"kind":"type","type_id":"C","name":"c","definition":"z","parent_id":["B","A"]}
"#;
        let ont = parse(doc).unwrap();
        assert_eq!(ont.parent("C").unwrap().as_str(), "B");
        assert_eq!(ont.warnings().len(), 1);
    }

    #[test]
    fn duplicate_candidates_rejected() {
        let err = Ontology::new(vec![ty("Q1", "a", None)], vec![mapping("a.01", &["Q1", "Q1"])]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn predicate_split_on_final_dot() {
        assert_eq!(RolesetId::from("pay.01").predicate(), "pay");
        assert_eq!(RolesetId::from("look.up.02").predicate(), "look.up");
        assert_eq!(RolesetId::from("bare").predicate(), "bare");
    }

    fn sample() -> Ontology {
        Ontology::new(
            vec![
                ty("Q241625", "wish", None),
                ty("Q1", "payment", None),
                ty("Q2", "transfer", Some("Q241625")),
            ],
            vec![
                mapping("wish.01", &["Q241625"]),
                mapping("pay.01", &["Q1", "Q241625"]),
                mapping("give.01", &["Q2"]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn deny_list_removes_type_everywhere() {
        let rules = FilterRules {
            deny_types: vec!["Q241625".into()],
            ..Default::default()
        };
        let out = sample().filter(&rules, &BTreeMap::new());
        assert!(out.get_type("Q241625").is_none());
        assert!(out.mapping("wish.01").is_none());
        assert_eq!(
            out.mapping("pay.01").unwrap().candidate_type_ids,
            vec![TypeId::from("Q1")]
        );
        assert_eq!(out.parent("Q2"), None);
        for m in out.mappings() {
            assert!(!m.candidate_type_ids.iter().any(|c| c.as_str() == "Q241625"));
        }
    }

    #[test]
    fn min_mentions_drops_rare_rolesets() {
        let rules = FilterRules {
            min_mentions: 3,
            ..Default::default()
        };
        let counts: BTreeMap<String, usize> = [("pay.01".to_string(), 2), ("give.01".to_string(), 3)]
            .into_iter()
            .collect();
        let out = sample().filter(&rules, &counts);
        assert!(out.mapping("pay.01").is_none());
        assert!(out.mapping("give.01").is_some());
        assert!(out.mapping("wish.01").is_none());
        assert_eq!(out.num_types(), 3);
    }

    #[test]
    fn empty_rules_are_identity() {
        let ont = sample();
        assert_eq!(ont.filter(&FilterRules::default(), &BTreeMap::new()), ont);
    }

    fn hierarchy() -> Ontology {
        Ontology::new(
            vec![
                ty("work_general", "work", None),
                ty("work_econ", "work", Some("work_general")),
                ty("conflict", "conflict", None),
                ty("social_conflict", "social_conflict", Some("conflict")),
                ty("armed_conflict", "armed_conflict", Some("conflict")),
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn hierarchy_relations() {
        let o = hierarchy();
        assert_eq!(o.hierarchy_relation("work_econ", "work_econ").unwrap(), Relation::Same);
        assert_eq!(
            o.hierarchy_relation("work_general", "work_econ").unwrap(),
            Relation::Child
        );
        assert_eq!(
            o.hierarchy_relation("work_econ", "work_general").unwrap(),
            Relation::Parent
        );
        assert_eq!(
            o.hierarchy_relation("social_conflict", "armed_conflict").unwrap(),
            Relation::Sibling
        );
        // roots never count as siblings
        assert_eq!(
            o.hierarchy_relation("work_general", "conflict").unwrap(),
            Relation::Unrelated
        );
        // grandparent-level kinship is out of reach
        assert_eq!(
            o.hierarchy_relation("work_econ", "armed_conflict").unwrap(),
            Relation::Unrelated
        );
        assert!(matches!(
            o.hierarchy_relation("nope", "conflict"),
            Err(Error::Lookup(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_ontology() -> impl Strategy<Value = Ontology> {
            (2usize..12)
                .prop_flat_map(|n| {
                    (
                        proptest::collection::vec(proptest::option::of(0usize..n), n),
                        proptest::collection::vec(proptest::collection::btree_set(0usize..n, 1..4), 1..10),
                    )
                        .prop_map(move |(parents, maps)| (n, parents, maps))
                })
                .prop_map(|(n, parents, maps)| {
                    let types = (0..n)
                        .map(|i| {
                            // parents point backwards, so the hierarchy is acyclic
                            let parent = parents[i].filter(|&p| p < i).map(|p| format!("Q{p}"));
                            ty(&format!("Q{i}"), &format!("t{i}"), parent.as_deref())
                        })
                        .collect();
                    let mappings = maps
                        .iter()
                        .enumerate()
                        .map(|(k, set)| {
                            let ids: Vec<String> = set.iter().map(|i| format!("Q{i}")).collect();
                            let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
                            mapping(&format!("r{k}.01"), &ids)
                        })
                        .collect();
                    Ontology::new(types, mappings).unwrap()
                })
        }

        fn arb_rules() -> impl Strategy<Value = (FilterRules, BTreeMap<String, usize>)> {
            (
                proptest::collection::vec(0usize..12, 0..4),
                proptest::collection::vec(0usize..10, 0..3),
                0usize..3,
                proptest::collection::vec(0usize..4, 10),
            )
                .prop_map(|(dt, dr, min, counts)| {
                    let rules = FilterRules {
                        deny_types: dt.iter().map(|i| TypeId::from(format!("Q{i}"))).collect(),
                        deny_rolesets: dr.iter().map(|k| RolesetId::from(format!("r{k}.01"))).collect(),
                        min_mentions: min,
                    };
                    let counts = counts
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| (format!("r{k}.01"), c))
                        .collect();
                    (rules, counts)
                })
        }

        proptest! {
            #[test]
            fn filter_is_idempotent_and_shrinking(ont in arb_ontology(), (rules, counts) in arb_rules()) {
                let once = ont.filter(&rules, &counts);
                prop_assert_eq!(once.filter(&rules, &counts), once.clone());
                prop_assert!(once.num_types() <= ont.num_types());
                prop_assert!(once.mappings().count() <= ont.mappings().count());
                for m in once.mappings() {
                    prop_assert!(!m.candidate_type_ids.is_empty());
                    for c in &m.candidate_type_ids {
                        prop_assert!(once.get_type(c.as_str()).is_some());
                        prop_assert!(!rules.deny_types.contains(c));
                    }
                }
                for t in once.types() {
                    if let Some(p) = &t.parent_id {
                        prop_assert!(once.get_type(p.as_str()).is_some());
                    }
                }
            }

            #[test]
            fn relations_are_consistent(ont in arb_ontology()) {
                let ids: Vec<TypeId> = ont.type_ids().cloned().collect();
                for a in &ids {
                    for b in &ids {
                        let ab = ont.hierarchy_relation(a.as_str(), b.as_str()).unwrap();
                        let ba = ont.hierarchy_relation(b.as_str(), a.as_str()).unwrap();
                        let expected = match ab {
                            Relation::Child => Relation::Parent,
                            Relation::Parent => Relation::Child,
                            other => other,
                        };
                        prop_assert_eq!(ba, expected);
                        prop_assert_eq!(ab == Relation::Same, a == b);
                    }
                }
            }
        }
    }
}
