//! File-based orchestration of the three-stage system.
//!
//! Each stage reads upstream artifacts from the output directory, writes its
//! own artifacts atomically and records a manifest with the config hash and
//! the SHA-256 of every input and output. Before a stage runs, the manifests
//! of its dependencies are checked: a missing manifest is a dependency error,
//! an output whose bytes changed since it was recorded is a staleness error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, AuditRecord, ClassifierModel, ClassifierSettings, ClsMention, SelfLabelConfig};
use crate::corpus::{self, Corpus, SplitConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, PredictedEvent, PredictionRecord, StagewiseRecord};
use crate::io;
use crate::nn::{Parameterized, TrainConfig};
use crate::ontology::{FilterRules, Ontology, TypeId};
use crate::ranker::{self, RankExample, RankedType, RankerModel, RankerSettings, TypeIndex, UniformNegativeSampler};
use crate::trigger::{self, OverlapPolicy, TriggerExample, TriggerModel, TriggerSettings};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    BuildData,
    TrainTi,
    TrainRank,
    BuildIndex,
    TrainClsBase,
    SelfLabel,
    TrainClsFinal,
    Predict,
    Evaluate,
    ErrorAnalysis,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 10] = [
        Stage::BuildData,
        Stage::TrainTi,
        Stage::TrainRank,
        Stage::BuildIndex,
        Stage::TrainClsBase,
        Stage::SelfLabel,
        Stage::TrainClsFinal,
        Stage::Predict,
        Stage::Evaluate,
        Stage::ErrorAnalysis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildData => "build-data",
            Stage::TrainTi => "train-ti",
            Stage::TrainRank => "train-rank",
            Stage::BuildIndex => "build-index",
            Stage::TrainClsBase => "train-cls-base",
            Stage::SelfLabel => "self-label",
            Stage::TrainClsFinal => "train-cls-final",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::ErrorAnalysis => "error-analysis",
        }
    }

    /// Direct upstream stages, checked in this order.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::BuildData => &[],
            Stage::TrainTi | Stage::TrainRank => &[Stage::BuildData],
            Stage::BuildIndex => &[Stage::TrainRank],
            Stage::TrainClsBase => &[Stage::BuildIndex],
            Stage::SelfLabel => &[Stage::TrainClsBase],
            Stage::TrainClsFinal => &[Stage::SelfLabel],
            Stage::Predict => &[Stage::TrainTi, Stage::BuildIndex, Stage::TrainClsFinal],
            Stage::Evaluate | Stage::ErrorAnalysis => &[Stage::Predict],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub ontology: PathBuf,
    pub corpus: PathBuf,
    pub filter: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            ontology: "ontology.jsonl".into(),
            corpus: "corpus.jsonl".into(),
            filter: None,
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub ratios: [f64; 3],
    pub allow_empty: bool,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            ratios: [0.90, 0.05, 0.05],
            allow_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerStage {
    pub threshold: f64,
    pub overlap: OverlapPolicy,
    pub max_span_len: usize,
    pub train: TrainConfig,
}

impl Default for TriggerStage {
    fn default() -> Self {
        TriggerStage {
            threshold: 0.5,
            overlap: OverlapPolicy::Greedy,
            max_span_len: 10,
            train: TrainConfig::trigger(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerStage {
    /// Candidate types passed to the classifier.
    pub top_k: usize,
    /// Length of the ranked list kept in prediction files.
    pub report_k: usize,
    pub negatives: usize,
    pub margin: f64,
    pub conv_width: usize,
    pub conv_stride: usize,
    pub max_rows: usize,
    pub train: TrainConfig,
}

impl Default for RankerStage {
    fn default() -> Self {
        RankerStage {
            top_k: 10,
            report_k: 50,
            negatives: 5,
            margin: 1.0,
            conv_width: 4,
            conv_stride: 2,
            max_rows: 32,
            train: TrainConfig::ranker(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierStage {
    pub negatives: usize,
    pub train: TrainConfig,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        ClassifierStage {
            negatives: 5,
            train: TrainConfig::classifier(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub ks: Vec<usize>,
    pub prioritize_hierarchy: bool,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            ks: evaluation::DEFAULT_KS.to_vec(),
            prioritize_hierarchy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub encoder: EncoderConfig,
    pub split: SplitSettings,
    pub trigger: TriggerStage,
    pub ranker: RankerStage,
    pub classifier: ClassifierStage,
    pub self_label: SelfLabelConfig,
    pub evaluation: EvaluationSettings,
}

/// Parse a `--set` value: TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Overlay `src` onto `dst`, descending into tables present in both.
fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Parse TOML, apply `key.path=value` overrides and resolve relative
    /// paths against `base`.
    pub fn from_toml(text: &str, overrides: &[(String, String)], base: &Path) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(PipelineConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        for (key, raw) in overrides {
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields one part");
            let mut node = &mut table;
            for p in parents {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
            }
            node.insert(last.to_string(), parse_value(raw));
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.paths.ontology);
        abs(&mut self.paths.corpus);
        abs(&mut self.paths.output);
        if let Some(f) = &mut self.paths.filter {
            abs(f);
        }
        if let Some(t) = &mut self.encoder.table_path {
            abs(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.trigger.threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("trigger.threshold {t} outside [0, 1]")));
        }
        if self.trigger.max_span_len == 0 {
            return Err(Error::Config("trigger.max_span_len must be positive".into()));
        }
        if self.ranker.top_k == 0 {
            return Err(Error::Config("ranker.top_k must be positive".into()));
        }
        if self.ranker.report_k < self.ranker.top_k {
            return Err(Error::Config("ranker.report_k must be at least ranker.top_k".into()));
        }
        for (name, tc) in [
            ("trigger", &self.trigger.train),
            ("ranker", &self.ranker.train),
            ("classifier", &self.classifier.train),
        ] {
            if tc.batch_size == 0 || tc.learning_rate <= 0.0 {
                return Err(Error::Config(format!(
                    "{name}.train needs positive batch_size and learning_rate"
                )));
            }
        }
        self.self_label.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of everything but the paths; inputs are hashed separately.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
            if let Some(enc) = obj.get_mut("encoder").and_then(|e| e.as_object_mut()) {
                enc.remove("table_path");
            }
        }
        Ok(io::sha256_hex(&serde_json::to_vec(&v)?))
    }

    fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.encoder.clone())
    }

    fn trigger_settings(&self) -> TriggerSettings {
        TriggerSettings {
            max_span_len: self.trigger.max_span_len,
            max_len: self.trigger.train.max_len,
        }
    }

    fn ranker_settings(&self) -> RankerSettings {
        RankerSettings {
            conv_width: self.ranker.conv_width,
            conv_stride: self.ranker.conv_stride,
            max_rows: self.ranker.max_rows,
            max_len: self.ranker.train.max_len,
            margin: self.ranker.margin,
            negatives: self.ranker.negatives,
        }
    }

    fn classifier_settings(&self) -> ClassifierSettings {
        ClassifierSettings {
            max_len: self.classifier.train.max_len,
            negatives: self.classifier.negatives,
        }
    }

    fn seeded(&self, tc: &TrainConfig, salt: u64) -> TrainConfig {
        TrainConfig {
            seed: tc.seed ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt),
            ..tc.clone()
        }
    }
}

/// Artifact locations inside the output directory.
pub struct Layout {
    root: PathBuf,
}

pub const SPLITS: [&str; 2] = ["dev", "test"];

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.path(&format!("manifests/{}.json", stage.name()))
    }

    pub fn ontology(&self) -> PathBuf {
        self.path("data/ontology.jsonl")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.path(&format!("data/{name}.jsonl"))
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.path(&format!("models/{name}"))
    }

    pub fn index(&self) -> PathBuf {
        self.path("index/types")
    }

    pub fn train_topk(&self) -> PathBuf {
        self.path("data/train_topk.jsonl")
    }

    pub fn audit(&self) -> PathBuf {
        self.path("self_label/audit.jsonl")
    }

    pub fn predictions(&self, split: &str) -> PathBuf {
        self.path(&format!("predictions/{split}.jsonl"))
    }

    pub fn stagewise(&self, split: &str) -> PathBuf {
        self.path(&format!("predictions/{split}.stagewise.jsonl"))
    }

    /// Stagewise records of the base classifier, for the self-labeling ablation.
    pub fn stagewise_base(&self, split: &str) -> PathBuf {
        self.path(&format!("predictions/{split}.stagewise_base.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.path(&format!("reports/{name}"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Exclusive ownership of an output directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Verify that `stage`'s manifest exists and its outputs are unchanged.
pub fn check_stage(layout: &Layout, stage: Stage) -> Result<Manifest> {
    let path = layout.manifest(stage);
    if !path.exists() {
        return Err(Error::Dependency {
            stage: stage.name().into(),
            missing: layout.rel(&path),
        });
    }
    let manifest: Manifest = io::read_json(&path)?;
    for (rel, hash) in &manifest.outputs {
        let p = layout.path(rel);
        if !p.exists() {
            return Err(Error::Dependency {
                stage: stage.name().into(),
                missing: rel.clone(),
            });
        }
        if &io::file_sha256(&p)? != hash {
            return Err(Error::Staleness {
                stage: stage.name().into(),
                path: p,
            });
        }
    }
    Ok(manifest)
}

/// [`check_stage`] on `dep`, with missing artifacts reported against `stage`.
fn check_dependency(layout: &Layout, stage: Stage, dep: Stage) -> Result<Manifest> {
    check_stage(layout, dep).map_err(|e| match e {
        Error::Dependency { .. } => Error::Dependency {
            stage: stage.name().into(),
            missing: dep.name().into(),
        },
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    layout: Layout,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.into(), io::file_sha256(path)?);
        Ok(())
    }

    fn upstream(&mut self, m: &Manifest) {
        for (rel, hash) in &m.outputs {
            self.inputs.insert(rel.clone(), hash.clone());
        }
    }

    fn wrote(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }

    fn wrote_model(&mut self, stem: &Path) {
        self.outputs.push(stem.with_extension("bin"));
        self.outputs.push(stem.with_extension("json"));
    }
}

/// Run one stage. Takes the output-directory lock for its duration.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageStatus> {
    let _lock = RunLock::acquire(&cfg.paths.output)?;
    run_stage_unlocked(cfg, stage)
}

/// Run every stage in order under one lock.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageStatus>> {
    let _lock = RunLock::acquire(&cfg.paths.output)?;
    Stage::ALL.iter().map(|s| run_stage_unlocked(cfg, *s)).collect()
}

fn run_stage_unlocked(cfg: &PipelineConfig, stage: Stage) -> Result<StageStatus> {
    let mut ctx = Ctx {
        cfg,
        layout: Layout::new(&cfg.paths.output),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    for dep in stage.deps() {
        let m = check_dependency(&ctx.layout, stage, *dep)?;
        ctx.upstream(&m);
    }
    log::info!("running stage {stage}");
    let summary = match stage {
        Stage::BuildData => build_data(&mut ctx)?,
        Stage::TrainTi => train_ti(&mut ctx)?,
        Stage::TrainRank => train_rank(&mut ctx)?,
        Stage::BuildIndex => build_index(&mut ctx)?,
        Stage::TrainClsBase => train_cls_base(&mut ctx)?,
        Stage::SelfLabel => self_label(&mut ctx)?,
        Stage::TrainClsFinal => train_cls_final(&mut ctx)?,
        Stage::Predict => predict(&mut ctx)?,
        Stage::Evaluate => evaluate(&mut ctx)?,
        Stage::ErrorAnalysis => error_analysis(&mut ctx)?,
    };
    let mut outputs = BTreeMap::new();
    for p in &ctx.outputs {
        outputs.insert(ctx.layout.rel(p), io::file_sha256(p)?);
    }
    let manifest = Manifest {
        stage: stage.name().into(),
        version: VERSION.into(),
        config_hash: cfg.config_hash()?,
        inputs: ctx.inputs,
        outputs,
    };
    io::write_json(&ctx.layout.manifest(stage), &manifest)?;
    Ok(StageStatus {
        stage: stage.name().into(),
        outputs: manifest.outputs.keys().cloned().collect(),
        summary,
    })
}

fn report(ctx: &mut Ctx<'_>, name: &str, value: &impl Serialize) -> Result<serde_json::Value> {
    let path = ctx.layout.report(name);
    io::write_json(&path, value)?;
    ctx.wrote(path);
    Ok(serde_json::to_value(value)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildDataReport {
    pub clean: corpus::CleanReport,
    pub attach: corpus::AttachReport,
    pub ontology_types: usize,
    pub ontology_mappings: usize,
    pub ontology_warnings: Vec<String>,
    pub sentences: BTreeMap<String, usize>,
    pub mentions: BTreeMap<String, usize>,
    pub clean_mentions: BTreeMap<String, usize>,
}

fn build_data(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    ctx.input("ontology", &cfg.paths.ontology)?;
    ctx.input("corpus", &cfg.paths.corpus)?;
    let rules = match &cfg.paths.filter {
        Some(p) => {
            ctx.input("filter", p)?;
            FilterRules::load(p)?
        }
        None => FilterRules::default(),
    };
    let raw_ont = Ontology::load(&cfg.paths.ontology)?;
    let raw = Corpus::load(&cfg.paths.corpus)?;
    let (cleaned, clean_report) = corpus::clean_corpus(&raw);
    let ont = raw_ont.filter(&rules, &cleaned.roleset_counts());
    let (attached, attach_report) = corpus::attach_candidates(&cleaned, &ont);
    let split = corpus::split_corpus(
        &attached,
        &SplitConfig {
            ratios: (cfg.split.ratios[0], cfg.split.ratios[1], cfg.split.ratios[2]),
            seed: cfg.seed,
            allow_empty: cfg.split.allow_empty,
        },
    )?;

    let ont_path = ctx.layout.ontology();
    ont.save(&ont_path)?;
    ctx.wrote(ont_path);
    let train = split.train.without_gold();
    let parts = [("train", &train), ("dev", &split.dev), ("test", &split.test)];
    let mut rep = BuildDataReport {
        clean: clean_report,
        attach: attach_report,
        ontology_types: ont.num_types(),
        ontology_mappings: ont.num_mappings(),
        ontology_warnings: raw_ont.warnings().iter().chain(ont.warnings()).cloned().collect(),
        sentences: BTreeMap::new(),
        mentions: BTreeMap::new(),
        clean_mentions: BTreeMap::new(),
    };
    for (name, c) in parts {
        let p = ctx.layout.split(name);
        c.save(&p)?;
        ctx.wrote(p);
        rep.sentences.insert(name.into(), c.sentences.len());
        rep.mentions.insert(name.into(), c.num_mentions());
        rep.clean_mentions
            .insert(name.into(), c.mentions().filter(|(_, m)| m.is_clean()).count());
    }
    report(ctx, "build_data.json", &rep)
}

fn load_ontology(ctx: &Ctx<'_>) -> Result<Ontology> {
    Ontology::load(&ctx.layout.ontology())
}

fn train_ti(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let train = Corpus::load(&ctx.layout.split("train"))?;
    let mut model = TriggerModel::new(cfg.encoder()?, cfg.trigger_settings());
    let curve = model.train(&TriggerExample::from_corpus(&train), &cfg.seeded(&cfg.trigger.train, 1))?;
    let stem = ctx.layout.model(trigger::STAGE);
    model.save(&stem)?;
    ctx.wrote_model(&stem);
    report(ctx, "train_ti.json", &serde_json::json!({ "epoch_losses": curve }))
}

fn train_rank(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let ont = load_ontology(ctx)?;
    let train = Corpus::load(&ctx.layout.split("train"))?;
    let examples: Vec<RankExample> = train
        .mentions()
        .map(|(s, m)| RankExample {
            tokens: s.tokens.clone(),
            candidates: m.candidate_type_ids.clone(),
        })
        .collect();
    let mut model = RankerModel::new(cfg.encoder()?, cfg.ranker_settings())?;
    let tc = cfg.seeded(&cfg.ranker.train, 2);
    let mut sampler = UniformNegativeSampler::new(&ont, tc.seed);
    let rep = model.train(&examples, &ont, &mut sampler, &tc)?;
    let stem = ctx.layout.model(ranker::STAGE);
    model.save(&stem)?;
    ctx.wrote_model(&stem);
    report(ctx, "train_rank.json", &rep)
}

fn build_index(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let ont = load_ontology(ctx)?;
    let model = RankerModel::load(&ctx.layout.model(ranker::STAGE))?;
    let index = TypeIndex::build(&model, &ont)?;
    let stem = ctx.layout.index();
    index.save(&stem)?;
    ctx.wrote_model(&stem);
    Ok(serde_json::json!({ "types": index.len(), "max_rows": index.max_rows() }))
}

/// Rank each distinct sentence once and return the top `k` per sentence.
fn rank_sentences(
    model: &RankerModel,
    index: &TypeIndex,
    sentences: &[&[String]],
    k: usize,
) -> Result<Vec<Vec<RankedType>>> {
    Ok(ranker::rank_many(model, index, sentences)?
        .into_iter()
        .map(|mut r| {
            r.truncate(k);
            r
        })
        .collect())
}

fn cls_mentions(corpus: &Corpus, rankings: &[Vec<RankedType>], top_k: usize) -> Vec<ClsMention> {
    corpus
        .sentences
        .iter()
        .zip(rankings)
        .flat_map(|(s, r)| {
            s.mentions.iter().map(move |m| ClsMention {
                mention_id: m.mention_id.clone(),
                tokens: s.tokens.clone(),
                span: m.span(),
                candidates: m.candidate_type_ids.clone(),
                ranked: r.iter().take(top_k).cloned().collect(),
            })
        })
        .collect()
}

fn train_cls_base(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let ont = load_ontology(ctx)?;
    let train = Corpus::load(&ctx.layout.split("train"))?;
    let rank_model = RankerModel::load(&ctx.layout.model(ranker::STAGE))?;
    let index = TypeIndex::load(&ctx.layout.index())?;
    let sents: Vec<&[String]> = train.sentences.iter().map(|s| s.tokens.as_slice()).collect();
    let rankings = rank_sentences(&rank_model, &index, &sents, cfg.ranker.top_k)?;
    let mentions = cls_mentions(&train, &rankings, cfg.ranker.top_k);
    let topk = ctx.layout.train_topk();
    io::write_jsonl(&topk, &mentions)?;
    ctx.wrote(topk);

    let clean: Vec<ClsMention> = mentions.into_iter().filter(|m| m.candidates.len() == 1).collect();
    let mut model = ClassifierModel::new(cfg.encoder()?, cfg.classifier_settings());
    let curve = classifier::train_base_classifier(&mut model, &ont, &clean, &cfg.seeded(&cfg.classifier.train, 3))?;
    let stem = ctx.layout.model("classifier_base");
    model.save(&stem, classifier::STAGE)?;
    ctx.wrote_model(&stem);
    report(
        ctx,
        "train_cls_base.json",
        &serde_json::json!({ "clean_mentions": clean.len(), "epoch_losses": curve }),
    )
}

fn split_clean_noisy(mentions: Vec<ClsMention>) -> (Vec<ClsMention>, Vec<ClsMention>) {
    mentions.into_iter().partition(|m| m.candidates.len() == 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfLabelReport {
    pub threshold: f64,
    pub rounds: usize,
    pub noisy_mentions: usize,
    pub selected: usize,
}

fn self_label(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let ont = load_ontology(ctx)?;
    let (clean, noisy) = split_clean_noisy(io::read_jsonl(&ctx.layout.train_topk())?);
    let base = ClassifierModel::load(&ctx.layout.model("classifier_base"), classifier::STAGE)?;
    let fresh = ClassifierModel::new(cfg.encoder()?, cfg.classifier_settings());
    let audit = classifier::pseudo_label_rounds(
        &base,
        &fresh,
        &ont,
        &clean,
        &noisy,
        &cfg.self_label,
        &cfg.seeded(&cfg.classifier.train, 3),
    )?;
    let selected = audit.iter().filter(|r| r.selected).count();
    if selected == 0 {
        log::warn!("self-labeling selected no mentions; the final classifier trains on clean data only");
    }
    let path = ctx.layout.audit();
    io::write_jsonl(&path, &audit)?;
    ctx.wrote(path);
    report(
        ctx,
        "self_label.json",
        &SelfLabelReport {
            threshold: cfg.self_label.confidence_margin_threshold,
            rounds: cfg.self_label.rounds,
            noisy_mentions: noisy.len(),
            selected,
        },
    )
}

fn train_cls_final(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let ont = load_ontology(ctx)?;
    let (clean, noisy) = split_clean_noisy(io::read_jsonl(&ctx.layout.train_topk())?);
    let audit: Vec<AuditRecord> = io::read_jsonl(&ctx.layout.audit())?;
    let labeled = classifier::training_union(&clean, &noisy, &audit)?;
    let mut model = ClassifierModel::new(cfg.encoder()?, cfg.classifier_settings());
    let curve = classifier::train_classifier(&mut model, &ont, &labeled, &cfg.seeded(&cfg.classifier.train, 3))?;
    let stem = ctx.layout.model("classifier_final");
    model.save(&stem, classifier::STAGE)?;
    ctx.wrote_model(&stem);
    report(
        ctx,
        "train_cls_final.json",
        &serde_json::json!({
            "clean_mentions": clean.len(),
            "pseudo_labeled": labeled.len() - clean.len(),
            "epoch_losses": curve,
        }),
    )
}

/// All three trained stages, ready for inference.
pub struct Predictor {
    pub ontology: Ontology,
    pub trigger: TriggerModel,
    pub ranker: RankerModel,
    pub index: TypeIndex,
    pub classifier: ClassifierModel,
    pub threshold: f64,
    pub overlap: OverlapPolicy,
    pub top_k: usize,
    pub report_k: usize,
}

impl Predictor {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let layout = Layout::new(&cfg.paths.output);
        for dep in Stage::Predict.deps() {
            check_dependency(&layout, Stage::Predict, *dep)?;
        }
        let ranker = RankerModel::load(&layout.model(ranker::STAGE))?;
        let index = TypeIndex::load(&layout.index())?;
        if index.parameter_hash() != ranker.parameter_hash() {
            return Err(Error::StaleIndex {
                index_hash: index.parameter_hash().into(),
                model_hash: ranker.parameter_hash(),
            });
        }
        let mut trigger = TriggerModel::load(&layout.model(trigger::STAGE))?;
        trigger.set_max_span_len(cfg.trigger.max_span_len);
        Ok(Predictor {
            ontology: Ontology::load(&layout.ontology())?,
            trigger,
            ranker,
            index,
            classifier: ClassifierModel::load(&layout.model("classifier_final"), classifier::STAGE)?,
            threshold: cfg.trigger.threshold,
            overlap: cfg.trigger.overlap,
            top_k: cfg.ranker.top_k,
            report_k: cfg.ranker.report_k,
        })
    }

    /// Decode triggers in one sentence.
    pub fn triggers(&self, tokens: &[String]) -> Result<Vec<trigger::SpanScore>> {
        let scores = self.trigger.score_spans(tokens)?;
        Ok(trigger::decode_triggers(&scores, self.threshold, self.overlap))
    }

    /// Ranker top `report_k` for a sentence.
    pub fn rank(&self, tokens: &[String]) -> Result<Vec<RankedType>> {
        let mut r = ranker::rank_types(&self.ranker, &self.index, tokens)?;
        r.truncate(self.report_k);
        Ok(r)
    }

    /// Classify one trigger against a shared ranking. Returns the chosen type
    /// and the ranking with its top-K reordered by p_yes.
    pub fn classify(
        &self,
        mention_id: &str,
        tokens: &[String],
        span: corpus::Span,
        ranking: &[RankedType],
    ) -> Result<(TypeId, Vec<RankedType>)> {
        self.classify_with(&self.classifier, mention_id, tokens, span, ranking)
    }

    /// [`Predictor::classify`] with another classifier.
    pub fn classify_with(
        &self,
        model: &ClassifierModel,
        mention_id: &str,
        tokens: &[String],
        span: corpus::Span,
        ranking: &[RankedType],
    ) -> Result<(TypeId, Vec<RankedType>)> {
        let k = self.top_k.min(ranking.len());
        let mention = ClsMention {
            mention_id: mention_id.into(),
            tokens: tokens.to_vec(),
            span,
            candidates: Vec::new(),
            ranked: ranking[..k].to_vec(),
        };
        let c = classifier::classify_mention(model, &self.ontology, &mention)?;
        let p: HashMap<&TypeId, f64> = c.scores.iter().map(|s| (&s.type_id, s.p_yes)).collect();
        let mut head = ranking[..k].to_vec();
        head.sort_by(|a, b| {
            p[&b.type_id]
                .total_cmp(&p[&a.type_id])
                .then(b.score.total_cmp(&a.score))
                .then_with(|| a.type_id.cmp(&b.type_id))
        });
        debug_assert_eq!(head[0].type_id, c.chosen);
        head.extend_from_slice(&ranking[k..]);
        Ok((c.chosen, head))
    }

    /// Triggers, one ranking per sentence, and a classified type per trigger.
    pub fn predict_sentence(&self, sent_id: &str, tokens: &[String]) -> Result<PredictionRecord> {
        let spans = self.triggers(tokens)?;
        if spans.is_empty() {
            return Ok(PredictionRecord {
                sent_id: sent_id.into(),
                events: Vec::new(),
            });
        }
        let ranking = self.rank(tokens)?;
        let mut events: Vec<PredictedEvent> = spans
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (chosen, ranked) = self.classify(&format!("{sent_id}#{i}"), tokens, s.span, &ranking)?;
                Ok(PredictedEvent {
                    start: s.span.start,
                    end: s.span.end,
                    ranked_types: ranked,
                    chosen_type: Some(chosen),
                })
            })
            .collect::<Result<_>>()?;
        events.sort_by_key(|e| (e.start, e.end));
        Ok(PredictionRecord {
            sent_id: sent_id.into(),
            events,
        })
    }
}

/// Full inference over `(sent_id, tokens)` pairs.
pub fn predict_end_to_end(predictor: &Predictor, sentences: &[(String, Vec<String>)]) -> Result<Vec<PredictionRecord>> {
    sentences
        .par_iter()
        .map(|(id, toks)| predictor.predict_sentence(id, toks))
        .collect()
}

/// Ranking and classification on gold spans, bypassing trigger decoding.
pub fn stagewise(predictor: &Predictor, model: &ClassifierModel, gold: &Corpus) -> Result<Vec<StagewiseRecord>> {
    let per_sentence: Vec<Vec<StagewiseRecord>> = gold
        .sentences
        .par_iter()
        .filter(|s| !s.mentions.is_empty())
        .map(|s| {
            let ranking = predictor.rank(&s.tokens)?;
            s.mentions
                .iter()
                .map(|m| {
                    let (_, reordered) =
                        predictor.classify_with(model, &m.mention_id, &s.tokens, m.span(), &ranking)?;
                    let k = predictor.top_k.min(ranking.len());
                    Ok(StagewiseRecord {
                        mention_id: m.mention_id.clone(),
                        gold_type_id: m.gold_type_id.clone(),
                        ranked: ranking.iter().map(|r| r.type_id.clone()).collect(),
                        classified: reordered[..k].iter().map(|r| r.type_id.clone()).collect(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_sentence.into_iter().flatten().collect())
}

fn predict(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let predictor = Predictor::load(ctx.cfg)?;
    let base = ClassifierModel::load(&ctx.layout.model("classifier_base"), classifier::STAGE)?;
    let mut summary = serde_json::Map::new();
    for split in SPLITS {
        let gold = Corpus::load(&ctx.layout.split(split))?;
        let inputs: Vec<(String, Vec<String>)> = gold
            .sentences
            .iter()
            .map(|s| (s.sent_id.clone(), s.tokens.clone()))
            .collect();
        let preds = predict_end_to_end(&predictor, &inputs)?;
        let p = ctx.layout.predictions(split);
        io::write_jsonl(&p, &preds)?;
        ctx.wrote(p);
        for (model, p) in [
            (&predictor.classifier, ctx.layout.stagewise(split)),
            (&base, ctx.layout.stagewise_base(split)),
        ] {
            io::write_jsonl(&p, &stagewise(&predictor, model, &gold)?)?;
            ctx.wrote(p);
        }
        let events: usize = preds.iter().map(|r| r.events.len()).sum();
        summary.insert(
            split.into(),
            serde_json::json!({ "sentences": preds.len(), "events": events }),
        );
    }
    Ok(serde_json::Value::Object(summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub all: evaluation::MetricReport,
    /// Gold restricted to mentions whose roleset maps to one type.
    pub clean: evaluation::MetricReport,
    /// Gold restricted to mentions with several candidate types.
    pub noisy: evaluation::MetricReport,
    /// Ranking and classification on gold spans with the final classifier.
    pub stages: SubsetStages,
    /// The same with the classifier trained on clean mentions only.
    pub base_stages: SubsetStages,
    pub frequency_groups: evaluation::QuartileReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStages {
    pub all: evaluation::StageReport,
    pub clean: evaluation::StageReport,
    pub noisy: evaluation::StageReport,
}

impl SubsetStages {
    pub fn new(gold: &Corpus, records: &[StagewiseRecord], top_k: usize) -> Self {
        let noisy: BTreeSet<&str> = gold
            .mentions()
            .filter(|(_, m)| m.candidate_type_ids.len() > 1)
            .map(|(_, m)| m.mention_id.as_str())
            .collect();
        let (n, c): (Vec<StagewiseRecord>, Vec<StagewiseRecord>) = records
            .iter()
            .cloned()
            .partition(|r| noisy.contains(r.mention_id.as_str()));
        let report = |rs: &[StagewiseRecord]| {
            evaluation::per_stage_report(rs, &evaluation::RANKING_KS, &evaluation::CLASSIFICATION_KS, top_k)
        };
        SubsetStages {
            all: report(records),
            clean: report(&c),
            noisy: report(&n),
        }
    }
}

/// Gold mentions and the predictions of their sentences, restricted to the
/// mentions satisfying `keep`.
fn restrict(
    gold: &Corpus,
    preds: &[PredictionRecord],
    keep: impl Fn(&corpus::EventMention) -> bool,
) -> (Vec<evaluation::GoldMention>, Vec<PredictionRecord>) {
    let mut sub = gold.clone();
    for s in &mut sub.sentences {
        s.mentions.retain(&keep);
    }
    let sents: BTreeSet<&str> = sub
        .sentences
        .iter()
        .filter(|s| !s.mentions.is_empty())
        .map(|s| s.sent_id.as_str())
        .collect();
    let p = preds
        .iter()
        .filter(|r| sents.contains(r.sent_id.as_str()))
        .cloned()
        .collect();
    (evaluation::gold_mentions(&sub), p)
}

/// Metric report for one split from files on disk.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    gold: &Corpus,
    preds: &[PredictionRecord],
    stages: &[StagewiseRecord],
    base_stages: &[StagewiseRecord],
    train: &Corpus,
    ont: &Ontology,
    cfg: &EvaluationSettings,
    top_k: usize,
) -> SplitReport {
    let all_gold = evaluation::gold_mentions(gold);
    let (clean_gold, clean_preds) = restrict(gold, preds, |m| m.candidate_type_ids.len() == 1);
    let (noisy_gold, noisy_preds) = restrict(gold, preds, |m| m.candidate_type_ids.len() > 1);
    let types: Vec<TypeId> = ont.type_ids().cloned().collect();
    SplitReport {
        all: evaluation::evaluate(preds, &all_gold, &cfg.ks),
        clean: evaluation::evaluate(&clean_preds, &clean_gold, &cfg.ks),
        noisy: evaluation::evaluate(&noisy_preds, &noisy_gold, &cfg.ks),
        stages: SubsetStages::new(gold, stages, top_k),
        base_stages: SubsetStages::new(gold, base_stages, top_k),
        frequency_groups: evaluation::frequency_quartile_analysis(
            preds,
            &all_gold,
            &evaluation::type_frequencies(train),
            &types,
        ),
    }
}

fn evaluate(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let ont = load_ontology(ctx)?;
    let train = Corpus::load(&ctx.layout.split("train"))?;
    let mut summary = serde_json::Map::new();
    for split in SPLITS {
        let gold = Corpus::load(&ctx.layout.split(split))?;
        let preds: Vec<PredictionRecord> = io::read_jsonl(&ctx.layout.predictions(split))?;
        let stages: Vec<StagewiseRecord> = io::read_jsonl(&ctx.layout.stagewise(split))?;
        let base: Vec<StagewiseRecord> = io::read_jsonl(&ctx.layout.stagewise_base(split))?;
        let rep = evaluate_split(
            &gold,
            &preds,
            &stages,
            &base,
            &train,
            &ont,
            &cfg.evaluation,
            cfg.ranker.top_k,
        );
        summary.insert(
            split.into(),
            serde_json::json!({ "ti_f1": rep.all.ti.f1, "tc_f1": rep.all.tc.f1 }),
        );
        report(ctx, &format!("eval_{split}.json"), &rep)?;
    }
    Ok(serde_json::Value::Object(summary))
}

fn error_analysis(ctx: &mut Ctx<'_>) -> Result<serde_json::Value> {
    let cfg = ctx.cfg;
    let ont = load_ontology(ctx)?;
    let mut summary = serde_json::Map::new();
    for split in SPLITS {
        let gold = Corpus::load(&ctx.layout.split(split))?;
        let preds: Vec<PredictionRecord> = io::read_jsonl(&ctx.layout.predictions(split))?;
        let cases = evaluation::collect_errors(&preds, &evaluation::gold_mentions(&gold));
        let errors = evaluation::categorize_errors(&cases, &ont, cfg.evaluation.prioritize_hierarchy);
        let path = ctx.layout.report(&format!("errors_{split}.csv"));
        io::write_atomic(&path, &evaluation::errors_to_csv(&errors)?)?;
        ctx.wrote(path);
        let counts: BTreeMap<&str, usize> = evaluation::category_counts(&errors)
            .into_iter()
            .map(|(c, n)| (c.as_str(), n))
            .collect();
        summary.insert(split.into(), serde_json::to_value(&counts)?);
    }
    report(ctx, "error_counts.json", &summary)
}
