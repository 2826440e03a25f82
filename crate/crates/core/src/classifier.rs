//! Stage 3: yes/no question answering over (trigger, candidate type) pairs,
//! trained with binary cross-entropy, plus confidence-margin self-labeling
//! of mentions whose roleset maps to several candidate types.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar};
use crate::corpus::Span;
use crate::encoder::{Encoder, TokenCounter, MASK};
use crate::error::{Error, Result};
use crate::nn::{self, ExampleGrad, Parameterized, TrainConfig};
use crate::ontology::{EventType, Ontology, TypeId};
use crate::ranker::RankedType;

pub const STAGE: &str = "classifier";

/// A rendered yes/no question about one (sentence, trigger, type) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPrompt {
    pub tokens: Vec<String>,
    pub mask_index: usize,
    /// Sentence tokens dropped for length.
    pub dropped_sentence: usize,
    /// Definition tokens dropped for length.
    pub dropped_definition: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl QAPrompt {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Render `{name} is defined as {definition} . {sentence} . Does {trigger}
/// indicate a {name} event ? [MASK]`, fitting `max_len` budget units
/// (two are reserved for the classification and separator tokens).
///
/// Over-long prompts first lose the sentence tokens farthest from the
/// trigger, then trailing definition tokens. Trigger and template tokens are
/// never removed.
pub fn render_prompt(
    ty: &EventType,
    sentence: &[String],
    span: Span,
    max_len: usize,
    counter: &dyn TokenCounter,
) -> Result<QAPrompt> {
    if span.start > span.end || span.end >= sentence.len() {
        return Err(Error::Argument(format!(
            "span [{}, {}] outside sentence of {} tokens",
            span.start,
            span.end,
            sentence.len()
        )));
    }
    let mut warnings = Vec::new();
    if ty.definition.trim().is_empty() {
        let w = format!("type {} has an empty definition", ty.type_id);
        log::warn!("{w}");
        warnings.push(w);
    }
    let name = words(&ty.name);
    let mut definition = words(&ty.definition);
    let trigger = &sentence[span.start..=span.end];
    let fixed: Vec<String> = name
        .iter()
        .cloned()
        .chain(words("is defined as . . Does"))
        .chain(trigger.iter().cloned())
        .chain(words("indicate a"))
        .chain(name.iter().cloned())
        .chain(words("event ?"))
        .chain([MASK.to_string()])
        .collect();
    let cost = |toks: &[String]| toks.iter().map(|t| counter.token_len(t)).sum::<usize>();
    let budget = max_len.saturating_sub(2);

    let mut keep = vec![true; sentence.len()];
    let mut used = cost(&fixed) + cost(&definition) + cost(sentence);
    // farthest first; among equal distances the later token goes first
    let mut order: Vec<usize> = (0..sentence.len()).filter(|i| !span.contains(*i)).collect();
    order.sort_by_key(|&i| {
        let d = if i < span.start { span.start - i } else { i - span.end };
        (std::cmp::Reverse(d), std::cmp::Reverse(i))
    });
    let mut dropped_sentence = 0;
    for i in order {
        if used <= budget {
            break;
        }
        keep[i] = false;
        used -= counter.token_len(&sentence[i]);
        dropped_sentence += 1;
    }
    let mut dropped_definition = 0;
    while used > budget {
        match definition.pop() {
            Some(t) => {
                used -= counter.token_len(&t);
                dropped_definition += 1;
            }
            None => {
                return Err(Error::Argument(format!(
                    "max_len {max_len} cannot hold the question template for type {}",
                    ty.type_id
                )))
            }
        }
    }
    if dropped_sentence + dropped_definition > 0 {
        log::debug!(
            "prompt for {} truncated: {dropped_sentence} sentence, {dropped_definition} definition tokens",
            ty.type_id
        );
    }

    let mut tokens = Vec::with_capacity(fixed.len() + definition.len() + sentence.len());
    tokens.extend(name.iter().cloned());
    tokens.extend(words("is defined as"));
    tokens.extend(definition);
    tokens.push(".".into());
    tokens.extend(sentence.iter().zip(&keep).filter(|(_, k)| **k).map(|(t, _)| t.clone()));
    tokens.push(".".into());
    tokens.push("Does".into());
    tokens.extend(trigger.iter().cloned());
    tokens.extend(words("indicate a"));
    tokens.extend(name.iter().cloned());
    tokens.extend(words("event ?"));
    tokens.push(MASK.into());
    Ok(QAPrompt {
        mask_index: tokens.len() - 1,
        tokens,
        dropped_sentence,
        dropped_definition,
        warnings,
    })
}

/// `exp(ℓ_yes) / (exp(ℓ_yes) + exp(ℓ_no))`.
pub fn p_yes_from_logits(yes: f64, no: f64) -> f64 {
    nn::sigmoid(yes - no)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub mention_id: String,
    pub type_id: TypeId,
    pub p_yes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSettings {
    pub max_len: usize,
    /// Negative pairs per positive during training.
    pub negatives: usize,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            max_len: 512,
            negatives: 5,
        }
    }
}

/// A mention to classify: its sentence, trigger span, roleset candidates and
/// the ranker's top-K types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsMention {
    pub mention_id: String,
    pub tokens: Vec<String>,
    pub span: Span,
    #[serde(default)]
    pub candidates: Vec<TypeId>,
    #[serde(default)]
    pub ranked: Vec<RankedType>,
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    encoder: Encoder,
    settings: ClassifierSettings,
}

impl ClassifierModel {
    pub fn new(encoder: Encoder, settings: ClassifierSettings) -> Self {
        ClassifierModel { encoder, settings }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn settings(&self) -> &ClassifierSettings {
        &self.settings
    }

    pub fn prompt(&self, ty: &EventType, tokens: &[String], span: Span) -> Result<QAPrompt> {
        render_prompt(ty, tokens, span, self.settings.max_len, &self.encoder)
    }

    /// `[ℓ_yes, ℓ_no]` at the mask position.
    pub fn logits(&self, prompt: &QAPrompt) -> Result<[f64; 2]> {
        let p = self.encoder.prepare(&prompt.tokens, self.settings.max_len)?;
        Ok(self.encoder.mask_forward(&p)?.logits)
    }

    pub fn p_yes(&self, prompt: &QAPrompt) -> Result<f64> {
        let [yes, no] = self.logits(prompt)?;
        Ok(p_yes_from_logits(yes, no))
    }

    /// BCE of one prompt against `target` (1 = yes).
    pub fn pair_loss_and_grad(&self, prompt: &[String], target: f64, grad: &mut [f64]) -> Result<f64> {
        let p = self.encoder.prepare(prompt, self.settings.max_len)?;
        let fwd = self.encoder.mask_forward(&p)?;
        let z = fwd.logits[0] - fwd.logits[1];
        let g = nn::sigmoid(z) - target;
        self.encoder.mask_backward(&p, &fwd, [g, -g], grad);
        Ok(nn::bce_with_logits(z, target))
    }

    /// Summed BCE over `(prompt, target)` pairs.
    pub fn loss_and_grad(&self, pairs: &[(&[String], f64)]) -> Result<ExampleGrad> {
        let mut grad = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        for (prompt, target) in pairs {
            loss += self.pair_loss_and_grad(prompt, *target, &mut grad)?;
        }
        Ok(ExampleGrad {
            loss,
            grad,
            weight: pairs.len() as f64,
        })
    }

    pub fn save(&self, stem: &Path, stage: &str) -> Result<()> {
        let enc = self.encoder.config().clone();
        let sidecar = Sidecar {
            backend_kind: enc.kind,
            h: enc.dim,
            version: checkpoint::FORMAT_VERSION,
            stage: stage.into(),
            encoder: enc,
            num_params: self.num_params(),
            parameter_hash: self.parameter_hash(),
            model: serde_json::to_value(&self.settings)?,
        };
        checkpoint::save(stem, &sidecar, &self.params())
    }

    pub fn load(stem: &Path, stage: &str) -> Result<Self> {
        let (sidecar, params) = checkpoint::load(stem, stage)?;
        let settings: ClassifierSettings = serde_json::from_value(sidecar.model)?;
        let mut model = ClassifierModel::new(Encoder::new(sidecar.encoder)?, settings);
        if params.len() != model.num_params() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        model.set_params(&params);
        Ok(model)
    }
}

impl Parameterized for ClassifierModel {
    fn num_params(&self) -> usize {
        self.encoder.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.encoder.params()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.encoder.set_params(flat)
    }
}

/// Score one prompt.
pub fn score_pair(model: &ClassifierModel, mention_id: &str, type_id: &TypeId, prompt: &QAPrompt) -> Result<PairScore> {
    Ok(PairScore {
        mention_id: mention_id.to_string(),
        type_id: type_id.clone(),
        p_yes: model.p_yes(prompt)?,
    })
}

/// Score each of `types` for one mention, in the given order.
pub fn score_types(
    model: &ClassifierModel,
    ont: &Ontology,
    mention_id: &str,
    tokens: &[String],
    span: Span,
    types: &[TypeId],
) -> Result<Vec<PairScore>> {
    types
        .par_iter()
        .map(|t| {
            let prompt = model.prompt(ont.type_or_err(t.as_str())?, tokens, span)?;
            score_pair(model, mention_id, t, &prompt)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub chosen: TypeId,
    pub scores: Vec<PairScore>,
}

/// Pick the candidate with the highest p_yes; ties go to the higher ranker
/// score, then the smaller type id.
pub fn choose(scores: &[PairScore], ranked: &[RankedType]) -> Option<TypeId> {
    let rank_score: HashMap<&TypeId, f64> = ranked.iter().map(|r| (&r.type_id, r.score)).collect();
    let rs = |t: &TypeId| rank_score.get(t).copied().unwrap_or(f64::NEG_INFINITY);
    scores
        .iter()
        .max_by(|a, b| {
            a.p_yes
                .total_cmp(&b.p_yes)
                .then_with(|| rs(&a.type_id).total_cmp(&rs(&b.type_id)))
                .then_with(|| b.type_id.cmp(&a.type_id))
        })
        .map(|s| s.type_id.clone())
}

/// Classify a mention among its ranker top-K types.
pub fn classify_mention(model: &ClassifierModel, ont: &Ontology, mention: &ClsMention) -> Result<Classification> {
    if mention.ranked.is_empty() {
        return Err(Error::Argument(format!(
            "mention {} has no candidate types",
            mention.mention_id
        )));
    }
    let types: Vec<TypeId> = mention.ranked.iter().map(|r| r.type_id.clone()).collect();
    let scores = score_types(model, ont, &mention.mention_id, &mention.tokens, mention.span, &types)?;
    let chosen = choose(&scores, &mention.ranked).expect("non-empty scores");
    Ok(Classification { chosen, scores })
}

/// Train on labelled mentions. Each positive pair comes with up to
/// `negatives` pairs drawn afresh every epoch from the mention's ranker
/// top-K, excluding the label.
pub fn train_classifier(
    model: &mut ClassifierModel,
    ont: &Ontology,
    labeled: &[(&ClsMention, TypeId)],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if labeled.is_empty() {
        return Err(Error::Training("no labelled mentions to train on".into()));
    }
    struct Cached {
        positive: Vec<String>,
        pool: Vec<Vec<String>>,
    }
    let cached: Vec<Cached> = labeled
        .par_iter()
        .map(|(m, label)| {
            let positive = model
                .prompt(ont.type_or_err(label.as_str())?, &m.tokens, m.span)?
                .tokens;
            let pool = m
                .ranked
                .iter()
                .filter(|r| &r.type_id != label)
                .map(|r| {
                    Ok(model
                        .prompt(ont.type_or_err(r.type_id.as_str())?, &m.tokens, m.span)?
                        .tokens)
                })
                .collect::<Result<_>>()?;
            Ok(Cached { positive, pool })
        })
        .collect::<Result<_>>()?;
    // validate every prompt once so the parallel loop cannot fail
    for c in &cached {
        model
            .encoder
            .mask_forward(&model.encoder.prepare(&c.positive, model.settings.max_len)?)?;
    }

    let k = model.settings.negatives;
    let steps = cfg.total_steps(labeled.len());
    let seed = cfg.seed;
    Ok(nn::train_loop(
        model,
        |epoch| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xC1A5_5000 + epoch as u64));
            let negs: Vec<Vec<usize>> = cached
                .iter()
                .map(|c| {
                    let idx: Vec<usize> = (0..c.pool.len()).collect();
                    idx.choose_multiple(&mut rng, k.min(idx.len())).copied().collect()
                })
                .collect();
            nn::shuffled_batches(cached.len(), cfg.batch_size, seed, epoch)
                .into_iter()
                .map(|b| {
                    b.into_iter()
                        .map(|i| {
                            let c = &cached[i];
                            let mut pairs: Vec<(&[String], f64)> = vec![(c.positive.as_slice(), 1.0)];
                            pairs.extend(negs[i].iter().map(|&j| (c.pool[j].as_slice(), 0.0)));
                            pairs
                        })
                        .collect()
                })
                .collect()
        },
        cfg,
        steps,
        |m: &ClassifierModel, pairs: &Vec<(&[String], f64)>| {
            m.loss_and_grad(pairs).expect("prompts validated before training")
        },
    ))
}

/// Train on mentions whose roleset maps to exactly one type.
pub fn train_base_classifier(
    model: &mut ClassifierModel,
    ont: &Ontology,
    clean: &[ClsMention],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if clean.is_empty() {
        return Err(Error::Training("clean training subset is empty".into()));
    }
    let labeled = clean
        .iter()
        .map(|m| match m.candidates.as_slice() {
            [only] => Ok((m, only.clone())),
            other => Err(Error::Argument(format!(
                "mention {} has {} candidates; base training needs exactly one",
                m.mention_id,
                other.len()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    train_classifier(model, ont, &labeled, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfLabelConfig {
    pub confidence_margin_threshold: f64,
    pub rounds: usize,
}

impl Default for SelfLabelConfig {
    fn default() -> Self {
        SelfLabelConfig {
            confidence_margin_threshold: 0.9,
            rounds: 1,
        }
    }
}

impl SelfLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.confidence_margin_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Argument(format!("self-label threshold {t} outside [0, 1]")));
        }
        if self.rounds == 0 {
            return Err(Error::Argument("self-label rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub type_id: TypeId,
    pub p_yes: f64,
}

/// One line of the pseudo-label audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub mention_id: String,
    pub candidates: Vec<CandidateScore>,
    pub margin: f64,
    pub selected: bool,
    pub pseudo_label: Option<TypeId>,
}

/// Top-1 minus runner-up p_yes within the candidate set; a single candidate
/// has margin equal to its own p_yes.
pub fn confidence_margin(scores: &[CandidateScore]) -> Option<(TypeId, f64)> {
    let mut sorted: Vec<&CandidateScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.p_yes.total_cmp(&a.p_yes).then_with(|| a.type_id.cmp(&b.type_id)));
    let top = sorted.first()?;
    let runner = sorted.get(1).map_or(0.0, |s| s.p_yes);
    Some((top.type_id.clone(), top.p_yes - runner))
}

/// Score every candidate of every noisy mention and select those whose
/// margin reaches `threshold`.
pub fn select_pseudo_labels(
    model: &ClassifierModel,
    ont: &Ontology,
    noisy: &[ClsMention],
    threshold: f64,
) -> Result<Vec<AuditRecord>> {
    noisy
        .par_iter()
        .map(|m| {
            let scores = score_types(model, ont, &m.mention_id, &m.tokens, m.span, &m.candidates)?;
            let candidates: Vec<CandidateScore> = scores
                .into_iter()
                .map(|s| CandidateScore {
                    type_id: s.type_id,
                    p_yes: s.p_yes,
                })
                .collect();
            let (top, margin) = confidence_margin(&candidates)
                .ok_or_else(|| Error::Argument(format!("mention {} has no candidates", m.mention_id)))?;
            let selected = margin >= threshold;
            Ok(AuditRecord {
                mention_id: m.mention_id.clone(),
                candidates,
                margin,
                selected,
                pseudo_label: selected.then_some(top),
            })
        })
        .collect()
}

/// Clean mentions labelled by their single candidate plus selected noisy
/// mentions labelled by their pseudo-label.
pub fn training_union<'a>(
    clean: &'a [ClsMention],
    noisy: &'a [ClsMention],
    audit: &[AuditRecord],
) -> Result<Vec<(&'a ClsMention, TypeId)>> {
    let mut out = Vec::with_capacity(clean.len() + audit.len());
    for m in clean {
        match m.candidates.as_slice() {
            [only] => out.push((m, only.clone())),
            _ => {
                return Err(Error::Argument(format!(
                    "clean mention {} is not single-candidate",
                    m.mention_id
                )))
            }
        }
    }
    let by_id: HashMap<&str, &ClsMention> = noisy.iter().map(|m| (m.mention_id.as_str(), m)).collect();
    for rec in audit.iter().filter(|r| r.selected) {
        let m = by_id
            .get(rec.mention_id.as_str())
            .ok_or_else(|| Error::Lookup(rec.mention_id.clone()))?;
        let label = rec.pseudo_label.clone().expect("selected record carries a label");
        if !m.candidates.contains(&label) {
            return Err(Error::Validation(format!(
                "pseudo-label {label} of {} is not a candidate",
                rec.mention_id
            )));
        }
        out.push((m, label));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SelfLabelOutcome {
    /// Audit of the last round.
    pub audit: Vec<AuditRecord>,
    pub selected: usize,
    pub final_model: ClassifierModel,
    pub final_losses: Vec<f64>,
}

/// Pseudo-label the noisy mentions, retraining between rounds. Returns the
/// audit of the last round; the caller trains the final model on
/// [`training_union`] of it.
pub fn pseudo_label_rounds(
    base: &ClassifierModel,
    fresh: &ClassifierModel,
    ont: &Ontology,
    clean: &[ClsMention],
    noisy: &[ClsMention],
    cfg: &SelfLabelConfig,
    train: &TrainConfig,
) -> Result<Vec<AuditRecord>> {
    cfg.validate()?;
    let mut scorer = base.clone();
    let mut audit = Vec::new();
    for round in 0..cfg.rounds {
        audit = select_pseudo_labels(&scorer, ont, noisy, cfg.confidence_margin_threshold)?;
        let n = audit.iter().filter(|r| r.selected).count();
        log::info!("self-label round {}: selected {n} of {}", round + 1, noisy.len());
        if round + 1 < cfg.rounds {
            scorer = fresh.clone();
            train_classifier(&mut scorer, ont, &training_union(clean, noisy, &audit)?, train)?;
        }
    }
    Ok(audit)
}

/// Full self-labeling: select pseudo-labels with `base`, then train a final
/// model from `fresh` on the clean data together with the selected mentions.
pub fn self_label(
    base: &ClassifierModel,
    fresh: &ClassifierModel,
    ont: &Ontology,
    clean: &[ClsMention],
    noisy: &[ClsMention],
    cfg: &SelfLabelConfig,
    train: &TrainConfig,
) -> Result<SelfLabelOutcome> {
    let audit = pseudo_label_rounds(base, fresh, ont, clean, noisy, cfg, train)?;
    let selected = audit.iter().filter(|r| r.selected).count();
    if selected == 0 {
        log::warn!("self-labeling selected no mentions; final model uses clean data only");
    }
    let mut final_model = fresh.clone();
    let final_losses = train_classifier(&mut final_model, ont, &training_union(clean, noisy, &audit)?, train)?;
    Ok(SelfLabelOutcome {
        audit,
        selected,
        final_model,
        final_losses,
    })
}

/// Candidate types of a set of mentions that are missing from the ontology.
pub fn unknown_types<'a>(ont: &Ontology, mentions: impl IntoIterator<Item = &'a ClsMention>) -> BTreeSet<TypeId> {
    mentions
        .into_iter()
        .flat_map(|m| m.candidates.iter().chain(m.ranked.iter().map(|r| &r.type_id)))
        .filter(|t| ont.get_type(t.as_str()).is_none())
        .cloned()
        .collect()
}
