//! Stage 2: late-interaction event-type ranking.
//!
//! Sentences and type descriptions are encoded separately into bags of
//! unit-norm vectors (encoder rows → 1-d convolution over the token axis →
//! row normalization). A sentence–type pair is scored by MaxSim: each sentence
//! vector takes its best dot product against the type's vectors, summed.
//! Training uses a hinge loss between the best-scoring candidate type and
//! sampled negatives.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar};
use crate::encoder::{self, Encoder, EncoderBackend, Prepared, EVENT_MARKER, SENT_MARKER};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{self, ExampleGrad, Parameterized, TrainConfig};
use crate::ontology::{EventType, Ontology, TypeId};

pub const STAGE: &str = "ranker";
const NORM_TOL: f64 = 1e-5;

/// Rows of unit-norm vectors representing one encoded text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBag {
    vectors: Array2<f64>,
}

impl EmbeddingBag {
    /// Wrap rows that are already unit-norm.
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::Argument("embedding bag needs at least one row".into()));
        }
        for (i, row) in vectors.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::Argument(format!("bag row {i} has norm {n}")));
            }
        }
        Ok(EmbeddingBag { vectors })
    }

    /// Normalize each row of `rows`.
    pub fn normalized(rows: ArrayView2<'_, f64>) -> Result<Self> {
        Self::new(nn::normalize_rows(rows).0)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn num_rows(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// `Σ_{s ∈ bag_s} max_{e ∈ bag_e} e·s`.
pub fn maxsim(bag_e: &EmbeddingBag, bag_s: &EmbeddingBag) -> Result<f64> {
    if bag_e.dim() != bag_s.dim() {
        return Err(Error::Dimension {
            expected: bag_s.dim(),
            found: bag_e.dim(),
        });
    }
    Ok(nn::maxsim_with_argmax(bag_e.view(), bag_s.view()).0)
}

/// Hinge loss of one sentence: `Σ_neg max(0, τ − best + ρ(neg))`.
pub fn margin_loss(best_positive: f64, negatives: &[f64], tau: f64) -> f64 {
    negatives.iter().map(|n| (tau - best_positive + n).max(0.0)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Sentence,
    Event,
}

impl TextKind {
    fn marker(self) -> &'static str {
        match self {
            TextKind::Sentence => SENT_MARKER,
            TextKind::Event => EVENT_MARKER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerSettings {
    pub conv_width: usize,
    pub conv_stride: usize,
    /// Bags are truncated to at most this many rows.
    pub max_rows: usize,
    pub max_len: usize,
    /// Hinge margin τ.
    pub margin: f64,
    pub negatives: usize,
}

impl Default for RankerSettings {
    fn default() -> Self {
        RankerSettings {
            conv_width: 4,
            conv_stride: 2,
            max_rows: 32,
            max_len: 128,
            margin: 1.0,
            negatives: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedType {
    pub type_id: TypeId,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct RankerModel {
    encoder: Encoder,
    /// `h × (width · h)`: output row r = W · [x_{rs}; …; x_{rs+width−1}] + b.
    conv_weight: Array2<f64>,
    conv_bias: Array1<f64>,
    settings: RankerSettings,
}

/// Cached forward pass of [`RankerModel::encode_text`].
struct BagForward {
    prepared: Prepared,
    /// Encoder rows, zero-padded to at least the convolution width.
    padded: Array2<f64>,
    windows: usize,
    normed: Array2<f64>,
    norms: Vec<f64>,
}

pub fn description_tokens(ty: &EventType) -> Vec<String> {
    ty.description().split_whitespace().map(String::from).collect()
}

impl RankerModel {
    /// Convolution starts as window averaging.
    pub fn new(encoder: Encoder, settings: RankerSettings) -> Result<Self> {
        let h = encoder.dim();
        let w = settings.conv_width;
        let mut weight = Array2::zeros((h, w * h));
        for o in 0..w {
            for c in 0..h {
                weight[[c, o * h + c]] = 1.0 / w as f64;
            }
        }
        Self::with_conv(encoder, weight, Array1::zeros(h), settings)
    }

    pub fn with_conv(
        encoder: Encoder,
        conv_weight: Array2<f64>,
        conv_bias: Array1<f64>,
        settings: RankerSettings,
    ) -> Result<Self> {
        let h = encoder.dim();
        if settings.conv_width == 0 || settings.conv_stride == 0 || settings.max_rows == 0 {
            return Err(Error::Argument(
                "convolution width, stride and max_rows must be positive".into(),
            ));
        }
        if conv_weight.dim() != (h, settings.conv_width * h) {
            return Err(Error::Dimension {
                expected: settings.conv_width * h * h,
                found: conv_weight.len(),
            });
        }
        if conv_bias.len() != h {
            return Err(Error::Dimension {
                expected: h,
                found: conv_bias.len(),
            });
        }
        Ok(RankerModel {
            encoder,
            conv_weight,
            conv_bias,
            settings,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn settings(&self) -> &RankerSettings {
        &self.settings
    }

    fn forward(&self, kind: TextKind, text: &[String]) -> Result<BagForward> {
        if text.is_empty() {
            return Err(Error::Argument("cannot encode empty text".into()));
        }
        let mut tokens = Vec::with_capacity(text.len() + 1);
        tokens.push(kind.marker().to_string());
        tokens.extend_from_slice(text);
        let prepared = self.encoder.prepare(&tokens, self.settings.max_len)?;
        let rows = self.encoder.forward(&prepared);

        let (width, stride, h) = (self.settings.conv_width, self.settings.conv_stride, self.encoder.dim());
        let len = rows.nrows().max(width);
        let mut padded = Array2::zeros((len, h));
        padded.slice_mut(s![..rows.nrows(), ..]).assign(&rows);
        let windows = ((len - width) / stride + 1).min(self.settings.max_rows);

        let mut y = Array2::zeros((windows, h));
        for r in 0..windows {
            let start = r * stride;
            let window = padded.slice(s![start..start + width, ..]);
            let flat = Array1::from_iter(window.iter().copied());
            y.row_mut(r).assign(&(self.conv_weight.dot(&flat) + &self.conv_bias));
        }
        let (normed, norms) = nn::normalize_rows(y.view());
        Ok(BagForward {
            prepared,
            padded,
            windows,
            normed,
            norms,
        })
    }

    /// Accumulate the gradient of `d_bag` (w.r.t. the normalized rows) into `grad`.
    fn backward(&self, fwd: &BagForward, d_bag: &Array2<f64>, grad: &mut [f64]) {
        let (width, stride, h) = (self.settings.conv_width, self.settings.conv_stride, self.encoder.dim());
        let d_y = nn::normalize_rows_backward(fwd.normed.view(), &fwd.norms, d_bag.view());
        let enc_len = self.encoder.num_params();
        let cw_len = self.conv_weight.len();
        let mut d_padded = Array2::<f64>::zeros(fwd.padded.raw_dim());
        {
            let (_, tail) = grad.split_at_mut(enc_len);
            let (g_w, g_b) = tail.split_at_mut(cw_len);
            let mut g_w = encoder::matrix_view_mut(g_w, h, width * h);
            for r in 0..fwd.windows {
                let start = r * stride;
                let dy = d_y.row(r);
                let window = fwd.padded.slice(s![start..start + width, ..]);
                let flat = Array1::from_iter(window.iter().copied());
                for c in 0..h {
                    if dy[c] != 0.0 {
                        g_w.row_mut(c).scaled_add(dy[c], &flat);
                    }
                    g_b[c] += dy[c];
                }
                let d_flat = self.conv_weight.t().dot(&dy);
                let mut dw = d_padded.slice_mut(s![start..start + width, ..]);
                for (o, mut row) in dw.rows_mut().into_iter().enumerate() {
                    row += &d_flat.slice(s![o * h..(o + 1) * h]);
                }
            }
        }
        let n = fwd.prepared.tokens.len() + 1;
        let d_rows = d_padded.slice(s![..n, ..]).to_owned();
        let wl = self.encoder.weight_len();
        self.encoder.backward(
            &fwd.prepared,
            &d_rows,
            encoder::matrix_view_mut(&mut grad[..wl], h, wl / h),
        );
    }

    /// Encode text (already tokenized) into a bag.
    pub fn encode_text(&self, kind: TextKind, text: &[String]) -> Result<EmbeddingBag> {
        let fwd = self.forward(kind, text)?;
        Ok(EmbeddingBag { vectors: fwd.normed })
    }

    pub fn encode_type(&self, ty: &EventType) -> Result<EmbeddingBag> {
        self.encode_text(TextKind::Event, &description_tokens(ty))
    }

    /// Hinge loss of one sentence against its candidate set and negatives.
    pub fn loss_and_grad(
        &self,
        sentence: &[String],
        candidates: &[&[String]],
        negatives: &[&[String]],
    ) -> Result<ExampleGrad> {
        let mut grad = vec![0.0; self.num_params()];
        if candidates.is_empty() {
            return Err(Error::Argument("empty candidate set".into()));
        }
        if negatives.is_empty() {
            return Ok(ExampleGrad {
                loss: 0.0,
                grad,
                weight: 0.0,
            });
        }
        let sent = self.forward(TextKind::Sentence, sentence)?;
        let score = |fwd: &BagForward| nn::maxsim_with_argmax(fwd.normed.view(), sent.normed.view());

        let cand: Vec<BagForward> = candidates
            .iter()
            .map(|t| self.forward(TextKind::Event, t))
            .collect::<Result<_>>()?;
        let neg: Vec<BagForward> = negatives
            .iter()
            .map(|t| self.forward(TextKind::Event, t))
            .collect::<Result<_>>()?;
        let cand_scores: Vec<(f64, Vec<usize>)> = cand.iter().map(score).collect();
        let neg_scores: Vec<(f64, Vec<usize>)> = neg.iter().map(score).collect();
        let best = cand_scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
            .map(|(i, _)| i)
            .unwrap_or(0);

        let tau = self.settings.margin;
        let mut loss = 0.0;
        let mut d_best = 0.0;
        let mut d_neg = vec![0.0; neg.len()];
        for (k, (rho, _)) in neg_scores.iter().enumerate() {
            let h = tau - cand_scores[best].0 + rho;
            if h > 0.0 {
                loss += h;
                d_best -= 1.0;
                d_neg[k] = 1.0;
            }
        }
        if loss > 0.0 {
            let mut d_sent = Array2::zeros(sent.normed.raw_dim());
            let push = |fwd: &BagForward, arg: &[usize], g: f64, grad: &mut [f64], d_sent: &mut Array2<f64>| {
                let mut d_e = Array2::zeros(fwd.normed.raw_dim());
                nn::maxsim_backward(
                    fwd.normed.view(),
                    sent.normed.view(),
                    arg,
                    g,
                    d_e.view_mut(),
                    d_sent.view_mut(),
                );
                self.backward(fwd, &d_e, grad);
            };
            push(&cand[best], &cand_scores[best].1, d_best, &mut grad, &mut d_sent);
            for (k, fwd) in neg.iter().enumerate() {
                if d_neg[k] != 0.0 {
                    push(fwd, &neg_scores[k].1, d_neg[k], &mut grad, &mut d_sent);
                }
            }
            self.backward(&sent, &d_sent, &mut grad);
        }
        Ok(ExampleGrad {
            loss,
            grad,
            weight: negatives.len() as f64,
        })
    }

    /// Train on sentences with candidate sets. Returns per-epoch mean pair loss
    /// and the number of sampled negatives that were skipped for being candidates.
    pub fn train(
        &mut self,
        examples: &[RankExample],
        ont: &Ontology,
        sampler: &mut dyn NegativeSampler,
        cfg: &TrainConfig,
    ) -> Result<RankTrainReport> {
        let descriptions: HashMap<&TypeId, Vec<String>> =
            ont.types().map(|t| (&t.type_id, description_tokens(t))).collect();
        for ex in examples {
            if ex.candidates.is_empty() {
                return Err(Error::Argument("ranking example with empty candidate set".into()));
            }
            for c in &ex.candidates {
                if !descriptions.contains_key(c) {
                    return Err(Error::Lookup(c.to_string()));
                }
            }
            self.encoder.prepare(&ex.tokens, self.settings.max_len)?;
        }

        // negatives are drawn up front so the parallel loop stays deterministic
        let mut skipped = 0;
        let mut plan: Vec<Vec<Vec<&TypeId>>> = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let mut epoch = Vec::with_capacity(examples.len());
            for ex in examples {
                let drawn = sampler.sample(&ex.candidates, self.settings.negatives);
                let mut keep = Vec::with_capacity(drawn.len());
                for t in drawn {
                    match descriptions.get_key_value(&t) {
                        Some((key, _)) if !ex.candidates.contains(&t) => keep.push(*key),
                        Some(_) => skipped += 1,
                        None => return Err(Error::Lookup(t.to_string())),
                    }
                }
                epoch.push(keep);
            }
            plan.push(epoch);
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} sampled negatives that were candidates");
        }

        struct Item<'a> {
            sentence: &'a [String],
            candidates: Vec<&'a [String]>,
            negatives: Vec<&'a [String]>,
        }
        let steps = cfg.total_steps(examples.len());
        let curve = nn::train_loop(
            self,
            |epoch| {
                nn::shuffled_batches(examples.len(), cfg.batch_size, cfg.seed, epoch)
                    .into_iter()
                    .map(|b| {
                        b.into_iter()
                            .map(|i| Item {
                                sentence: &examples[i].tokens,
                                candidates: examples[i]
                                    .candidates
                                    .iter()
                                    .map(|c| descriptions[c].as_slice())
                                    .collect(),
                                negatives: plan[epoch][i].iter().map(|c| descriptions[*c].as_slice()).collect(),
                            })
                            .collect()
                    })
                    .collect()
            },
            cfg,
            steps,
            |m: &RankerModel, it: &Item<'_>| {
                m.loss_and_grad(it.sentence, &it.candidates, &it.negatives)
                    .expect("inputs validated before training")
            },
        );
        Ok(RankTrainReport {
            epoch_losses: curve,
            skipped_negatives: skipped,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let enc = self.encoder.config().clone();
        let sidecar = Sidecar {
            backend_kind: enc.kind,
            h: enc.dim,
            version: checkpoint::FORMAT_VERSION,
            stage: STAGE.into(),
            encoder: enc,
            num_params: self.num_params(),
            parameter_hash: self.parameter_hash(),
            model: serde_json::to_value(&self.settings)?,
        };
        checkpoint::save(stem, &sidecar, &self.params())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (sidecar, params) = checkpoint::load(stem, STAGE)?;
        let settings: RankerSettings = serde_json::from_value(sidecar.model)?;
        let mut model = RankerModel::new(Encoder::new(sidecar.encoder)?, settings)?;
        if params.len() != model.num_params() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        model.set_params(&params);
        Ok(model)
    }
}

impl Parameterized for RankerModel {
    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.conv_weight.len() + self.conv_bias.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.conv_weight.iter());
        p.extend(self.conv_bias.iter());
        p
    }

    fn set_params(&mut self, flat: &[f64]) {
        let e = self.encoder.num_params();
        let w = self.conv_weight.len();
        self.encoder.set_params(&flat[..e]);
        self.conv_weight
            .as_slice_mut()
            .expect("contiguous conv weight")
            .copy_from_slice(&flat[e..e + w]);
        self.conv_bias
            .as_slice_mut()
            .expect("contiguous conv bias")
            .copy_from_slice(&flat[e + w..]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankExample {
    pub tokens: Vec<String>,
    pub candidates: Vec<TypeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrainReport {
    pub epoch_losses: Vec<f64>,
    pub skipped_negatives: usize,
}

pub trait NegativeSampler {
    /// Draw up to `k` negative types for a sentence with the given candidates.
    fn sample(&mut self, candidates: &[TypeId], k: usize) -> Vec<TypeId>;
}

/// Uniform draws without replacement from the ontology, excluding candidates.
pub struct UniformNegativeSampler {
    type_ids: Vec<TypeId>,
    rng: ChaCha8Rng,
}

impl UniformNegativeSampler {
    pub fn new(ont: &Ontology, seed: u64) -> Self {
        UniformNegativeSampler {
            type_ids: ont.type_ids().cloned().collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl NegativeSampler for UniformNegativeSampler {
    fn sample(&mut self, candidates: &[TypeId], k: usize) -> Vec<TypeId> {
        let exclude: BTreeSet<&TypeId> = candidates.iter().collect();
        let pool: Vec<&TypeId> = self.type_ids.iter().filter(|t| !exclude.contains(t)).collect();
        pool.choose_multiple(&mut self.rng, k.min(pool.len()))
            .map(|t| (*t).clone())
            .collect()
    }
}

/// Precomputed bags for every ontology type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeIndex {
    type_ids: Vec<TypeId>,
    bags: Vec<EmbeddingBag>,
    h: usize,
    parameter_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexManifest {
    type_ids: Vec<TypeId>,
    rows: Vec<usize>,
    h: usize,
    m: usize,
    parameter_hash: String,
}

impl TypeIndex {
    pub fn build(model: &RankerModel, ont: &Ontology) -> Result<Self> {
        let types: Vec<&EventType> = ont.types().collect();
        let bags: Vec<EmbeddingBag> = types.par_iter().map(|t| model.encode_type(t)).collect::<Result<_>>()?;
        Ok(TypeIndex {
            type_ids: types.iter().map(|t| t.type_id.clone()).collect(),
            bags,
            h: model.encoder.dim(),
            parameter_hash: model.parameter_hash(),
        })
    }

    pub fn len(&self) -> usize {
        self.type_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.type_ids.is_empty()
    }

    pub fn type_ids(&self) -> &[TypeId] {
        &self.type_ids
    }

    pub fn parameter_hash(&self) -> &str {
        &self.parameter_hash
    }

    /// Largest bag size in the index.
    pub fn max_rows(&self) -> usize {
        self.bags.iter().map(EmbeddingBag::num_rows).max().unwrap_or(0)
    }

    /// Check that the index covers exactly the ontology's types.
    pub fn covers(&self, ont: &Ontology) -> bool {
        self.type_ids.iter().eq(ont.type_ids())
    }

    /// Score every indexed type against a sentence bag; descending score,
    /// ties broken by type id.
    pub fn rank_bag(&self, sentence: &EmbeddingBag) -> Result<Vec<RankedType>> {
        let mut out: Vec<RankedType> = self
            .type_ids
            .iter()
            .zip(&self.bags)
            .map(|(t, bag)| {
                Ok(RankedType {
                    type_id: t.clone(),
                    score: maxsim(bag, sentence)?,
                })
            })
            .collect::<Result<_>>()?;
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.type_id.cmp(&b.type_id)));
        Ok(out)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let flat: Vec<f64> = self.bags.iter().flat_map(|b| b.vectors.iter().copied()).collect();
        let manifest = IndexManifest {
            type_ids: self.type_ids.clone(),
            rows: self.bags.iter().map(EmbeddingBag::num_rows).collect(),
            h: self.h,
            m: self.max_rows(),
            parameter_hash: self.parameter_hash.clone(),
        };
        io::write_atomic(&checkpoint::blob_path(stem), &checkpoint::encode_blob(&flat))?;
        io::write_json(&checkpoint::sidecar_path(stem), &manifest)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: IndexManifest = io::read_json(&checkpoint::sidecar_path(stem))?;
        let path = checkpoint::blob_path(stem);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let flat = checkpoint::decode_blob(&bytes)?;
        let expected: usize = manifest.rows.iter().sum::<usize>() * manifest.h;
        if flat.len() != expected || manifest.rows.len() != manifest.type_ids.len() {
            return Err(Error::Checkpoint("index blob does not match manifest".into()));
        }
        let mut bags = Vec::with_capacity(manifest.rows.len());
        let mut offset = 0;
        for &r in &manifest.rows {
            let n = r * manifest.h;
            let m = Array2::from_shape_vec((r, manifest.h), flat[offset..offset + n].to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            bags.push(EmbeddingBag::new(m)?);
            offset += n;
        }
        Ok(TypeIndex {
            type_ids: manifest.type_ids,
            bags,
            h: manifest.h,
            parameter_hash: manifest.parameter_hash,
        })
    }
}

/// Rank all indexed types for one sentence.
pub fn rank_types(model: &RankerModel, index: &TypeIndex, tokens: &[String]) -> Result<Vec<RankedType>> {
    let model_hash = model.parameter_hash();
    if model_hash != index.parameter_hash {
        return Err(Error::StaleIndex {
            index_hash: index.parameter_hash.clone(),
            model_hash,
        });
    }
    index.rank_bag(&model.encode_text(TextKind::Sentence, tokens)?)
}

/// Rank many sentences, checking index consistency once.
pub fn rank_many(model: &RankerModel, index: &TypeIndex, sentences: &[&[String]]) -> Result<Vec<Vec<RankedType>>> {
    let model_hash = model.parameter_hash();
    if model_hash != index.parameter_hash {
        return Err(Error::StaleIndex {
            index_hash: index.parameter_hash.clone(),
            model_hash,
        });
    }
    sentences
        .par_iter()
        .map(|s| index.rank_bag(&model.encode_text(TextKind::Sentence, s)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_bags_score_row_count() {
        let b = EmbeddingBag::normalized(array![[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]].view()).unwrap();
        assert!((maxsim(&b, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_bags_score_zero() {
        let s = EmbeddingBag::new(array![[1.0, 0.0]]).unwrap();
        let e = EmbeddingBag::new(array![[0.0, 1.0]]).unwrap();
        assert_eq!(maxsim(&e, &s).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let s = EmbeddingBag::new(array![[1.0, 0.0]]).unwrap();
        let e = EmbeddingBag::new(array![[0.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(maxsim(&e, &s), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bag_rejects_non_unit_rows() {
        assert!(EmbeddingBag::new(array![[1.0, 1.0]]).is_err());
        assert!(EmbeddingBag::new(Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn margin_loss_hand_values() {
        assert!((margin_loss(0.9, &[0.2], 1.0) - 0.3).abs() < 1e-9);
        assert_eq!(margin_loss(2.5, &[0.2, 1.5], 1.0), 0.0);
    }

    #[test]
    fn encoded_rows_are_unit_norm() {
        let m = RankerModel::new(Encoder::reference(8, 2).unwrap(), RankerSettings::default()).unwrap();
        let bag = m
            .encode_text(TextKind::Sentence, &toks("the treaty payment was wired today"))
            .unwrap();
        for row in bag.view().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
        // CLS + marker + 6 tokens = 8 rows; width 4 stride 2 → 3 windows
        assert_eq!(bag.num_rows(), 3);
        assert!(m.encode_text(TextKind::Sentence, &[]).is_err());
    }

    #[test]
    fn identity_convolution_gives_normalized_rows() {
        let enc = Encoder::reference(6, 4).unwrap();
        let settings = RankerSettings {
            conv_width: 1,
            conv_stride: 1,
            ..Default::default()
        };
        let m = RankerModel::with_conv(enc.clone(), Array2::eye(6), Array1::zeros(6), settings).unwrap();
        let text = toks("a short sentence");
        let bag = m.encode_text(TextKind::Sentence, &text).unwrap();
        let mut with_marker = vec![SENT_MARKER.to_string()];
        with_marker.extend(text);
        let rows = enc.encode(&with_marker, 128).unwrap().vectors;
        let expected = EmbeddingBag::normalized(rows.view()).unwrap();
        assert_eq!(bag.num_rows(), expected.num_rows());
        for (a, b) in bag.view().iter().zip(expected.view().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn markers_distinguish_kinds() {
        let m = RankerModel::new(Encoder::reference(8, 2).unwrap(), RankerSettings::default()).unwrap();
        let t = toks("payment of money");
        assert_ne!(
            m.encode_text(TextKind::Sentence, &t).unwrap(),
            m.encode_text(TextKind::Event, &t).unwrap()
        );
    }

    #[test]
    fn short_text_is_padded_to_one_window() {
        let m = RankerModel::new(Encoder::reference(8, 2).unwrap(), RankerSettings::default()).unwrap();
        // CLS + marker + 1 token = 3 rows < width 4
        assert_eq!(m.encode_text(TextKind::Event, &toks("x")).unwrap().num_rows(), 1);
    }

    #[test]
    fn bag_rows_capped() {
        let settings = RankerSettings {
            max_rows: 2,
            ..Default::default()
        };
        let m = RankerModel::new(Encoder::reference(8, 2).unwrap(), settings).unwrap();
        let long = toks("a b c d e f g h i j k l m n");
        assert_eq!(m.encode_text(TextKind::Sentence, &long).unwrap().num_rows(), 2);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut m = RankerModel::new(
            Encoder::reference(6, 3).unwrap(),
            RankerSettings {
                margin: 5.0,
                ..Default::default()
            },
        )
        .unwrap();
        // perturb the convolution so windows are not plain averages
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = m
            .params()
            .iter()
            .map(|v| v + 0.05 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        m.set_params(&p);
        let sent = toks("the bank wired the treaty funds yesterday");
        let c1 = toks("payment a transfer of money");
        let c2 = toks("trade an exchange of goods");
        let n1 = toks("attack a violent assault");
        let n2 = toks("election a vote for office");
        let cands = [c1.as_slice(), c2.as_slice()];
        let negs = [n1.as_slice(), n2.as_slice()];
        let g = m.loss_and_grad(&sent, &cands, &negs).unwrap();
        assert!(g.loss > 0.0);
        let coords: Vec<usize> = (0..m.num_params()).step_by(7).collect();
        let err = nn::gradient_check(&mut m, &g.grad, &coords, 1e-6, 1e-6, |m| {
            m.loss_and_grad(&sent, &cands, &negs).unwrap().loss
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn index_matches_joint_scoring_and_detects_staleness() {
        let ty = |id: &str, name: &str, def: &str| EventType {
            type_id: id.into(),
            name: name.into(),
            definition: def.into(),
            parent_id: None,
        };
        let ont = Ontology::new(
            vec![
                ty("Q1", "payment", "transfer of money"),
                ty("Q2", "attack", "violent assault on a target"),
                ty("Q3", "election", "vote to choose an official"),
            ],
            vec![],
        )
        .unwrap();
        let mut m = RankerModel::new(Encoder::reference(8, 5).unwrap(), RankerSettings::default()).unwrap();
        let index = TypeIndex::build(&m, &ont).unwrap();
        let sent = toks("the money was paid by wire");
        let ranked = rank_types(&m, &index, &sent).unwrap();
        let s_bag = m.encode_text(TextKind::Sentence, &sent).unwrap();
        for r in &ranked {
            let joint = maxsim(
                &m.encode_type(ont.get_type(r.type_id.as_str()).unwrap()).unwrap(),
                &s_bag,
            )
            .unwrap();
            assert!((joint - r.score).abs() < 1e-5);
        }
        assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("index");
        index.save(&stem).unwrap();
        assert_eq!(TypeIndex::load(&stem).unwrap(), index);

        let mut p = m.params();
        p[0] += 1e-3;
        m.set_params(&p);
        assert!(matches!(rank_types(&m, &index, &sent), Err(Error::StaleIndex { .. })));
    }

    #[test]
    fn training_reduces_loss_and_round_trips() {
        let ty = |id: &str, name: &str, def: &str| EventType {
            type_id: id.into(),
            name: name.into(),
            definition: def.into(),
            parent_id: None,
        };
        let ont = Ontology::new(
            vec![
                ty("Q1", "payment", "paid money funds"),
                ty("Q2", "attack", "troops assault soldiers"),
                ty("Q3", "election", "vote ballot candidate"),
                ty("Q4", "marriage", "wedding bride groom"),
            ],
            vec![],
        )
        .unwrap();
        let ex = |s: &str, t: &str| RankExample {
            tokens: toks(s),
            candidates: vec![t.into()],
        };
        let examples = vec![
            ex("the bank paid the funds", "Q1"),
            ex("troops began the assault", "Q2"),
            ex("the ballot count favoured the candidate", "Q3"),
            ex("the bride met the groom", "Q4"),
        ];
        let mut m = RankerModel::new(
            Encoder::reference(8, 1).unwrap(),
            RankerSettings {
                negatives: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            warmup_steps: 2,
            max_len: 128,
            seed: 3,
        };
        let mut sampler = UniformNegativeSampler::new(&ont, 4);
        let report = m.train(&examples, &ont, &mut sampler, &cfg).unwrap();
        assert!(report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap());
        assert_eq!(report.skipped_negatives, 0);

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ranker");
        m.save(&stem).unwrap();
        let back = RankerModel::load(&stem).unwrap();
        assert_eq!(back.parameter_hash(), m.parameter_hash());
    }

    #[test]
    fn sampler_excludes_candidates() {
        let ty = |id: &str| EventType {
            type_id: id.into(),
            name: id.into(),
            definition: "d".into(),
            parent_id: None,
        };
        let ont = Ontology::new(vec![ty("A"), ty("B"), ty("C"), ty("D")], vec![]).unwrap();
        let mut s = UniformNegativeSampler::new(&ont, 1);
        for _ in 0..20 {
            let got = s.sample(&["A".into(), "B".into()], 5);
            assert_eq!(got.len(), 2);
            assert!(got.iter().all(|t| t.as_str() == "C" || t.as_str() == "D"));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_bag(rows: usize, h: usize) -> impl Strategy<Value = EmbeddingBag> {
            proptest::collection::vec(-1.0f64..1.0, rows * h).prop_filter_map("zero row", move |v| {
                let m = Array2::from_shape_vec((rows, h), v).unwrap();
                EmbeddingBag::normalized(m.view()).ok()
            })
        }

        fn arb_pair() -> impl Strategy<Value = (EmbeddingBag, EmbeddingBag, Vec<usize>, Vec<usize>)> {
            (1usize..6, 1usize..6, 2usize..8).prop_flat_map(|(me, ms, h)| {
                (
                    arb_bag(me, h),
                    arb_bag(ms, h),
                    Just((0..me).collect::<Vec<_>>()).prop_shuffle(),
                    Just((0..ms).collect::<Vec<_>>()).prop_shuffle(),
                )
            })
        }

        proptest! {
            #[test]
            fn maxsim_permutation_invariant_and_bounded((e, s, pe, ps) in arb_pair()) {
                let base = maxsim(&e, &s).unwrap();
                let e2 = EmbeddingBag::new(e.view().select(ndarray::Axis(0), &pe)).unwrap();
                let s2 = EmbeddingBag::new(s.view().select(ndarray::Axis(0), &ps)).unwrap();
                prop_assert!((maxsim(&e2, &s2).unwrap() - base).abs() < 1e-9);
                let m = s.num_rows() as f64;
                prop_assert!(base.abs() <= m + 1e-9);
                prop_assert!((maxsim(&s, &s).unwrap() - m).abs() < 1e-9);
            }
        }
    }
}
