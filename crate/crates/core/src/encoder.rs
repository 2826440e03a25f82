//! Text encoding shared by all three stages.
//!
//! [`EncoderBackend`] is the capability contract: turn a token sequence into
//! one row per input token (plus a leading classification row), and score
//! candidate words for a single mask slot. [`Encoder`] implements it with a
//! fixed per-piece base vector followed by a trainable linear projection.
//! Base vectors come either from a seeded hash of the piece (the reference
//! backend) or from a pretrained word-vector table.
//!
//! Words are split into pieces of at most `piece_chars` characters; a word's
//! row is computed from its first piece, while every piece counts against the
//! sequence length budget.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, Parameterized};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SENT_MARKER: &str = "[SENT]";
pub const EVENT_MARKER: &str = "[EVENT]";

/// Words the mask head can score.
pub const YES: &str = "yes";
pub const NO: &str = "no";

/// Tokens that split a prompt into segments for the mask head.
const DELIMITERS: [&str; 2] = [".", "?"];

pub fn is_special(tok: &str) -> bool {
    tok.len() > 2 && tok.starts_with('[') && tok.ends_with(']')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Seeded hash of each piece.
    Reference,
    /// Pretrained word vectors read from a text table.
    Table,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Reference => "reference",
            BackendKind::Table => "table",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: BackendKind,
    /// Output width `h`.
    pub dim: usize,
    /// Width of the fixed base vectors.
    pub base_dim: usize,
    pub seed: u64,
    pub piece_chars: usize,
    /// Word-vector file for [`BackendKind::Table`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: BackendKind::Reference,
            dim: 32,
            base_dim: 128,
            seed: 17,
            piece_chars: 8,
            table_path: None,
        }
    }
}

/// Row 0 is the classification token; row `i + 1` belongs to input token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix {
    pub vectors: Array2<f64>,
    /// Input tokens dropped to respect the length budget.
    pub truncated_tokens: usize,
}

impl TokenEmbeddingMatrix {
    pub fn num_tokens(&self) -> usize {
        self.vectors.nrows() - 1
    }
}

pub trait EncoderBackend {
    fn kind(&self) -> BackendKind;
    fn dim(&self) -> usize;
    fn trainable(&self) -> bool;
    fn encode(&self, tokens: &[String], max_len: usize) -> Result<TokenEmbeddingMatrix>;
    /// Scores for each of `words` at the single `[MASK]` position of `tokens`.
    fn mask_fill_logits(&self, tokens: &[String], words: &[&str], max_len: usize) -> Result<Vec<f64>>;
}

/// Anything that reports how many length-budget units a token consumes.
pub trait TokenCounter {
    fn token_len(&self, tok: &str) -> usize;
}

/// One unit per token.
pub struct WordCounter;

impl TokenCounter for WordCounter {
    fn token_len(&self, _tok: &str) -> usize {
        1
    }
}

#[derive(Debug, Clone)]
enum BaseVectors {
    Hashed,
    Table(Arc<HashMap<String, Vec<f64>>>),
}

/// Encoder input after piece splitting: fixed base rows ready for projection.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Tokens kept after truncation, without the classification token.
    pub tokens: Vec<String>,
    /// `(tokens.len() + 1) × base_dim`.
    pub base: Array2<f64>,
    pub truncated: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    base: BaseVectors,
    /// `h × base_dim` projection.
    weight: Array2<f64>,
    /// `[yes, no] × [f_qd, f_dq]`.
    head_weight: Array2<f64>,
    head_bias: [f64; 2],
    trainable: bool,
}

impl Encoder {
    /// Deterministic hashed-vocabulary encoder of output width `dim`.
    pub fn reference(dim: usize, seed: u64) -> Result<Self> {
        Self::new(EncoderConfig {
            dim,
            seed,
            ..EncoderConfig::default()
        })
    }

    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.dim < 4 {
            return Err(Error::Argument(format!("encoder width {} < 4", cfg.dim)));
        }
        if cfg.base_dim == 0 || cfg.piece_chars == 0 {
            return Err(Error::Argument("base_dim and piece_chars must be positive".into()));
        }
        let base = match cfg.kind {
            BackendKind::Reference => BaseVectors::Hashed,
            BackendKind::Table => {
                let path = cfg
                    .table_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("table backend needs table_path".into()))?;
                BaseVectors::Table(Arc::new(load_table(path, cfg.base_dim)?))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0FE1_C0DE);
        let scale = 1.0 / (cfg.dim as f64).sqrt();
        let weight = Array2::from_shape_fn((cfg.dim, cfg.base_dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        let head_weight = ndarray::array![[1.0, 1.0], [0.0, 0.0]];
        Ok(Encoder {
            cfg,
            base,
            weight,
            head_weight,
            head_bias: [0.0, 0.0],
            trainable: true,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Split a word into pieces; special tokens stay whole.
    pub fn pieces(&self, tok: &str) -> Vec<String> {
        if is_special(tok) {
            return vec![tok.to_string()];
        }
        let chars: Vec<char> = tok.to_lowercase().chars().collect();
        if chars.is_empty() {
            return vec![String::new()];
        }
        chars
            .chunks(self.cfg.piece_chars)
            .enumerate()
            .map(|(i, c)| {
                let s: String = c.iter().collect();
                if i == 0 {
                    s
                } else {
                    format!("##{s}")
                }
            })
            .collect()
    }

    /// Fixed base vector of a piece.
    pub fn base_vector(&self, piece: &str) -> Vec<f64> {
        if let BaseVectors::Table(table) = &self.base {
            if let Some(v) = table.get(piece) {
                return v.clone();
            }
        }
        hashed_vector(self.cfg.seed, piece, self.cfg.base_dim)
    }

    /// Split, truncate to `max_len` (counting the classification and
    /// separator tokens) and look up base vectors.
    pub fn prepare(&self, tokens: &[String], max_len: usize) -> Result<Prepared> {
        if tokens.is_empty() {
            return Err(Error::Argument("cannot encode an empty token sequence".into()));
        }
        let budget = max_len.saturating_sub(2);
        let mut used = 0;
        let mut kept = Vec::with_capacity(tokens.len());
        let mut firsts = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let pieces = self.pieces(tok);
            if used + pieces.len() > budget {
                break;
            }
            used += pieces.len();
            kept.push(tok.clone());
            firsts.push(pieces.into_iter().next().unwrap_or_default());
        }
        if kept.is_empty() {
            return Err(Error::Argument(format!(
                "max_len {max_len} leaves no room for the first token"
            )));
        }
        let truncated = tokens.len() - kept.len();
        if truncated > 0 {
            log::warn!(
                "encoder input truncated: dropped {truncated} of {} tokens",
                tokens.len()
            );
        }
        let d = self.cfg.base_dim;
        let mut base = Array2::zeros((kept.len() + 1, d));
        base.row_mut(0).assign(&ndarray::Array1::from(self.base_vector(CLS)));
        for (i, piece) in firsts.iter().enumerate() {
            base.row_mut(i + 1)
                .assign(&ndarray::Array1::from(self.base_vector(piece)));
        }
        Ok(Prepared {
            tokens: kept,
            base,
            truncated,
        })
    }

    /// Project base rows: `rows = base · Wᵀ`.
    pub fn forward(&self, p: &Prepared) -> Array2<f64> {
        p.base.dot(&self.weight.t())
    }

    /// `grad_w += d_rowsᵀ · base`.
    pub fn backward(&self, p: &Prepared, d_rows: &Array2<f64>, mut grad_w: ArrayViewMut2<'_, f64>) {
        if self.trainable {
            grad_w += &d_rows.t().dot(&p.base);
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight.len()
    }

    /// Forward pass of the two-way mask head.
    pub fn mask_forward(&self, p: &Prepared) -> Result<MaskForward> {
        let masks = p.tokens.iter().filter(|t| *t == MASK).count();
        if masks != 1 {
            return Err(Error::Argument(format!(
                "mask head needs exactly one {MASK}, found {masks}"
            )));
        }
        let rows = self.forward(p);
        let (normed, norms) = nn::normalize_rows(rows.view());

        let mut query = Vec::new();
        let mut doc = Vec::new();
        let mut segment = 0;
        for (i, tok) in p.tokens.iter().enumerate() {
            if DELIMITERS.contains(&tok.as_str()) {
                segment += 1;
            } else if !is_special(tok) {
                if segment == 0 {
                    query.push(i + 1);
                } else {
                    doc.push(i + 1);
                }
            }
        }

        let (mut f_qd, mut f_dq) = (0.0, 0.0);
        let (mut arg_qd, mut arg_dq) = (Vec::new(), Vec::new());
        if !query.is_empty() && !doc.is_empty() {
            let q = normed.select(Axis(0), &query);
            let d = normed.select(Axis(0), &doc);
            let (s1, a1) = nn::maxsim_with_argmax(q.view(), d.view());
            let (s2, a2) = nn::maxsim_with_argmax(d.view(), q.view());
            f_qd = s1 / query.len() as f64;
            f_dq = s2 / doc.len() as f64;
            arg_qd = a1;
            arg_dq = a2;
        }
        let features = [f_qd, f_dq];
        let logits = [0, 1].map(|w| {
            self.head_bias[w] + self.head_weight[[w, 0]] * features[0] + self.head_weight[[w, 1]] * features[1]
        });
        Ok(MaskForward {
            normed,
            norms,
            query,
            doc,
            arg_qd,
            arg_dq,
            features,
            logits,
        })
    }

    /// Backward of the mask head given `d loss / d [logit_yes, logit_no]`.
    /// Writes into the flat encoder gradient `grad` (layout of [`Parameterized::params`]).
    pub fn mask_backward(&self, p: &Prepared, fwd: &MaskForward, d_logits: [f64; 2], grad: &mut [f64]) {
        let wl = self.weight_len();
        let mut df = [0.0; 2];
        for w in 0..2 {
            for k in 0..2 {
                grad[wl + w * 2 + k] += d_logits[w] * fwd.features[k];
                df[k] += d_logits[w] * self.head_weight[[w, k]];
            }
            grad[wl + 4 + w] += d_logits[w];
        }
        if fwd.query.is_empty() || fwd.doc.is_empty() || !self.trainable {
            return;
        }
        let q = fwd.normed.select(Axis(0), &fwd.query);
        let d = fwd.normed.select(Axis(0), &fwd.doc);
        let mut dq = Array2::zeros(q.raw_dim());
        let mut dd = Array2::zeros(d.raw_dim());
        nn::maxsim_backward(
            q.view(),
            d.view(),
            &fwd.arg_qd,
            df[0] / fwd.query.len() as f64,
            dq.view_mut(),
            dd.view_mut(),
        );
        nn::maxsim_backward(
            d.view(),
            q.view(),
            &fwd.arg_dq,
            df[1] / fwd.doc.len() as f64,
            dd.view_mut(),
            dq.view_mut(),
        );

        let mut d_normed = Array2::zeros(fwd.normed.raw_dim());
        for (k, &r) in fwd.query.iter().enumerate() {
            d_normed.row_mut(r).assign(&dq.row(k));
        }
        for (k, &r) in fwd.doc.iter().enumerate() {
            d_normed.row_mut(r).assign(&dd.row(k));
        }
        let d_rows = nn::normalize_rows_backward(fwd.normed.view(), &fwd.norms, d_normed.view());
        let grad_w =
            ndarray::ArrayViewMut2::from_shape(self.weight.raw_dim(), &mut grad[..wl]).expect("weight gradient shape");
        self.backward(p, &d_rows, grad_w);
    }
}

/// Cached intermediate values of the mask head.
#[derive(Debug, Clone)]
pub struct MaskForward {
    normed: Array2<f64>,
    norms: Vec<f64>,
    query: Vec<usize>,
    doc: Vec<usize>,
    arg_qd: Vec<usize>,
    arg_dq: Vec<usize>,
    pub features: [f64; 2],
    /// `[yes, no]`.
    pub logits: [f64; 2],
}

impl Parameterized for Encoder {
    fn num_params(&self) -> usize {
        self.weight.len() + 6
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.weight.iter());
        out.extend(self.head_weight.iter());
        out.extend(self.head_bias);
        out
    }

    fn set_params(&mut self, flat: &[f64]) {
        let wl = self.weight.len();
        self.weight
            .as_slice_mut()
            .expect("contiguous weight")
            .copy_from_slice(&flat[..wl]);
        self.head_weight
            .as_slice_mut()
            .expect("contiguous head")
            .copy_from_slice(&flat[wl..wl + 4]);
        self.head_bias.copy_from_slice(&flat[wl + 4..wl + 6]);
    }
}

impl TokenCounter for Encoder {
    fn token_len(&self, tok: &str) -> usize {
        self.pieces(tok).len()
    }
}

impl EncoderBackend for Encoder {
    fn kind(&self) -> BackendKind {
        self.cfg.kind
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn trainable(&self) -> bool {
        self.trainable
    }

    fn encode(&self, tokens: &[String], max_len: usize) -> Result<TokenEmbeddingMatrix> {
        let p = self.prepare(tokens, max_len)?;
        Ok(TokenEmbeddingMatrix {
            vectors: self.forward(&p),
            truncated_tokens: p.truncated,
        })
    }

    fn mask_fill_logits(&self, tokens: &[String], words: &[&str], max_len: usize) -> Result<Vec<f64>> {
        let p = self.prepare(tokens, max_len)?;
        let fwd = self.mask_forward(&p)?;
        words
            .iter()
            .map(|w| match *w {
                YES => Ok(fwd.logits[0]),
                NO => Ok(fwd.logits[1]),
                other => Err(Error::Argument(format!("mask head cannot score `{other}`"))),
            })
            .collect()
    }
}

/// Encode a sentence: `n` tokens give `n + 1` rows.
pub fn encode_sentence(
    backend: &dyn EncoderBackend,
    tokens: &[String],
    max_len: usize,
) -> Result<TokenEmbeddingMatrix> {
    backend.encode(tokens, max_len)
}

pub fn reference_encoder(dim: usize, seed: u64) -> Result<Encoder> {
    Encoder::reference(dim, seed)
}

fn hashed_vector(seed: u64, piece: &str, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(piece.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Read `word v1 … vd` lines. Vectors of the wrong width are rejected.
fn load_table(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        if values.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: values.len(),
            });
        }
        table.insert(word.to_lowercase(), values);
    }
    Ok(table)
}

/// Slice helper: a row block of a flat gradient viewed as a matrix.
pub(crate) fn matrix_view_mut(flat: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut flat[..rows * cols]).expect("gradient block shape")
}
