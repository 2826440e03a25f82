//! Stage 1: span-level trigger identification.
//!
//! Every span `[i, j]` of at most `max_span_len` tokens gets the logit
//! `w_start·s_i + w_end·s_j + Σ_{k=i..j} w_part·s_k` over encoder rows `s`,
//! trained with binary cross-entropy against all enumerated spans.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar};
use crate::corpus::{Corpus, Span};
use crate::encoder::{Encoder, EncoderBackend};
use crate::error::{Error, Result};
use crate::nn::{self, ExampleGrad, Parameterized, TrainConfig};

pub const STAGE: &str = "trigger";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub span: Span,
    pub logit: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerSettings {
    pub max_span_len: usize,
    pub max_len: usize,
}

impl Default for TriggerSettings {
    fn default() -> Self {
        TriggerSettings {
            max_span_len: 10,
            max_len: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// Highest probability first; drop anything overlapping a kept span.
    #[default]
    Greedy,
    /// Keep every span above threshold.
    KeepAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerExample {
    pub tokens: Vec<String>,
    pub gold: Vec<Span>,
}

impl TriggerExample {
    /// One example per sentence, gold spans taken from its mentions.
    pub fn from_corpus(corpus: &Corpus) -> Vec<TriggerExample> {
        corpus
            .sentences
            .iter()
            .map(|s| TriggerExample {
                tokens: s.tokens.clone(),
                gold: s.mentions.iter().map(|m| m.span()).collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TriggerModel {
    encoder: Encoder,
    w_start: Array1<f64>,
    w_end: Array1<f64>,
    w_part: Array1<f64>,
    settings: TriggerSettings,
}

/// Enumerate spans in (start, length) order.
pub fn enumerate_spans(n: usize, max_span_len: usize) -> impl Iterator<Item = Span> {
    (0..n).flat_map(move |i| (i..n.min(i + max_span_len)).map(move |j| Span::new(i, j)))
}

/// Span logits for precomputed encoder rows (row 0 = classification token).
pub fn span_scores_from_rows(
    rows: ArrayView2<'_, f64>,
    w_start: &Array1<f64>,
    w_end: &Array1<f64>,
    w_part: &Array1<f64>,
    max_span_len: usize,
) -> Vec<SpanScore> {
    let tokens = rows.slice(ndarray::s![1.., ..]);
    let fs = tokens.dot(w_start);
    let fe = tokens.dot(w_end);
    let fp = tokens.dot(w_part);
    let mut prefix = vec![0.0; fp.len() + 1];
    for (k, v) in fp.iter().enumerate() {
        prefix[k + 1] = prefix[k] + v;
    }
    enumerate_spans(tokens.nrows(), max_span_len)
        .map(|span| {
            let logit = fs[span.start] + fe[span.end] + prefix[span.end + 1] - prefix[span.start];
            SpanScore {
                span,
                logit,
                probability: nn::sigmoid(logit),
            }
        })
        .collect()
}

impl TriggerModel {
    /// Fresh model with zero span weights.
    pub fn new(encoder: Encoder, settings: TriggerSettings) -> Self {
        let h = encoder.dim();
        TriggerModel {
            encoder,
            w_start: Array1::zeros(h),
            w_end: Array1::zeros(h),
            w_part: Array1::zeros(h),
            settings,
        }
    }

    pub fn with_weights(
        encoder: Encoder,
        w_start: Array1<f64>,
        w_end: Array1<f64>,
        w_part: Array1<f64>,
        settings: TriggerSettings,
    ) -> Result<Self> {
        let h = encoder.dim();
        for w in [&w_start, &w_end, &w_part] {
            if w.len() != h {
                return Err(Error::Dimension {
                    expected: h,
                    found: w.len(),
                });
            }
        }
        Ok(TriggerModel {
            encoder,
            w_start,
            w_end,
            w_part,
            settings,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn settings(&self) -> &TriggerSettings {
        &self.settings
    }

    /// Longest span scored at inference. Does not change the parameters.
    pub fn set_max_span_len(&mut self, max_span_len: usize) {
        self.settings.max_span_len = max_span_len;
    }

    pub fn score_spans(&self, tokens: &[String]) -> Result<Vec<SpanScore>> {
        let m = self.encoder.encode(tokens, self.settings.max_len)?;
        Ok(span_scores_from_rows(
            m.vectors.view(),
            &self.w_start,
            &self.w_end,
            &self.w_part,
            self.settings.max_span_len,
        ))
    }

    /// Summed BCE over all spans of one sentence with its gradient.
    pub fn loss_and_grad(&self, ex: &TriggerExample) -> Result<ExampleGrad> {
        let prepared = self.encoder.prepare(&ex.tokens, self.settings.max_len)?;
        let rows = self.encoder.forward(&prepared);
        let scores = span_scores_from_rows(
            rows.view(),
            &self.w_start,
            &self.w_end,
            &self.w_part,
            self.settings.max_span_len,
        );
        let gold: HashSet<Span> = ex.gold.iter().copied().collect();
        let n = rows.nrows() - 1;
        let mut d_start = vec![0.0; n];
        let mut d_end = vec![0.0; n];
        let mut d_part_diff = vec![0.0; n + 1];
        let mut loss = 0.0;
        for sc in &scores {
            let y = if gold.contains(&sc.span) { 1.0 } else { 0.0 };
            loss += nn::bce_with_logits(sc.logit, y);
            let g = sc.probability - y;
            d_start[sc.span.start] += g;
            d_end[sc.span.end] += g;
            d_part_diff[sc.span.start] += g;
            d_part_diff[sc.span.end + 1] -= g;
        }
        let mut d_part = vec![0.0; n];
        let mut acc = 0.0;
        for k in 0..n {
            acc += d_part_diff[k];
            d_part[k] = acc;
        }

        let h = self.encoder.dim();
        let mut d_rows = Array2::zeros(rows.raw_dim());
        let enc_len = self.encoder.num_params();
        let mut grad = vec![0.0; self.num_params()];
        {
            let (_, tail) = grad.split_at_mut(enc_len);
            let (gs, rest) = tail.split_at_mut(h);
            let (ge, gp) = rest.split_at_mut(h);
            for k in 0..n {
                let row = rows.row(k + 1);
                let mut dr = d_rows.row_mut(k + 1);
                dr.scaled_add(d_start[k], &self.w_start);
                dr.scaled_add(d_end[k], &self.w_end);
                dr.scaled_add(d_part[k], &self.w_part);
                for c in 0..h {
                    gs[c] += d_start[k] * row[c];
                    ge[c] += d_end[k] * row[c];
                    gp[c] += d_part[k] * row[c];
                }
            }
        }
        let wl = self.encoder.weight_len();
        self.encoder.backward(
            &prepared,
            &d_rows,
            crate::encoder::matrix_view_mut(&mut grad[..wl], h, wl / h),
        );
        Ok(ExampleGrad {
            loss,
            grad,
            weight: scores.len() as f64,
        })
    }

    /// Mean per-span loss over `examples`.
    pub fn mean_loss(&self, examples: &[TriggerExample]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0.0;
        for ex in examples {
            let g = self.loss_and_grad(ex)?;
            total += g.loss;
            count += g.weight;
        }
        Ok(if count > 0.0 { total / count } else { 0.0 })
    }

    /// Minibatch training. Returns the per-epoch mean span loss.
    pub fn train(&mut self, examples: &[TriggerExample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        if examples.iter().all(|e| e.gold.is_empty()) {
            log::warn!("trigger training data has no positive spans; training is degenerate");
        }
        let too_long = examples
            .iter()
            .flat_map(|e| &e.gold)
            .filter(|s| s.len() > self.settings.max_span_len)
            .count();
        if too_long > 0 {
            log::warn!("{too_long} gold spans exceed max_span_len and cannot be learned");
        }
        for ex in examples {
            // surface encoding errors before the parallel loop
            self.encoder.prepare(&ex.tokens, self.settings.max_len)?;
        }
        let steps = cfg.total_steps(examples.len());
        let curve = nn::train_loop(
            self,
            |epoch| {
                nn::shuffled_batches(examples.len(), cfg.batch_size, cfg.seed, epoch)
                    .into_iter()
                    .map(|b| b.into_iter().map(|i| &examples[i]).collect())
                    .collect()
            },
            cfg,
            steps,
            |m: &TriggerModel, ex: &&TriggerExample| m.loss_and_grad(ex).expect("inputs validated before training"),
        );
        Ok(curve)
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
        let settings: TriggerSettings = serde_json::from_value(sidecar.model)?;
        let mut model = TriggerModel::new(Encoder::new(sidecar.encoder)?, settings);
        if params.len() != model.num_params() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        model.set_params(&params);
        Ok(model)
    }
}

impl Parameterized for TriggerModel {
    fn num_params(&self) -> usize {
        self.encoder.num_params() + 3 * self.encoder.dim()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.w_start.iter());
        p.extend(self.w_end.iter());
        p.extend(self.w_part.iter());
        p
    }

    fn set_params(&mut self, flat: &[f64]) {
        let e = self.encoder.num_params();
        let h = self.encoder.dim();
        self.encoder.set_params(&flat[..e]);
        self.w_start.assign(&Array1::from(flat[e..e + h].to_vec()));
        self.w_end.assign(&Array1::from(flat[e + h..e + 2 * h].to_vec()));
        self.w_part.assign(&Array1::from(flat[e + 2 * h..e + 3 * h].to_vec()));
    }
}

/// Keep spans with probability ≥ `threshold` and resolve overlaps.
/// Greedy order: probability descending, then earlier start, then shorter.
pub fn decode_triggers(scores: &[SpanScore], threshold: f64, policy: OverlapPolicy) -> Vec<SpanScore> {
    let mut above: Vec<SpanScore> = scores.iter().filter(|s| s.probability >= threshold).copied().collect();
    above.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.span.start.cmp(&b.span.start))
            .then(a.span.len().cmp(&b.span.len()))
    });
    let mut kept: Vec<SpanScore> = Vec::new();
    match policy {
        OverlapPolicy::KeepAll => kept = above,
        OverlapPolicy::Greedy => {
            for s in above {
                if kept.iter().all(|k| !k.span.overlaps(&s.span)) {
                    kept.push(s);
                }
            }
        }
    }
    kept.sort_by_key(|s| s.span);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn score(start: usize, end: usize, p: f64) -> SpanScore {
        SpanScore {
            span: Span::new(start, end),
            logit: (p / (1.0 - p)).ln(),
            probability: p,
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let m = TriggerModel::new(Encoder::reference(8, 0).unwrap(), TriggerSettings::default());
        let toks: Vec<String> = "a b c d".split(' ').map(String::from).collect();
        let scores = m.score_spans(&toks).unwrap();
        assert_eq!(scores.len(), 10);
        assert!(scores.iter().all(|s| s.probability == 0.5));
    }

    #[test]
    fn span_count_formula() {
        for (n, max) in [(3, 10), (12, 10), (15, 4), (1, 1)] {
            let expected: usize = (1..=max.min(n)).map(|l| n - l + 1).sum();
            assert_eq!(enumerate_spans(n, max).count(), expected);
        }
    }

    #[test]
    fn hand_evaluated_logits() {
        // CLS row + three tokens, h = 2
        let rows = array![[9.0, 9.0], [1.0, 0.0], [0.0, 2.0], [1.0, -1.0]];
        let ws = array![1.0, 0.5];
        let we = array![-1.0, 2.0];
        let wp = array![0.25, 0.25];
        let out = span_scores_from_rows(rows.view(), &ws, &we, &wp, 10);
        // token scores: start = [1, 1, 0.5]; end = [-1, 4, -3]; part = [0.25, 0.5, 0]
        let expected = [
            ((0, 0), 1.0 - 1.0 + 0.25),
            ((0, 1), 1.0 + 4.0 + 0.75),
            ((0, 2), 1.0 - 3.0 + 0.75),
            ((1, 1), 1.0 + 4.0 + 0.5),
            ((1, 2), 1.0 - 3.0 + 0.5),
            ((2, 2), 0.5 - 3.0 + 0.0),
        ];
        assert_eq!(out.len(), 6);
        for ((s, e), v) in expected {
            let got = out.iter().find(|x| x.span == Span::new(s, e)).unwrap();
            assert!((got.logit - v).abs() < 1e-12);
            assert!((got.probability - nn::sigmoid(v)).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_decode() {
        let scores = [score(1, 1, 0.9), score(1, 2, 0.8), score(4, 4, 0.7)];
        let out = decode_triggers(&scores, 0.5, OverlapPolicy::Greedy);
        let spans: Vec<Span> = out.iter().map(|s| s.span).collect();
        assert_eq!(spans, vec![Span::new(1, 1), Span::new(4, 4)]);
        assert!(decode_triggers(&scores, 0.95, OverlapPolicy::Greedy).is_empty());
        assert_eq!(decode_triggers(&scores, 0.5, OverlapPolicy::KeepAll).len(), 3);
    }

    #[test]
    fn tie_prefers_shorter() {
        let scores = [score(2, 3, 0.6), score(2, 2, 0.6)];
        let out = decode_triggers(&scores, 0.5, OverlapPolicy::Greedy);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].span, Span::new(2, 2));
    }

    #[test]
    fn weight_dimension_checked() {
        let enc = Encoder::reference(8, 0).unwrap();
        let bad = TriggerModel::with_weights(
            enc,
            Array1::zeros(8),
            Array1::zeros(7),
            Array1::zeros(8),
            TriggerSettings::default(),
        );
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn one_step_decreases_loss() {
        let mut m = TriggerModel::new(Encoder::reference(8, 3).unwrap(), TriggerSettings::default());
        let ex = TriggerExample {
            tokens: "the boom shook the town".split(' ').map(String::from).collect(),
            gold: vec![Span::new(1, 1)],
        };
        let g = m.loss_and_grad(&ex).unwrap();
        let before = g.loss;
        let p: Vec<f64> = m.params().iter().zip(&g.grad).map(|(p, g)| p - 1e-3 * g).collect();
        m.set_params(&p);
        assert!(m.loss_and_grad(&ex).unwrap().loss < before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = TriggerModel::new(Encoder::reference(6, 3).unwrap(), TriggerSettings::default());
        let p: Vec<f64> = (0..m.num_params()).map(|i| (i as f64).sin()).collect();
        m.set_params(&p);
        let stem = dir.path().join("ti");
        m.save(&stem).unwrap();
        let back = TriggerModel::load(&stem).unwrap();
        assert_eq!(back.params(), p);
        assert_eq!(back.parameter_hash(), m.parameter_hash());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_scores() -> impl Strategy<Value = Vec<SpanScore>> {
            proptest::collection::vec((0usize..10, 0usize..3, 0.0f64..1.0), 0..20).prop_map(|v| {
                v.into_iter()
                    .map(|(start, len, p)| SpanScore {
                        span: Span::new(start, start + len),
                        logit: (p / (1.0 - p)).ln(),
                        probability: p,
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn raising_threshold_only_drops_spans(scores in arb_scores(), t1 in 0.0f64..1.0, dt in 0.0f64..0.5) {
                let t2 = t1 + dt;
                for policy in [OverlapPolicy::Greedy, OverlapPolicy::KeepAll] {
                    let low = decode_triggers(&scores, t1, policy);
                    let high = decode_triggers(&scores, t2, policy);
                    let expected: Vec<SpanScore> = low.iter().filter(|s| s.probability >= t2).copied().collect();
                    prop_assert_eq!(high, expected);
                }
                let greedy = decode_triggers(&scores, t1, OverlapPolicy::Greedy);
                for (i, a) in greedy.iter().enumerate() {
                    prop_assert!(a.probability >= t1);
                    for b in &greedy[i + 1..] {
                        prop_assert!(!a.span.overlaps(&b.span));
                    }
                }
            }
        }
    }
}
