//! Small dense-math kernels with hand-written backward passes, plus the
//! AdamW optimizer and the linear warmup schedule used by every stage.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, computed without overflow.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    // -[y log σ(z) + (1-y) log(1-σ(z))] = max(z,0) - z y + ln(1 + e^{-|z|})
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
pub fn normalize_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row /= n;
        norms.push(n);
    }
    (out, norms)
}

/// Backward of [`normalize_rows`]: `dx = (dh - h (h·dh)) / |x|`.
pub fn normalize_rows_backward(h: ArrayView2<'_, f64>, norms: &[f64], dh: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dx = dh.to_owned();
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let hi = h.row(i);
        let proj = hi.dot(&dh.row(i));
        row.scaled_add(-proj, &hi);
        row /= norms[i];
    }
    dx
}

/// Late-interaction score: for every row of `summed`, the best dot product
/// against any row of `maxed`, summed. Returns the score and, per summed row,
/// the index of its best match.
pub fn maxsim_with_argmax(maxed: ArrayView2<'_, f64>, summed: ArrayView2<'_, f64>) -> (f64, Vec<usize>) {
    let sims = summed.dot(&maxed.t());
    let mut total = 0.0;
    let mut arg = Vec::with_capacity(sims.nrows());
    for row in sims.axis_iter(Axis(0)) {
        let (best, val) = argmax(row);
        total += val;
        arg.push(best);
    }
    (total, arg)
}

fn argmax(row: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = 0;
    let mut val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > val {
            best = i;
            val = v;
        }
    }
    (best, val)
}

/// Accumulate `g * d(maxsim)/d(inputs)` into `d_maxed` and `d_summed`.
pub fn maxsim_backward(
    maxed: ArrayView2<'_, f64>,
    summed: ArrayView2<'_, f64>,
    argmax: &[usize],
    g: f64,
    mut d_maxed: ArrayViewMut2<'_, f64>,
    mut d_summed: ArrayViewMut2<'_, f64>,
) {
    for (r, &q) in argmax.iter().enumerate() {
        d_summed.row_mut(r).scaled_add(g, &maxed.row(q));
        d_maxed.row_mut(q).scaled_add(g, &summed.row(r));
    }
}

/// Optimizer and schedule settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::trigger()
    }
}

impl TrainConfig {
    const LR: f64 = 1e-5;
    const WEIGHT_DECAY: f64 = 0.01;
    const WARMUP: usize = 50;

    /// Trigger identification defaults.
    pub fn trigger() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128,
            learning_rate: Self::LR,
            weight_decay: Self::WEIGHT_DECAY,
            warmup_steps: Self::WARMUP,
            max_len: 128,
            seed: 0,
        }
    }

    /// Type ranking defaults.
    pub fn ranker() -> Self {
        TrainConfig {
            batch_size: 64,
            ..Self::trigger()
        }
    }

    /// Type classification defaults.
    pub fn classifier() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            max_len: 512,
            ..Self::trigger()
        }
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.epochs * examples.div_ceil(self.batch_size.max(1))
    }
}

/// Linear warmup to the peak rate, then linear decay to zero.
#[derive(Debug, Clone)]
pub struct LinearSchedule {
    peak: f64,
    warmup: usize,
    total: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Self {
        LinearSchedule { peak, warmup, total }
    }

    /// Rate for the zero-based update `step`.
    pub fn rate(&self, step: usize) -> f64 {
        let t = step + 1;
        if t <= self.warmup {
            self.peak * t as f64 / self.warmup as f64
        } else if self.total <= self.warmup {
            self.peak
        } else {
            let left = self.total.saturating_sub(step) as f64;
            self.peak * (left / (self.total - self.warmup) as f64).clamp(0.0, 1.0)
        }
    }
}

/// AdamW over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            *p -= lr * (update + self.weight_decay * *p);
        }
    }
}

/// Models that expose their parameters as one flat vector.
pub trait Parameterized {
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]);

    /// SHA-256 over the little-endian parameter bytes.
    fn parameter_hash(&self) -> String {
        let bytes: Vec<u8> = self.params().iter().flat_map(|p| p.to_le_bytes()).collect();
        crate::io::sha256_hex(&bytes)
    }
}

/// Contribution of one example to a minibatch: summed loss and gradient,
/// and the number of loss terms they cover.
pub struct ExampleGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub weight: f64,
}

/// Minibatch AdamW loop. `grad_fn` is evaluated in parallel over the batch;
/// per-example gradients are reduced in batch order, so results do not depend
/// on thread scheduling. Returns mean loss per epoch.
pub fn train_loop<M, E, F>(
    model: &mut M,
    batches: impl Fn(usize) -> Vec<Vec<E>>,
    cfg: &TrainConfig,
    steps_total: usize,
    grad_fn: F,
) -> Vec<f64>
where
    M: Parameterized + Sync,
    E: Send + Sync,
    F: Fn(&M, &E) -> ExampleGrad + Sync,
{
    use rayon::prelude::*;

    let n = model.num_params();
    let mut opt = AdamW::new(n, cfg.weight_decay);
    let sched = LinearSchedule::new(cfg.learning_rate, cfg.warmup_steps, steps_total);
    let mut step = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for batch in batches(epoch) {
            let parts: Vec<ExampleGrad> = batch.par_iter().map(|ex| grad_fn(model, ex)).collect();
            let mut grad = vec![0.0; n];
            let mut loss = 0.0;
            let mut weight = 0.0;
            for p in parts {
                loss += p.loss;
                weight += p.weight;
                for (g, pg) in grad.iter_mut().zip(&p.grad) {
                    *g += pg;
                }
            }
            epoch_loss += loss;
            epoch_weight += weight;
            if weight <= 0.0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g /= weight);
            let mut params = model.params();
            opt.step(&mut params, &grad, sched.rate(step));
            model.set_params(&params);
            step += 1;
        }
        let mean = if epoch_weight > 0.0 {
            epoch_loss / epoch_weight
        } else {
            0.0
        };
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        curve.push(mean);
    }
    curve
}

/// Largest relative error between `analytic` and central finite differences
/// of `loss` over the listed coordinates. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<M: Parameterized>(
    model: &mut M,
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    floor: f64,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let base = model.params();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        model.set_params(&p);
        let up = loss(model);
        p[i] = base[i] - eps;
        model.set_params(&p);
        let down = loss(model);
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    model.set_params(&base);
    worst
}

/// Deterministic minibatches: shuffle indices with a per-epoch seed.
pub fn shuffled_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bce_matches_direct_formula() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (0.0, 1.0)] {
            let p: f64 = sigmoid(z);
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logits(z, y) - direct).abs() < 1e-12);
        }
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(800.0, 0.0).is_finite());
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let x = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let w = array![[0.9, 0.2, -0.4], [-0.3, 0.8, 0.5]];
        let f = |x: &Array2<f64>| (normalize_rows(x.view()).0 * &w).sum();
        let (h, norms) = normalize_rows(x.view());
        let dx = normalize_rows_backward(h.view(), &norms, w.view());
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-8, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LinearSchedule::new(1.0, 4, 12);
        assert!((s.rate(0) - 0.25).abs() < 1e-12);
        assert!((s.rate(3) - 1.0).abs() < 1e-12);
        assert!(s.rate(8) < s.rate(4));
        assert!(s.rate(11) > 0.0);
        assert_eq!(s.rate(12), 0.0);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let mut opt = AdamW::new(2, 0.0);
        opt.step(&mut p, &[0.5, -0.5], 0.1);
        assert!(p[0] < 1.0 && p[1] > -1.0);
    }
}
