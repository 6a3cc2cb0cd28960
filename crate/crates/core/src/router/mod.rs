//! Prompt router: a small encoder (token embeddings, optional self-attention
//! layer, mean pooling) with a linear head that predicts one loss per
//! candidate omission set. Routing picks the minimum prediction.
//!
//! The router runs in f64 so that analytic gradients can be checked tightly
//! against finite differences.

mod checkpoint;
mod dataset;
mod eval;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OmissionSet, TokenSequence};
use crate::search::CandidatePool;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use dataset::{build_router_dataset, read_jsonl, split_samples, write_jsonl, RouterSample};
pub use eval::{evaluate_predictions, evaluate_router, RouterMetrics};
pub use train::{train_router, LossMode, TrainConfig, TrainOutcome};

pub const DEFAULT_MAX_PROMPT_LEN: usize = 512;

thread_local! {
    static ROUTE_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of [`route`] calls made on the current thread.
pub fn route_calls() -> u64 {
    ROUTE_CALLS.with(|c| c.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Mean of token embeddings.
    MeanPool,
    /// One residual single-head self-attention layer, then mean pooling.
    Attention,
}

impl EncoderKind {
    pub fn code(self) -> u32 {
        match self {
            EncoderKind::MeanPool => 0,
            EncoderKind::Attention => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(EncoderKind::MeanPool),
            1 => Ok(EncoderKind::Attention),
            other => Err(Error::Format(format!("unknown encoder kind {other}"))),
        }
    }
}

/// Shape of the router network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterArch {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder: EncoderKind,
    /// Prompts are truncated to their first `max_prompt_len` tokens.
    pub max_prompt_len: usize,
}

impl RouterArch {
    pub fn new(vocab_size: usize, embed_dim: usize, encoder: EncoderKind) -> Self {
        Self {
            vocab_size,
            embed_dim,
            encoder,
            max_prompt_len: DEFAULT_MAX_PROMPT_LEN,
        }
    }
}

/// Trainable tensors, row-major. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `[vocab x e]`
    pub embedding: Vec<f64>,
    /// `wq, wk, wv, wo`, each `[e x e]`; present for the attention encoder.
    pub attention: Option<[Vec<f64>; 4]>,
    /// `[e x m]`
    pub head_weight: Vec<f64>,
    /// `[m]`
    pub head_bias: Vec<f64>,
}

impl RouterParams {
    fn zeros_like(other: &Self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Self {
            embedding: z(&other.embedding),
            attention: other
                .attention
                .as_ref()
                .map(|a| [z(&a[0]), z(&a[1]), z(&a[2]), z(&a[3])]),
            head_weight: z(&other.head_weight),
            head_bias: z(&other.head_bias),
        }
    }

    /// Named parameter groups in storage order.
    pub fn groups(&self) -> Vec<(&'static str, &Vec<f64>)> {
        let mut g = vec![("embedding", &self.embedding)];
        if let Some([q, k, v, o]) = &self.attention {
            g.extend([("attn_q", q), ("attn_k", k), ("attn_v", v), ("attn_o", o)]);
        }
        g.push(("head_weight", &self.head_weight));
        g.push(("head_bias", &self.head_bias));
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        let mut g = vec![("embedding", &mut self.embedding)];
        if let Some([q, k, v, o]) = &mut self.attention {
            g.extend([("attn_q", q), ("attn_k", k), ("attn_v", v), ("attn_o", o)]);
        }
        g.push(("head_weight", &mut self.head_weight));
        g.push(("head_bias", &mut self.head_bias));
        g
    }

    fn all_finite(&self) -> bool {
        self.groups().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Trained router bound to one candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub arch: RouterArch,
    pub outputs: usize,
    pub params: RouterParams,
    /// Hash of the pool whose sets the outputs index.
    pub pool_binding: String,
    pub train_config: TrainConfig,
    pub loss_mode: LossMode,
    pub final_train_loss: f64,
}

/// Intermediate values kept for the backward pass.
struct Activations {
    tokens: Vec<usize>,
    x: Vec<f64>,
    attn: Option<AttnActivations>,
    pooled: Vec<f64>,
}

struct AttnActivations {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

/// `a [n x k] · b [k x m]`
fn mm(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b[p * m + j];
            }
        }
    }
    out
}

/// `aᵀ · b` for `a [n x k]`, `b [n x m]`, accumulated into `out [k x m]`.
fn mm_at_b_acc(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..m {
                out[p * m + j] += av * b[i * m + j];
            }
        }
    }
}

/// `a · bᵀ` for `a [n x m]`, `b [k x m]` -> `[n x k]`.
fn mm_a_bt(a: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[i * k + j] = (0..m).map(|p| a[i * m + p] * b[j * m + p]).sum();
        }
    }
    out
}

impl RouterModel {
    pub fn init<R: Rng + ?Sized>(
        arch: RouterArch,
        outputs: usize,
        pool_binding: impl Into<String>,
        train_config: TrainConfig,
        loss_mode: LossMode,
        rng: &mut R,
    ) -> Self {
        let e = arch.embed_dim;
        let mut draw = |n: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>()
        };
        let embedding = draw(arch.vocab_size * e, 1.0);
        let attention = (arch.encoder == EncoderKind::Attention).then(|| {
            let s = 1.0 / (e as f64).sqrt();
            [draw(e * e, s), draw(e * e, s), draw(e * e, s), draw(e * e, 0.1 * s)]
        });
        let head_weight = draw(e * outputs, 0.1 / (e as f64).sqrt());
        let mut model = Self {
            arch,
            outputs,
            params: RouterParams {
                embedding,
                attention,
                head_weight,
                head_bias: vec![0.0; outputs],
            },
            pool_binding: pool_binding.into(),
            train_config,
            loss_mode,
            final_train_loss: f64::NAN,
        };
        model.round_to_storage();
        model
    }

    /// Rounds every parameter to f32, the checkpoint precision, so a saved
    /// and reloaded router predicts exactly what the in-memory one does.
    pub fn round_to_storage(&mut self) {
        for (_, g) in self.params.groups_mut() {
            g.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn prepare_tokens(&self, prompt: &TokenSequence) -> Result<Vec<usize>> {
        let vocab = self.arch.vocab_size;
        prompt
            .tokens()
            .iter()
            .take(self.arch.max_prompt_len)
            .map(|&t| {
                if (t as usize) < vocab {
                    Ok(t as usize)
                } else {
                    Err(Error::Vocabulary { id: t, vocab })
                }
            })
            .collect()
    }

    fn forward(&self, prompt: &TokenSequence) -> Result<(Vec<f64>, Activations)> {
        let e = self.arch.embed_dim;
        let tokens = self.prepare_tokens(prompt)?;
        let n = tokens.len();
        let mut x = Vec::with_capacity(n * e);
        for &t in &tokens {
            x.extend_from_slice(&self.params.embedding[t * e..(t + 1) * e]);
        }

        let mut h = x.clone();
        let attn = self.params.attention.as_ref().map(|[wq, wk, wv, wo]| {
            let q = mm(&x, n, e, wq, e);
            let k = mm(&x, n, e, wk, e);
            let v = mm(&x, n, e, wv, e);
            let scale = 1.0 / (e as f64).sqrt();
            let mut probs = mm_a_bt(&q, n, e, &k, n);
            for row in probs.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in row.iter_mut() {
                    *s = ((*s - max) * scale).exp();
                    total += *s;
                }
                row.iter_mut().for_each(|s| *s /= total);
            }
            let ctx = mm(&probs, n, n, &v, e);
            let out = mm(&ctx, n, e, wo, e);
            for (hv, o) in h.iter_mut().zip(&out) {
                *hv += o;
            }
            AttnActivations { q, k, v, probs, ctx }
        });

        let mut pooled = vec![0.0; e];
        for row in h.chunks_exact(e) {
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);

        let m = self.outputs;
        let mut pred = self.params.head_bias.clone();
        for i in 0..e {
            for j in 0..m {
                pred[j] += pooled[i] * self.params.head_weight[i * m + j];
            }
        }
        Ok((
            pred,
            Activations {
                tokens,
                x,
                attn,
                pooled,
            },
        ))
    }

    /// Accumulates into `grad` the gradient of a scalar loss whose derivative
    /// with respect to the prediction vector is `d_pred`.
    fn backward(&self, act: &Activations, d_pred: &[f64], grad: &mut RouterParams) {
        let e = self.arch.embed_dim;
        let m = self.outputs;
        let n = act.tokens.len();

        let mut d_pooled = vec![0.0; e];
        for i in 0..e {
            for j in 0..m {
                grad.head_weight[i * m + j] += act.pooled[i] * d_pred[j];
                d_pooled[i] += self.params.head_weight[i * m + j] * d_pred[j];
            }
        }
        for (g, d) in grad.head_bias.iter_mut().zip(d_pred) {
            *g += d;
        }

        // mean pooling spreads the gradient evenly over rows
        let d_h: Vec<f64> = (0..n * e).map(|idx| d_pooled[idx % e] / n as f64).collect();
        let mut d_x = d_h.clone();

        if let (Some([wq, wk, wv, wo]), Some(a), Some(g)) = (&self.params.attention, &act.attn, &mut grad.attention) {
            let scale = 1.0 / (e as f64).sqrt();
            mm_at_b_acc(&a.ctx, n, e, &d_h, e, &mut g[3]);
            let d_ctx = mm_a_bt(&d_h, n, e, wo, e);
            let d_probs = mm_a_bt(&d_ctx, n, e, &a.v, n);
            let mut d_v = vec![0.0; n * e];
            mm_at_b_acc(&a.probs, n, n, &d_ctx, e, &mut d_v);
            let mut d_scores = vec![0.0; n * n];
            for i in 0..n {
                let p = &a.probs[i * n..(i + 1) * n];
                let dp = &d_probs[i * n..(i + 1) * n];
                let dot: f64 = p.iter().zip(dp).map(|(x, y)| x * y).sum();
                for j in 0..n {
                    d_scores[i * n + j] = p[j] * (dp[j] - dot) * scale;
                }
            }
            let d_q = mm(&d_scores, n, n, &a.k, e);
            let mut d_k = vec![0.0; n * e];
            mm_at_b_acc(&d_scores, n, n, &a.q, e, &mut d_k);
            mm_at_b_acc(&act.x, n, e, &d_q, e, &mut g[0]);
            mm_at_b_acc(&act.x, n, e, &d_k, e, &mut g[1]);
            mm_at_b_acc(&act.x, n, e, &d_v, e, &mut g[2]);
            for (d, w) in [(&d_q, wq), (&d_k, wk), (&d_v, wv)] {
                let back = mm_a_bt(d, n, e, w, e);
                for (dx, b) in d_x.iter_mut().zip(&back) {
                    *dx += b;
                }
            }
        }

        for (r, &t) in act.tokens.iter().enumerate() {
            for c in 0..e {
                grad.embedding[t * e + c] += d_x[r * e + c];
            }
        }
    }

    /// Predicted loss for every pool entry.
    pub fn predict(&self, prompt: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.forward(prompt)?.0)
    }

    /// Mean batch loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[&RouterSample], mode: LossMode) -> Result<(f64, RouterParams)> {
        let mut grad = RouterParams::zeros_like(&self.params);
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            self.check_label(sample)?;
            let (pred, act) = self.forward(&sample.prompt_tokens)?;
            let (loss, mut d_pred) = train::sample_loss(mode, &pred, &sample.label);
            d_pred.iter_mut().for_each(|d| *d *= scale);
            total += loss;
            self.backward(&act, &d_pred, &mut grad);
        }
        Ok((total * scale, grad))
    }

    /// Mean loss only.
    pub fn loss(&self, samples: &[&RouterSample], mode: LossMode) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            self.check_label(s)?;
            let pred = self.predict(&s.prompt_tokens)?;
            total += train::sample_loss(mode, &pred, &s.label).0;
        }
        Ok(total / samples.len() as f64)
    }

    fn check_label(&self, s: &RouterSample) -> Result<()> {
        if s.label.len() != self.outputs {
            return Err(Error::Shape(format!(
                "label has {} entries, router predicts {}",
                s.label.len(),
                self.outputs
            )));
        }
        Ok(())
    }
}

/// Result of routing one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    /// 0-based pool position.
    pub index: usize,
    pub set: OmissionSet,
    pub predicted: Vec<f64>,
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

pub fn check_binding(router: &RouterModel, pool: &CandidatePool) -> Result<()> {
    let actual = pool.hash();
    if actual != router.pool_binding || pool.len() != router.outputs {
        return Err(Error::PoolBinding {
            expected: router.pool_binding.clone(),
            actual,
        });
    }
    Ok(())
}

/// Picks the pool entry with the lowest predicted loss.
pub fn route(router: &RouterModel, prompt: &TokenSequence, pool: &CandidatePool) -> Result<Route> {
    check_binding(router, pool)?;
    ROUTE_CALLS.with(|c| c.set(c.get() + 1));
    let predicted = router.predict(prompt)?;
    let index = argmin(&predicted);
    Ok(Route {
        index,
        set: pool.set(index).clone(),
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::CandidatePool;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool3() -> CandidatePool {
        let sets = [[1], [2], [3]].map(|s| OmissionSet::new(s).unwrap()).to_vec();
        CandidatePool::from_sets(1, "h", sets).unwrap()
    }

    fn router_for(pool: &CandidatePool, encoder: EncoderKind) -> RouterModel {
        RouterModel::init(
            RouterArch::new(10, 4, encoder),
            pool.len(),
            pool.hash(),
            TrainConfig::default(),
            LossMode::Mse,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    fn seq(t: &[u32]) -> TokenSequence {
        TokenSequence::new(t.to_vec()).unwrap()
    }

    #[test]
    fn routes_to_argmin_of_hand_set_head() {
        let pool = pool3();
        let mut r = router_for(&pool, EncoderKind::MeanPool);
        r.params.head_weight.iter_mut().for_each(|w| *w = 0.0);
        r.params.head_bias = vec![0.9, 0.1, 0.5];
        let out = route(&r, &seq(&[1, 2]), &pool).unwrap();
        assert_eq!(out.index, 1);
        assert_eq!(out.set, *pool.set(1));

        // shifting every bias by a constant changes nothing
        let before = route(&r, &seq(&[3, 4, 5]), &pool).unwrap().index;
        r.params.head_bias.iter_mut().for_each(|b| *b += 7.25);
        assert_eq!(route(&r, &seq(&[3, 4, 5]), &pool).unwrap().index, before);
    }

    #[test]
    fn binding_mismatch_is_rejected() {
        let pool = pool3();
        let r = router_for(&pool, EncoderKind::MeanPool);
        let other =
            CandidatePool::from_sets(1, "other-model", pool.sets.iter().map(|e| e.blocks.clone()).collect()).unwrap();
        assert!(matches!(route(&r, &seq(&[1]), &other), Err(Error::PoolBinding { .. })));
    }

    #[test]
    fn vocabulary_and_truncation() {
        let pool = pool3();
        let mut r = router_for(&pool, EncoderKind::Attention);
        assert!(matches!(r.predict(&seq(&[10])), Err(Error::Vocabulary { .. })));
        r.arch.max_prompt_len = 2;
        // tokens past the limit are ignored, even invalid ones
        assert_eq!(r.predict(&seq(&[1, 2, 99])).unwrap(), r.predict(&seq(&[1, 2])).unwrap());
    }

    #[test]
    fn argmin_ties_low() {
        assert_eq!(argmin(&[0.3, 0.1, 0.1]), 1);
        assert_eq!(argmin(&[2.0]), 0);
    }
}
