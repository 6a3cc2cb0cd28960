use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmin, RouterArch, RouterModel, RouterParams, RouterSample};
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Squared error against the raw label vector.
    Mse,
    /// Cross-entropy against `softmin(label)`.
    Ce,
    /// Cross-entropy against the one-hot argmin of the label.
    CeOnehot,
}

impl LossMode {
    pub fn code(self) -> u32 {
        match self {
            LossMode::Mse => 0,
            LossMode::Ce => 1,
            LossMode::CeOnehot => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(LossMode::Mse),
            1 => Ok(LossMode::Ce),
            2 => Ok(LossMode::CeOnehot),
            other => Err(Error::Format(format!("unknown loss mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            warmup_steps: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate and batch_size must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then constant. Warmup longer than the
    /// run is clipped to the run length.
    pub fn rate_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.warmup_steps.min(total_steps);
        if warmup == 0 || step >= warmup {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }
}

fn softmin(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.iter().map(|v| (min - v).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Loss for one sample and its derivative with respect to the prediction.
pub(crate) fn sample_loss(mode: LossMode, pred: &[f64], label: &[f64]) -> (f64, Vec<f64>) {
    match mode {
        LossMode::Mse => {
            let diff: Vec<f64> = pred.iter().zip(label).map(|(p, s)| p - s).collect();
            let loss = diff.iter().map(|d| d * d).sum();
            (loss, diff.into_iter().map(|d| 2.0 * d).collect())
        }
        LossMode::Ce | LossMode::CeOnehot => {
            let target = if mode == LossMode::Ce {
                softmin(label)
            } else {
                let mut t = vec![0.0; label.len()];
                t[argmin(label)] = 1.0;
                t
            };
            // predicted distribution is softmin of the predicted losses
            let p = softmin(pred);
            let loss = -target
                .iter()
                .zip(&p)
                .map(|(q, pj)| if *q > 0.0 { q * pj.ln() } else { 0.0 })
                .sum::<f64>();
            (loss, target.iter().zip(&p).map(|(q, pj)| q - pj).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub router: RouterModel,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct AdamW {
    m: RouterParams,
    v: RouterParams,
    t: i32,
}

impl AdamW {
    fn new(params: &RouterParams) -> Self {
        Self {
            m: RouterParams::zeros_like(params),
            v: RouterParams::zeros_like(params),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut RouterParams, grad: &RouterParams, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let groups = params.groups_mut();
        let grads = grad.groups();
        let ms = self.m.groups_mut();
        let vs = self.v.groups_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in groups.into_iter().zip(grads).zip(ms).zip(vs) {
            // biases are not decayed
            let wd = if name == "head_bias" { 0.0 } else { weight_decay };
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                p[i] -= lr * (update + wd * p[i]);
            }
        }
    }
}

/// Trains a freshly initialized router on `samples`.
///
/// Deterministic for a fixed `config.seed`; single-threaded with a
/// seed-controlled shuffle each epoch.
pub fn train_router(
    samples: &[RouterSample],
    arch: RouterArch,
    config: TrainConfig,
    loss_mode: LossMode,
    pool_binding: &str,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyDataset("router training needs at least one sample".into()))?;
    let m = first.label.len();
    if m == 0 {
        return Err(Error::Shape("labels must be non-empty".into()));
    }
    if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.label.len() != m) {
        return Err(Error::Shape(format!(
            "sample {i} has {} label entries, expected {m}",
            s.label.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut router = RouterModel::init(arch, m, pool_binding, config, loss_mode, &mut rng);
    let mut opt = AdamW::new(&router.params);
    let batches_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&RouterSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = router.loss_and_grad(&batch, loss_mode)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Divergence { step });
            }
            opt.step(
                &mut router.params,
                &grad,
                config.rate_at(step, total_steps),
                config.weight_decay,
            );
            epoch_total += loss * batch.len() as f64;
            step += 1;
        }
        epoch_losses.push(epoch_total / samples.len() as f64);
    }

    router.round_to_storage();
    let all: Vec<&RouterSample> = samples.iter().collect();
    router.final_train_loss = router.loss(&all, loss_mode)?;
    Ok(TrainOutcome {
        router,
        epoch_losses,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::super::EncoderKind;
    use super::*;
    use crate::model::TokenSequence;
    use rand::Rng;

    fn constant_samples(c: f64, m: usize, n: usize) -> Vec<RouterSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|_| RouterSample {
                prompt_tokens: TokenSequence::new(
                    (0..rng.random_range(1..6)).map(|_| rng.random_range(0..12)).collect(),
                )
                .unwrap(),
                label: vec![c; m],
            })
            .collect()
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 60,
            warmup_steps: 10,
            seed: 3,
        }
    }

    #[test]
    fn constant_targets_are_learned() {
        let samples = constant_samples(2.5, 4, 40);
        for encoder in [EncoderKind::MeanPool, EncoderKind::Attention] {
            let out = train_router(
                &samples,
                RouterArch::new(12, 6, encoder),
                fast_config(),
                LossMode::Mse,
                "p",
            )
            .unwrap();
            for s in &samples {
                for p in out.router.predict(&s.prompt_tokens).unwrap() {
                    assert!((p - 2.5).abs() < 0.1 * 2.5, "{encoder:?}: {p}");
                }
            }
            // bias starts at zero and moves toward the constant
            for b in &out.router.params.head_bias {
                assert!(*b > 0.0 && (b - 2.5).abs() < 2.5, "bias {b}");
            }
            assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
        }
    }

    #[test]
    fn same_seed_same_router() {
        let samples = constant_samples(1.0, 3, 20);
        let arch = RouterArch::new(12, 4, EncoderKind::Attention);
        let a = train_router(&samples, arch, fast_config(), LossMode::Ce, "p").unwrap();
        let b = train_router(&samples, arch, fast_config(), LossMode::Ce, "p").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let mut samples = constant_samples(1.0, 3, 4);
        samples[2].label.push(0.0);
        let arch = RouterArch::new(12, 4, EncoderKind::MeanPool);
        assert!(matches!(
            train_router(&samples, arch, fast_config(), LossMode::Mse, "p"),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            train_router(&[], arch, fast_config(), LossMode::Mse, "p"),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn divergence_names_step() {
        let mut samples = constant_samples(1.0, 2, 4);
        samples[0].label[0] = f64::INFINITY;
        let arch = RouterArch::new(12, 4, EncoderKind::MeanPool);
        let mut cfg = fast_config();
        cfg.batch_size = 4;
        assert!(matches!(
            train_router(&samples, arch, cfg, LossMode::Mse, "p"),
            Err(Error::Divergence { step: 0 })
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let samples = constant_samples(1.0, 2, 4);
        let mut cfg = fast_config();
        cfg.epochs = 0;
        let arch = RouterArch::new(12, 4, EncoderKind::MeanPool);
        let out = train_router(&samples, arch, cfg, LossMode::Mse, "p").unwrap();
        assert_eq!(out.steps, 0);
        assert!(out.router.final_train_loss.is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = RouterModel::init(arch, 2, "p", cfg, LossMode::Mse, &mut rng);
        assert_eq!(out.router.params, init.params);
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            warmup_steps: 4,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let rates: Vec<f64> = (0..6).map(|s| cfg.rate_at(s, 100)).collect();
        assert_eq!(rates, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        // warmup clipped to a 2-step run
        assert_eq!(cfg.rate_at(0, 2), 0.5);
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.learning_rate, c.weight_decay, c.batch_size, c.epochs, c.warmup_steps),
            (1e-5, 0.01, 32, 10, 500)
        );
    }

    #[test]
    fn ce_gradient_is_target_minus_prediction() {
        let (loss, g) = sample_loss(LossMode::Ce, &[0.0, 0.0], &[0.0, 0.0]);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let (_, g) = sample_loss(LossMode::CeOnehot, &[0.0, 0.0], &[1.0, 0.0]);
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
    }
}
