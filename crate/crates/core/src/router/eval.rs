use serde::{Deserialize, Serialize};

use super::{argmin, RouterModel, RouterSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterMetrics {
    pub samples: usize,
    /// Fraction of samples whose routed entry attains the label minimum.
    /// Duplicate pool entries share labels exactly, so either copy counts.
    pub accuracy: f64,
    /// Mean of `label[chosen] - min(label)`.
    pub regret: f64,
    /// Mean squared error per label entry.
    pub mse: f64,
}

pub fn evaluate_predictions(predictions: &[Vec<f64>], samples: &[RouterSample]) -> Result<RouterMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no held-out samples".into()));
    }
    if predictions.len() != samples.len() {
        return Err(Error::Shape("one prediction per sample required".into()));
    }
    let (mut hits, mut regret, mut sq, mut entries) = (0usize, 0.0, 0.0, 0usize);
    for (pred, s) in predictions.iter().zip(samples) {
        if pred.len() != s.label.len() {
            return Err(Error::Shape(format!(
                "prediction has {} entries, label has {}",
                pred.len(),
                s.label.len()
            )));
        }
        let chosen = s.label[argmin(pred)];
        let best = s.label[argmin(&s.label)];
        if chosen == best {
            hits += 1;
        }
        regret += chosen - best;
        sq += pred.iter().zip(&s.label).map(|(p, l)| (p - l) * (p - l)).sum::<f64>();
        entries += pred.len();
    }
    let n = samples.len() as f64;
    Ok(RouterMetrics {
        samples: samples.len(),
        accuracy: hits as f64 / n,
        regret: regret / n,
        mse: sq / entries as f64,
    })
}

pub fn evaluate_router(router: &RouterModel, held_out: &[RouterSample]) -> Result<RouterMetrics> {
    let predictions = held_out
        .iter()
        .map(|s| router.predict(&s.prompt_tokens))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&predictions, held_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenSequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(n: usize, m: usize, seed: u64) -> Vec<RouterSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| RouterSample {
                prompt_tokens: TokenSequence::new(vec![1]).unwrap(),
                label: (0..m).map(|_| rng.random_range(0.0..5.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_router() {
        let s = samples(30, 5, 1);
        let preds: Vec<_> = s.iter().map(|x| x.label.clone()).collect();
        let m = evaluate_predictions(&preds, &s).unwrap();
        assert_eq!((m.accuracy, m.regret, m.mse), (1.0, 0.0, 0.0));
    }

    #[test]
    fn constant_router_regret_by_hand() {
        let s = samples(25, 4, 2);
        // always picks entry 2
        let preds: Vec<_> = s.iter().map(|_| vec![1.0, 1.0, 0.0, 1.0]).collect();
        let m = evaluate_predictions(&preds, &s).unwrap();
        let hand: f64 = s
            .iter()
            .map(|x| x.label[2] - x.label.iter().copied().fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / 25.0;
        assert!((m.regret - hand).abs() < 1e-12);
        assert!(m.regret >= 0.0);
    }

    #[test]
    fn random_router_is_near_chance() {
        let s = samples(4000, 10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<_> = s
            .iter()
            .map(|_| (0..10).map(|_| rng.random::<f64>()).collect())
            .collect();
        let m = evaluate_predictions(&preds, &s).unwrap();
        // binomial std at p = 0.1, n = 4000 is about 0.005
        assert!((m.accuracy - 0.1).abs() < 0.025, "{}", m.accuracy);
    }

    #[test]
    fn empty_held_out() {
        assert!(matches!(evaluate_predictions(&[], &[]), Err(Error::EmptyDataset(_))));
    }
}
