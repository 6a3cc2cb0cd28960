use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{evaluate, Criterion, PromptAnswerPair};
use crate::model::{apply_omission, TokenSequence, TransformerModel};
use crate::search::CandidatePool;

/// A prompt (answer dropped) with the per-pool-entry losses it incurs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSample {
    pub prompt_tokens: TokenSequence,
    pub label: Vec<f64>,
}

/// `label[j]` = loss of the pair under pool entry `j` (default criterion: tl).
pub fn build_router_dataset(
    model: &TransformerModel,
    pool: &CandidatePool,
    pairs: &[PromptAnswerPair],
    criterion: Criterion,
) -> Result<Vec<RouterSample>> {
    if pool.is_empty() {
        return Err(Error::EmptyDataset("pool has no omission sets".into()));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no prompt-answer pairs".into()));
    }
    let views = pool
        .sets
        .iter()
        .map(|e| apply_omission(model, &e.blocks))
        .collect::<Result<Vec<_>>>()?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let wrap = |e| Error::Sample {
                index,
                source: Box::new(e),
            };
            let prompt_tokens = pair.prompt_sequence().map_err(wrap)?;
            let label = views
                .iter()
                .map(|v| evaluate(v, pair, criterion).map(|l| l.value))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            Ok(RouterSample { prompt_tokens, label })
        })
        .collect()
}

/// Seeded split into `(train, validation)`; validation gets `round(n * fraction)` samples.
pub fn split_samples<R: Rng + ?Sized>(
    samples: &[RouterSample],
    validation_fraction: f64,
    rng: &mut R,
) -> (Vec<RouterSample>, Vec<RouterSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(rng);
    let n_val = ((samples.len() as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    let mut val = val.to_vec();
    let mut train = train.to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (
        train.iter().map(|&i| samples[i].clone()).collect(),
        val.iter().map(|&i| samples[i].clone()).collect(),
    )
}

pub fn write_jsonl(samples: &[RouterSample], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RouterSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: RouterSample =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if s.label.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{}:{}: non-finite label", path.display(), n + 1)));
        }
        samples.push(s);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::task_likelihood;
    use crate::model::{ModelConfig, OmissionSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (TransformerModel, Vec<PromptAnswerPair>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = TransformerModel::random(ModelConfig::tiny(16, 8, 6), 0.4, &mut rng);
        let pairs = (0..4)
            .map(|i| PromptAnswerPair::new(&[i, i + 1, 3], &[7, i + 2], vec![]).unwrap())
            .collect();
        (model, pairs)
    }

    #[test]
    fn labels_match_recomputed_tl() {
        let (model, pairs) = setup();
        let sets: Vec<OmissionSet> = (1..=5)
            .flat_map(|a| [OmissionSet::new([a, a + 1]).unwrap(), OmissionSet::new([a, 6]).unwrap()])
            .filter(|s| s.len() == 2)
            .take(10)
            .collect();
        let pool = CandidatePool::from_sets(2, model.hash(), sets).unwrap();
        assert_eq!(pool.len(), 10);
        let samples = build_router_dataset(&model, &pool, &pairs, Criterion::Tl).unwrap();
        assert_eq!(samples.len(), 4);
        for (s, p) in samples.iter().zip(&pairs) {
            assert_eq!(s.prompt_tokens.tokens(), p.prompt());
            for (j, e) in pool.sets.iter().enumerate() {
                let v = apply_omission(&model, &e.blocks).unwrap();
                let tl = task_likelihood(&v, p).unwrap().value;
                assert!((s.label[j] - tl).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_and_duplicate_entries() {
        let (model, pairs) = setup();
        let b = OmissionSet::new([2]).unwrap();
        let pool = CandidatePool::from_sets(1, model.hash(), vec![b.clone()]).unwrap();
        let samples = build_router_dataset(&model, &pool, &pairs, Criterion::Tl).unwrap();
        let view = apply_omission(&model, &b).unwrap();
        assert_eq!(samples[0].label, vec![task_likelihood(&view, &pairs[0]).unwrap().value]);

        let dup = CandidatePool::from_sets(1, model.hash(), vec![b.clone(), b]).unwrap();
        for s in build_router_dataset(&model, &dup, &pairs, Criterion::Tl).unwrap() {
            assert!((s.label[0] - s.label[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn errors_carry_sample_index() {
        let (model, mut pairs) = setup();
        pairs.push(PromptAnswerPair::new(&[1], &[2], vec![]).unwrap());
        let pool = CandidatePool::from_sets(1, model.hash(), vec![OmissionSet::new([1]).unwrap()]).unwrap();
        let err = build_router_dataset(&model, &pool, &pairs, Criterion::Tld).unwrap_err();
        assert!(matches!(err, Error::Sample { index: 0, .. }), "{err}");
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = vec![
            RouterSample {
                prompt_tokens: TokenSequence::new(vec![1, 2]).unwrap(),
                label: vec![0.5, 1.25],
            },
            RouterSample {
                prompt_tokens: TokenSequence::new(vec![3]).unwrap(),
                label: vec![2.0, 0.1],
            },
        ];
        write_jsonl(&samples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"prompt_tokens":[1,2],"label":[0.5,1.25]}"#
        );
        assert_eq!(read_jsonl(&path).unwrap(), samples);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let samples: Vec<RouterSample> = (0..20)
            .map(|i| RouterSample {
                prompt_tokens: TokenSequence::new(vec![i]).unwrap(),
                label: vec![i as f64],
            })
            .collect();
        let (tr, va) = split_samples(&samples, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!((tr.len(), va.len()), (18, 2));
        let (tr2, _) = split_samples(&samples, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(tr, tr2);
        assert!(va.iter().all(|v| !tr.contains(v)));
    }
}
