//! Omission-set search: greedy block elimination on calibration data, an
//! exhaustive oracle, and the candidate pool built from every
//! (dataset, criterion) pair.

use std::path::Path;

use itertools::Itertools;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{dataset_loss, Criterion, PromptAnswerPair};
use crate::model::{apply_omission, io::hash_bytes, OmissionSet, TransformerModel};

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 128;
pub const DEFAULT_EXHAUSTIVE_CAP: u128 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    pub name: String,
    pub pairs: Vec<PromptAnswerPair>,
}

impl CalibrationDataset {
    pub fn new(name: impl Into<String>, pairs: Vec<PromptAnswerPair>) -> Result<Self> {
        let name = name.into();
        if pairs.is_empty() {
            return Err(Error::EmptyDataset(format!("calibration dataset {name:?}")));
        }
        Ok(Self { name, pairs })
    }

    /// At most `n` pairs drawn without replacement, kept in their original order.
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Self {
        if self.pairs.len() <= n {
            return self.clone();
        }
        let mut idx = sample(rng, self.pairs.len(), n).into_vec();
        idx.sort_unstable();
        Self {
            name: self.name.clone(),
            pairs: idx.into_iter().map(|i| self.pairs[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SearchOptions {
    /// After the greedy pass, try single-block swaps once per chosen block.
    pub two_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchStep {
    /// `(block, loss)` for every block not yet omitted, in index order.
    pub candidates: Vec<(usize, f64)>,
    pub chosen: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
    /// `(removed_from_set, added_to_set, new_loss)` for accepted swaps.
    pub swaps: Vec<(usize, usize, f64)>,
}

impl SearchTrace {
    /// Loss of the final set, if any step ran.
    pub fn final_loss(&self) -> Option<f64> {
        self.swaps
            .last()
            .map(|s| s.2)
            .or_else(|| self.steps.last().map(|s| s.loss))
    }
}

fn set_loss(
    model: &TransformerModel,
    data: &[PromptAnswerPair],
    criterion: Criterion,
    set: &OmissionSet,
) -> Result<f64> {
    let view = apply_omission(model, set)?;
    Ok(dataset_loss(&view, data, criterion)?.value)
}

fn check_k(model: &TransformerModel, k: usize) -> Result<()> {
    let max = model.n_blocks() - 1;
    if k > max {
        return Err(Error::InvalidK { k, max });
    }
    Ok(())
}

/// Lowest loss; ties go to the earliest entry.
fn argmin_by_loss<T: Copy>(items: &[(T, f64)]) -> (T, f64) {
    let mut best = items[0];
    for &item in &items[1..] {
        if item.1 < best.1 {
            best = item;
        }
    }
    best
}

pub fn greedy_search(
    model: &TransformerModel,
    data: &CalibrationDataset,
    criterion: Criterion,
    k: usize,
) -> Result<(OmissionSet, SearchTrace)> {
    greedy_search_with(model, data, criterion, k, SearchOptions::default())
}

/// Grows the omission set one block at a time, each step taking the block
/// whose removal gives the lowest dataset loss (lowest index on ties).
pub fn greedy_search_with(
    model: &TransformerModel,
    data: &CalibrationDataset,
    criterion: Criterion,
    k: usize,
    options: SearchOptions,
) -> Result<(OmissionSet, SearchTrace)> {
    check_k(model, k)?;
    let d = model.n_blocks();
    let mut set = OmissionSet::empty();
    let mut trace = SearchTrace::default();
    for _ in 0..k {
        let candidates = (1..=d)
            .filter(|b| !set.contains(*b))
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&b| Ok((b, set_loss(model, &data.pairs, criterion, &set.with(b))?)))
            .collect::<Result<Vec<_>>>()?;
        let (chosen, loss) = argmin_by_loss(&candidates);
        set = set.with(chosen);
        trace.steps.push(SearchStep {
            candidates,
            chosen,
            loss,
        });
    }

    if options.two_pass && k > 0 {
        let mut current = trace.final_loss().expect("k > 0");
        let order: Vec<usize> = trace.steps.iter().map(|s| s.chosen).collect();
        for out in order {
            if !set.contains(out) {
                continue;
            }
            let base: Vec<usize> = set.indices().iter().copied().filter(|&b| b != out).collect();
            let swaps = (1..=d)
                .filter(|b| !set.contains(*b))
                .collect::<Vec<_>>()
                .par_iter()
                .map(|&b| {
                    let cand = OmissionSet::new(base.iter().copied().chain([b]))?;
                    Ok((b, set_loss(model, &data.pairs, criterion, &cand)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (inn, loss) = argmin_by_loss(&swaps);
            if loss < current {
                set = OmissionSet::new(base.into_iter().chain([inn]))?;
                current = loss;
                trace.swaps.push((out, inn, loss));
            }
        }
    }
    Ok((set, trace))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Global minimum over all size-`k` subsets; ties go to the lexicographically smallest.
pub fn exhaustive_search(
    model: &TransformerModel,
    data: &CalibrationDataset,
    criterion: Criterion,
    k: usize,
    cap: u128,
) -> Result<(OmissionSet, f64)> {
    check_k(model, k)?;
    let d = model.n_blocks();
    let count = binomial(d, k);
    if count > cap {
        return Err(Error::CombinatorialBlowup { n: d, k, count, cap });
    }
    let subsets: Vec<Vec<usize>> = (1..=d).combinations(k).collect();
    let scored = subsets
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let set = OmissionSet::new(s.iter().copied())?;
            Ok((i, set_loss(model, &data.pairs, criterion, &set)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (best, loss) = argmin_by_loss(&scored);
    Ok((OmissionSet::new(subsets[best].iter().copied())?, loss))
}

/// Greedy search calibrated on a single pair.
pub fn per_prompt_search(
    model: &TransformerModel,
    pair: &PromptAnswerPair,
    criterion: Criterion,
    k: usize,
) -> Result<OmissionSet> {
    let data = CalibrationDataset::new("prompt", vec![pair.clone()])?;
    Ok(greedy_search(model, &data, criterion, k)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    /// 1-based block indices.
    pub blocks: OmissionSet,
    pub dataset: String,
    pub criterion: Criterion,
    pub loss: f64,
}

/// The `m = datasets x criteria` omission sets a router chooses among.
/// Duplicate sets are kept so that label positions stay fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub k: usize,
    pub model_hash: String,
    pub sets: Vec<PoolEntry>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set(&self, index: usize) -> &OmissionSet {
        &self.sets[index].blocks
    }

    /// Pool built from explicit sets, e.g. for scripted experiments.
    pub fn from_sets(k: usize, model_hash: impl Into<String>, sets: Vec<OmissionSet>) -> Result<Self> {
        if let Some(bad) = sets.iter().find(|s| s.len() != k) {
            return Err(Error::InvalidOmission(format!("set {bad} does not have {k} blocks")));
        }
        Ok(Self {
            k,
            model_hash: model_hash.into(),
            sets: sets
                .into_iter()
                .enumerate()
                .map(|(i, blocks)| PoolEntry {
                    blocks,
                    dataset: format!("manual-{i}"),
                    criterion: Criterion::Tl,
                    loss: 0.0,
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("pool serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pool: Self = serde_json::from_str(text)?;
        if pool.sets.is_empty() {
            return Err(Error::EmptyDataset("pool has no sets".into()));
        }
        if let Some(bad) = pool.sets.iter().find(|e| e.blocks.len() != pool.k) {
            return Err(Error::Format(format!(
                "pool set {} does not have k={} blocks",
                bad.blocks, pool.k
            )));
        }
        Ok(pool)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hash_bytes(self.to_json().as_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks that every set is valid for `model` and that the model hash matches.
    pub fn check_model(&self, model: &TransformerModel) -> Result<()> {
        let hash = model.hash();
        if hash != self.model_hash {
            return Err(Error::InvalidArgument(format!(
                "pool was searched on model {} but this model is {hash}",
                self.model_hash
            )));
        }
        self.sets.iter().try_for_each(|e| e.blocks.validate(model.n_blocks()))
    }

    /// Sub-pool keeping entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            k: self.k,
            model_hash: self.model_hash.clone(),
            sets: indices.iter().map(|&i| self.sets[i].clone()).collect(),
        }
    }
}

/// Runs greedy search for every (dataset, criterion) pair, datasets-major.
pub fn generate_pool(
    model: &TransformerModel,
    datasets: &[CalibrationDataset],
    criteria: &[Criterion],
    k: usize,
    options: SearchOptions,
) -> Result<CandidatePool> {
    if datasets.is_empty() || criteria.is_empty() {
        return Err(Error::InvalidArgument(
            "pool generation needs at least one dataset and one criterion".into(),
        ));
    }
    check_k(model, k)?;
    let jobs: Vec<(&CalibrationDataset, Criterion)> = datasets
        .iter()
        .flat_map(|d| criteria.iter().map(move |&c| (d, c)))
        .collect();
    let sets = jobs
        .par_iter()
        .map(|&(data, criterion)| {
            let (blocks, trace) = greedy_search_with(model, data, criterion, k, options)?;
            let loss = match trace.final_loss() {
                Some(l) => l,
                None => set_loss(model, &data.pairs, criterion, &blocks)?,
            };
            Ok(PoolEntry {
                blocks,
                dataset: data.name.clone(),
                criterion,
                loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool {
        k,
        model_hash: model.hash(),
        sets,
    })
}
