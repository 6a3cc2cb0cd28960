//! Route a prompt, page in the surviving blocks, run the pruned model.

mod estimate;
mod speedup;

pub use estimate::{estimate_load_time, ParamLayout, GB};
pub use speedup::{measure_speedup, SpeedupCell, MIN_REPETITIONS};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::io::{read_globals, FileLayout, TensorReader};
use crate::model::{Generator, GlobalWeights, ModelConfig, OmissionSet, PrunedView, TokenSequence, TransformerBlock};
use crate::router::{route, RouterModel};
use crate::search::CandidatePool;

/// File-backed block cache. Non-block weights stay resident for the store's
/// lifetime; blocks are read on demand and evicted when a route omits them.
#[derive(Debug)]
pub struct BlockStore {
    path: PathBuf,
    layout: FileLayout,
    globals: GlobalWeights,
    resident: BTreeMap<usize, TransformerBlock>,
    cap: Option<usize>,
    bytes_transferred_total: u64,
    peak_resident: usize,
    model_hash: Option<String>,
}

/// Blocks read by one [`BlockStore::prepare`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadDelta {
    pub loaded: Vec<usize>,
    pub evicted: Vec<usize>,
    pub bytes: u64,
}

impl BlockStore {
    /// Reads the header and non-block weights; no block is loaded yet.
    pub fn open(path: &Path) -> Result<Self> {
        let (layout, globals) = read_globals(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            layout,
            globals,
            resident: BTreeMap::new(),
            cap: None,
            bytes_transferred_total: 0,
            peak_resident: 0,
            model_hash: None,
        })
    }

    /// Limits residency to `blocks` blocks, typically `d - k`.
    pub fn with_cap(mut self, blocks: usize) -> Self {
        self.cap = Some(blocks);
        self
    }

    pub fn cap(&self) -> Option<usize> {
        self.cap
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn layout(&self) -> &FileLayout {
        &self.layout
    }

    pub fn loaded_blocks(&self) -> Vec<usize> {
        self.resident.keys().copied().collect()
    }

    pub fn bytes_transferred_total(&self) -> u64 {
        self.bytes_transferred_total
    }

    /// Largest resident block count observed so far.
    pub fn peak_resident(&self) -> usize {
        self.peak_resident
    }

    /// SHA-256 of the backing file, streamed once and cached. Equals
    /// [`crate::model::TransformerModel::hash`] of the stored model.
    pub fn model_hash(&mut self) -> Result<String> {
        if let Some(h) = &self.model_hash {
            return Ok(h.clone());
        }
        let io = |e| Error::io(&self.path, e);
        let mut file = BufReader::new(File::open(&self.path).map_err(io)?);
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = file.read(&mut buf).map_err(io)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let h = hex::encode(hasher.finalize());
        self.model_hash = Some(h.clone());
        Ok(h)
    }

    /// Evicts the blocks in `omission`, then loads every missing survivor.
    pub fn prepare(&mut self, omission: &OmissionSet) -> Result<LoadDelta> {
        let d = self.layout.config.n_blocks;
        omission.validate(d)?;
        let survivors = omission.survivors(d);
        if let Some(cap) = self.cap {
            if survivors.len() > cap {
                return Err(Error::InvalidArgument(format!(
                    "{} surviving blocks exceed the residency cap of {cap}",
                    survivors.len()
                )));
            }
        }
        let evicted: Vec<usize> = omission
            .indices()
            .iter()
            .copied()
            .filter(|b| self.resident.remove(b).is_some())
            .collect();
        let missing: Vec<usize> = survivors
            .into_iter()
            .filter(|b| !self.resident.contains_key(b))
            .collect();
        let mut delta = LoadDelta {
            evicted,
            ..LoadDelta::default()
        };
        if missing.is_empty() {
            return Ok(delta);
        }
        let file = File::open(&self.path).map_err(|e| Error::BlockLoad {
            block: missing[0],
            source: e,
        })?;
        let mut reader = BufReader::new(file);
        for b in missing {
            let (offset, size) = self.layout.block_range(b);
            let block = reader
                .seek(SeekFrom::Start(offset))
                .and_then(|_| TensorReader::new(&mut reader).block(&self.layout.config, b))
                .map_err(|e| Error::BlockLoad { block: b, source: e })?;
            self.resident.insert(b, block);
            self.peak_resident = self.peak_resident.max(self.resident.len());
            self.bytes_transferred_total += size;
            delta.bytes += size;
            delta.loaded.push(b);
        }
        Ok(delta)
    }

    /// View over the resident survivors of `omission`.
    pub fn view(&self, omission: &OmissionSet) -> Result<PrunedView<'_>> {
        let d = self.layout.config.n_blocks;
        omission.validate(d)?;
        let blocks = omission
            .survivors(d)
            .into_iter()
            .map(|b| {
                self.resident
                    .get(&b)
                    .ok_or_else(|| Error::InvalidArgument(format!("block {b} is not resident")))
            })
            .collect::<Result<Vec<_>>>()?;
        PrunedView::from_parts(&self.layout.config, &self.globals, blocks)
    }
}

/// What happened during one [`run_inference`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub routed_index: usize,
    pub omission_set: OmissionSet,
    pub blocks_loaded: Vec<usize>,
    pub bytes_loaded: u64,
    pub tokens_generated: usize,
    pub timings: StageTimings,
}

/// Wall-clock stage durations in milliseconds, rounded to whole microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub router_ms: f64,
    pub load_ms: f64,
    /// Time to first token.
    pub prefill_ms: f64,
    pub generation_ms: f64,
}

pub(crate) fn millis(d: Duration) -> f64 {
    (d.as_secs_f64() * 1e6).round() / 1e3
}

/// Routes `prompt` once, brings the chosen set's survivors into the store
/// and greedily decodes up to `max_new` tokens.
pub fn run_inference(
    store: &mut BlockStore,
    router: &RouterModel,
    pool: &CandidatePool,
    prompt: &TokenSequence,
    max_new: usize,
) -> Result<(TokenSequence, InferenceReport)> {
    if pool.model_hash != store.model_hash()? {
        return Err(Error::PoolBinding {
            expected: pool.model_hash.clone(),
            actual: store.model_hash()?,
        });
    }
    prompt.validate(store.config().vocab_size)?;

    let t = Instant::now();
    let routed = route(router, prompt, pool)?;
    let router_ms = millis(t.elapsed());

    let t = Instant::now();
    let delta = store.prepare(&routed.set)?;
    let load_ms = millis(t.elapsed());

    let view = store.view(&routed.set)?;
    let mut out = prompt.clone();
    let (mut prefill_ms, mut generation_ms) = (0.0, 0.0);
    if max_new > 0 {
        let mut generator = Generator::new(&view);
        let t = Instant::now();
        let mut next = generator.prefill(prompt)?;
        prefill_ms = millis(t.elapsed());
        out.push(next);
        let t = Instant::now();
        for _ in 1..max_new {
            if !generator.has_room() {
                break;
            }
            next = generator.step(next)?;
            out.push(next);
        }
        generation_ms = millis(t.elapsed());
    }
    let report = InferenceReport {
        routed_index: routed.index,
        omission_set: routed.set,
        blocks_loaded: delta.loaded,
        bytes_loaded: delta.bytes,
        tokens_generated: out.len() - prompt.len(),
        timings: StageTimings {
            router_ms,
            load_ms,
            prefill_ms,
            generation_ms,
        },
    };
    Ok((out, report))
}
