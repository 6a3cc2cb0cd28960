use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{millis, BlockStore};
use crate::error::{Error, Result};
use crate::model::{Generator, OmissionSet, PrunedView, TokenSequence};
use crate::router::{route, RouterModel};
use crate::search::CandidatePool;

pub const MIN_REPETITIONS: usize = 5;

/// Median timings for all workload prompts of one length at one generation length.
/// Compute times exclude block loading; the router call is its own line item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupCell {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub prompts: usize,
    pub dense_prefill_ms: f64,
    pub routed_prefill_ms: f64,
    pub dense_ms: f64,
    pub routed_ms: f64,
    pub router_ms: f64,
    /// `dense_ms / routed_ms`.
    pub ratio: f64,
    /// `dense_ms / (routed_ms + router_ms)`.
    pub ratio_with_router: f64,
}

fn timed_decode(view: &PrunedView<'_>, prompt: &TokenSequence, gen_len: usize) -> Result<(Duration, Duration)> {
    let start = Instant::now();
    let mut generator = Generator::new(view);
    let mut next = generator.prefill(prompt)?;
    let prefill = start.elapsed();
    for _ in 1..gen_len {
        if !generator.has_room() {
            break;
        }
        next = generator.step(next)?;
    }
    std::hint::black_box(next);
    Ok((prefill, start.elapsed()))
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Times dense against routed decoding for every (prompt length, generation
/// length) cell, taking medians over `repetitions` runs.
pub fn measure_speedup(
    dense: &mut BlockStore,
    routed: &mut BlockStore,
    router: &RouterModel,
    pool: &CandidatePool,
    workload: &[TokenSequence],
    gen_lengths: &[usize],
    repetitions: usize,
) -> Result<Vec<SpeedupCell>> {
    if workload.is_empty() {
        return Err(Error::EmptyDataset("empty workload".into()));
    }
    if gen_lengths.is_empty() || gen_lengths.contains(&0) {
        return Err(Error::InvalidArgument("generation lengths must be positive".into()));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_REPETITIONS} repetitions required, got {repetitions}"
        )));
    }
    let hash = dense.model_hash()?;
    if routed.model_hash()? != hash {
        return Err(Error::InvalidArgument(
            "dense and routed stores hold different models".into(),
        ));
    }
    if pool.model_hash != hash {
        return Err(Error::PoolBinding {
            expected: pool.model_hash.clone(),
            actual: hash,
        });
    }

    let mut groups: BTreeMap<usize, Vec<&TokenSequence>> = BTreeMap::new();
    for p in workload {
        groups.entry(p.len()).or_default().push(p);
    }
    let sets: Vec<OmissionSet> = workload
        .iter()
        .map(|p| route(router, p, pool).map(|r| r.set))
        .collect::<Result<_>>()?;
    let set_of = |p: &TokenSequence| {
        let i = workload
            .iter()
            .position(|q| std::ptr::eq(q, p))
            .expect("prompt from workload");
        &sets[i]
    };

    dense.prepare(&OmissionSet::empty())?;
    let mut cells = Vec::new();
    for &gen_len in gen_lengths {
        for (&prompt_len, prompts) in &groups {
            let mut samples: [Vec<Duration>; 5] = Default::default();
            for _ in 0..repetitions {
                let t = Instant::now();
                for p in prompts {
                    std::hint::black_box(route(router, p, pool)?);
                }
                samples[4].push(t.elapsed());

                let (mut dp, mut dt, mut rp, mut rt) = Default::default();
                let view = dense.view(&OmissionSet::empty())?;
                for p in prompts {
                    let (a, b) = timed_decode(&view, p, gen_len)?;
                    dp += a;
                    dt += b;
                }
                for p in prompts {
                    let set = set_of(p);
                    routed.prepare(set)?;
                    let (a, b) = timed_decode(&routed.view(set)?, p, gen_len)?;
                    rp += a;
                    rt += b;
                }
                for (s, v) in samples.iter_mut().zip([dp, dt, rp, rt]) {
                    s.push(v);
                }
            }
            let [dp, dt, rp, rt, rr] = samples.map(median);
            let (dense_ms, routed_ms, router_ms) = (millis(dt), millis(rt), millis(rr));
            cells.push(SpeedupCell {
                prompt_len,
                gen_len,
                prompts: prompts.len(),
                dense_prefill_ms: millis(dp),
                routed_prefill_ms: millis(rp),
                dense_ms,
                routed_ms,
                router_ms,
                ratio: dt.as_secs_f64() / rt.as_secs_f64().max(1e-12),
                ratio_with_router: dt.as_secs_f64() / (rt + rr).as_secs_f64().max(1e-12),
            });
        }
    }
    Ok(cells)
}
