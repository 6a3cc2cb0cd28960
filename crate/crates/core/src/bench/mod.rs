//! Experiments over a model, a candidate pool and a trained router:
//! pruning-rate heatmaps, method comparisons and ablations.

mod report;

pub use report::{emit_reports, BenchResults, CsvTable};

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{choice_is_correct, evaluate, Criterion, PromptAnswerPair};
use crate::model::{apply_omission, OmissionSet, TokenSequence, TransformerModel};
use crate::router::{
    argmin, check_binding, route, train_router, LossMode, RouterArch, RouterModel, RouterSample, TrainConfig,
};
use crate::search::{per_prompt_search, CandidatePool};

/// Named evaluation pairs. May be empty, unlike a calibration dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub name: String,
    pub pairs: Vec<PromptAnswerPair>,
}

impl TaskSet {
    pub fn new(name: impl Into<String>, pairs: Vec<PromptAnswerPair>) -> Self {
        Self {
            name: name.into(),
            pairs,
        }
    }
}

/// Hex SHA-256 over task names and every pair's tokens, split and wrong answers.
pub fn eval_set_hash(tasks: &[TaskSet]) -> String {
    let mut h = Sha256::new();
    for t in tasks {
        h.update((t.name.len() as u64).to_le_bytes());
        h.update(t.name.as_bytes());
        h.update((t.pairs.len() as u64).to_le_bytes());
        for p in &t.pairs {
            let mut put = |xs: &[u32]| {
                h.update((xs.len() as u64).to_le_bytes());
                xs.iter().for_each(|x| h.update(x.to_le_bytes()));
            };
            put(p.tokens().tokens());
            put(&[p.split() as u32]);
            for w in p.wrong_answers() {
                put(w.tokens());
            }
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTable {
    pub tasks: Vec<String>,
    pub n_blocks: usize,
    pub k: usize,
    pub prompts: Vec<usize>,
    /// `rates[t][j]` is the fraction of task `t` prompts whose routed set drops block `j + 1`.
    pub rates: Vec<Vec<f64>>,
    /// Tasks left out because they have no prompts.
    pub skipped: Vec<String>,
}

/// Routes every prompt of every task and tallies how often each block is dropped.
pub fn compute_heatmap(
    router: &RouterModel,
    pool: &CandidatePool,
    n_blocks: usize,
    tasks: &[TaskSet],
) -> Result<HeatmapTable> {
    check_binding(router, pool)?;
    let mut table = HeatmapTable {
        tasks: Vec::new(),
        n_blocks,
        k: pool.k,
        prompts: Vec::new(),
        rates: Vec::new(),
        skipped: Vec::new(),
    };
    for task in tasks {
        if task.pairs.is_empty() {
            table.skipped.push(task.name.clone());
            continue;
        }
        let mut counts = vec![0usize; n_blocks];
        for pair in &task.pairs {
            let r = route(router, &pair.prompt_sequence()?, pool)?;
            r.set.validate(n_blocks)?;
            for &b in r.set.indices() {
                counts[b - 1] += 1;
            }
        }
        let n = task.pairs.len() as f64;
        table.tasks.push(task.name.clone());
        table.prompts.push(task.pairs.len());
        table.rates.push(counts.into_iter().map(|c| c as f64 / n).collect());
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dense,
    StaticGlobal,
    StaticPerTask,
    PerPromptGreedy,
    Router,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dense => "dense",
            Method::StaticGlobal => "static-global",
            Method::StaticPerTask => "static-per-task",
            Method::PerPromptGreedy => "per-prompt-greedy",
            Method::Router => "router",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    /// Fixed sets behind the row: none for dense and for per-prompt methods,
    /// one for the global static set, one per task for per-task static sets.
    pub omission: Vec<OmissionSet>,
    pub per_task: Vec<f64>,
    /// Unweighted mean of `per_task`.
    pub average: f64,
    /// Multiple-choice accuracy per task, when every pair carries wrong answers.
    pub accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub criterion: Criterion,
    pub eval_hash: String,
    pub tasks: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// `labels[t][i][j]`: loss of pair `i` of task `t` under pool entry `j`.
pub fn pool_labels(
    model: &TransformerModel,
    pool: &CandidatePool,
    tasks: &[TaskSet],
    criterion: Criterion,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let views = pool
        .sets
        .iter()
        .map(|e| apply_omission(model, &e.blocks))
        .collect::<Result<Vec<_>>>()?;
    tasks
        .iter()
        .map(|task| {
            task.pairs
                .par_iter()
                .enumerate()
                .map(|(index, pair)| {
                    views
                        .iter()
                        .map(|v| evaluate(v, pair, criterion).map(|l| l.value))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| Error::Sample {
                            index,
                            source: Box::new(e),
                        })
                })
                .collect()
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-task means when pair `i` of task `t` uses pool entry `choose(t, i)`.
fn routed_means(labels: &[Vec<Vec<f64>>], choose: impl Fn(usize, usize) -> usize) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(t, rows)| {
            mean(
                &rows
                    .iter()
                    .enumerate()
                    .map(|(i, l)| l[choose(t, i)])
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

/// Pool entry with the lowest unweighted mean over tasks; lowest index on ties.
fn best_global(labels: &[Vec<Vec<f64>>], entries: usize) -> usize {
    let averages: Vec<f64> = (0..entries).map(|j| mean(&routed_means(labels, |_, _| j))).collect();
    argmin(&averages)
}

fn check_tasks(tasks: &[TaskSet]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::EmptyDataset("no evaluation tasks".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.pairs.is_empty()) {
        return Err(Error::EmptyDataset(format!("task {:?} has no pairs", t.name)));
    }
    Ok(())
}

fn accuracy(
    model: &TransformerModel,
    tasks: &[TaskSet],
    set_for: &(dyn Fn(usize, usize) -> OmissionSet + Sync),
) -> Result<Option<Vec<f64>>> {
    if !tasks
        .iter()
        .all(|t| t.pairs.iter().all(|p| !p.wrong_answers().is_empty()))
    {
        return Ok(None);
    }
    tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let hits = task
                .pairs
                .par_iter()
                .enumerate()
                .map(|(i, p)| choice_is_correct(&apply_omission(model, &set_for(t, i))?, p).map(usize::from))
                .collect::<Result<Vec<_>>>()?;
            Ok(hits.iter().sum::<usize>() as f64 / task.pairs.len() as f64)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Evaluates dense, static-global, static-per-task, per-prompt greedy and
/// routed inference on the same pairs, in that order.
///
/// Static sets are picked from the pool by their loss on these pairs. The
/// per-prompt search runs greedy search with `criterion = tl` on the prompt
/// alone, since the answer is unknown when a prompt arrives.
pub fn compare_methods(
    model: &TransformerModel,
    pool: &CandidatePool,
    router: &RouterModel,
    tasks: &[TaskSet],
    criterion: Criterion,
) -> Result<Comparison> {
    check_tasks(tasks)?;
    check_binding(router, pool)?;
    let labels = pool_labels(model, pool, tasks, criterion)?;
    let mut rows = Vec::with_capacity(5);
    let row = |method, omission, per_task: Vec<f64>, accuracy| ComparisonRow {
        method,
        omission,
        average: mean(&per_task),
        per_task,
        accuracy,
    };

    let dense = model.dense_view();
    let dense_loss = tasks
        .iter()
        .map(|t| {
            let losses = t
                .pairs
                .par_iter()
                .map(|p| evaluate(&dense, p, criterion).map(|l| l.value))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean(&losses))
        })
        .collect::<Result<Vec<_>>>()?;
    let acc = accuracy(model, tasks, &|_, _| OmissionSet::empty())?;
    rows.push(row(Method::Dense, vec![], dense_loss, acc));

    let g = best_global(&labels, pool.len());
    let acc = accuracy(model, tasks, &|_, _| pool.set(g).clone())?;
    rows.push(row(
        Method::StaticGlobal,
        vec![pool.set(g).clone()],
        routed_means(&labels, |_, _| g),
        acc,
    ));

    let per_task: Vec<usize> = labels
        .iter()
        .map(|rows| {
            argmin(
                &(0..pool.len())
                    .map(|j| mean(&rows.iter().map(|l| l[j]).collect::<Vec<_>>()))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let acc = accuracy(model, tasks, &|t, _| pool.set(per_task[t]).clone())?;
    rows.push(row(
        Method::StaticPerTask,
        per_task.iter().map(|&j| pool.set(j).clone()).collect(),
        routed_means(&labels, |t, _| per_task[t]),
        acc,
    ));

    let greedy_sets = tasks
        .iter()
        .map(|t| {
            t.pairs
                .par_iter()
                .map(|p| {
                    per_prompt_search(
                        model,
                        &PromptAnswerPair::prompt_only(&p.prompt_sequence()?)?,
                        Criterion::Tl,
                        pool.k,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let greedy_loss = tasks
        .iter()
        .zip(&greedy_sets)
        .map(|(t, sets)| {
            let losses = t
                .pairs
                .par_iter()
                .zip(sets)
                .map(|(p, s)| evaluate(&apply_omission(model, s)?, p, criterion).map(|l| l.value))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean(&losses))
        })
        .collect::<Result<Vec<_>>>()?;
    let acc = accuracy(model, tasks, &|t, i| greedy_sets[t][i].clone())?;
    rows.push(row(Method::PerPromptGreedy, vec![], greedy_loss, acc));

    let routes = route_all(router, pool, tasks)?;
    let acc = accuracy(model, tasks, &|t, i| pool.set(routes[t][i]).clone())?;
    rows.push(row(
        Method::Router,
        vec![],
        routed_means(&labels, |t, i| routes[t][i]),
        acc,
    ));

    Ok(Comparison {
        criterion,
        eval_hash: eval_set_hash(tasks),
        tasks: tasks.iter().map(|t| t.name.clone()).collect(),
        rows,
    })
}

fn route_all(router: &RouterModel, pool: &CandidatePool, tasks: &[TaskSet]) -> Result<Vec<Vec<usize>>> {
    tasks
        .iter()
        .map(|t| {
            t.pairs
                .iter()
                .map(|p| route(router, &p.prompt_sequence()?, pool).map(|r| r.index))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSizeRow {
    pub size: usize,
    /// Positions in the full pool, in selection order.
    pub entries: Vec<usize>,
    pub routed_per_task: Vec<f64>,
    pub routed_average: f64,
    /// Average loss when every pair takes its best entry among `entries`.
    pub oracle_average: f64,
    /// `oracle_average` minus the same quantity over the full pool.
    pub oracle_regret: f64,
    /// `routed_average - oracle_average`.
    pub router_regret: f64,
}

/// Settings for the routers retrained inside an ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterRecipe {
    pub arch: RouterArch,
    pub config: TrainConfig,
    pub loss_mode: LossMode,
}

/// Nested pools grown by best-oracle coverage on the evaluation pairs: the
/// first entry is the best single static set, each further entry most lowers
/// the per-pair best-in-pool average. A router is retrained per size.
///
/// `train` labels must be aligned with the full `pool`.
pub fn ablate_pool_size(
    model: &TransformerModel,
    pool: &CandidatePool,
    train: &[RouterSample],
    tasks: &[TaskSet],
    criterion: Criterion,
    sizes: &[usize],
    recipe: RouterRecipe,
) -> Result<Vec<PoolSizeRow>> {
    check_tasks(tasks)?;
    let m = pool.len();
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > m) {
        return Err(Error::Config(format!("pool size {s} must lie in 1..={m}")));
    }
    if let Some(s) = train.iter().find(|s| s.label.len() != m) {
        return Err(Error::Shape(format!(
            "training label has {} entries, pool has {m}",
            s.label.len()
        )));
    }
    let labels = pool_labels(model, pool, tasks, criterion)?;
    let oracle = |entries: &[usize]| {
        mean(
            &labels
                .iter()
                .map(|rows| {
                    mean(
                        &rows
                            .iter()
                            .map(|l| entries.iter().map(|&j| l[j]).fold(f64::INFINITY, f64::min))
                            .collect::<Vec<_>>(),
                    )
                })
                .collect::<Vec<_>>(),
        )
    };

    let max_size = sizes.iter().copied().max().unwrap_or(0);
    let mut order = Vec::with_capacity(max_size);
    if max_size > 0 {
        order.push(best_global(&labels, m));
    }
    while order.len() < max_size {
        let scores: Vec<f64> = (0..m)
            .map(|j| {
                if order.contains(&j) {
                    f64::INFINITY
                } else {
                    oracle(&[order.as_slice(), &[j]].concat())
                }
            })
            .collect();
        order.push(argmin(&scores));
    }
    let full = oracle(&(0..m).collect::<Vec<_>>());

    sizes
        .iter()
        .map(|&size| {
            let entries = order[..size].to_vec();
            let sub = pool.select(&entries);
            let sub_train: Vec<RouterSample> = train
                .iter()
                .map(|s| RouterSample {
                    prompt_tokens: s.prompt_tokens.clone(),
                    label: entries.iter().map(|&j| s.label[j]).collect(),
                })
                .collect();
            let router = train_router(&sub_train, recipe.arch, recipe.config, recipe.loss_mode, &sub.hash())?.router;
            let routes = route_all(&router, &sub, tasks)?;
            let routed_per_task = routed_means(&labels, |t, i| entries[routes[t][i]]);
            let routed_average = mean(&routed_per_task);
            let oracle_average = oracle(&entries);
            Ok(PoolSizeRow {
                size,
                entries,
                routed_per_task,
                routed_average,
                oracle_average,
                oracle_regret: oracle_average - full,
                router_regret: routed_average - oracle_average,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModeRow {
    pub mode: LossMode,
    /// Training loss of the initialized router.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Smallest loss attainable on these labels.
    pub floor: f64,
    pub converged: bool,
    /// Fraction of training prompts routed to their label minimum.
    pub routing_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Labels identical for every prompt and distinct across entries.
pub fn constant_target_samples(vocab: usize, target: &[f64], n: usize, seed: u64) -> Vec<RouterSample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=6);
            RouterSample {
                prompt_tokens: TokenSequence::new((0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
                    .expect("non-empty"),
                label: target.to_vec(),
            }
        })
        .collect()
}

fn loss_floor(mode: LossMode, samples: &[RouterSample]) -> f64 {
    match mode {
        LossMode::Mse | LossMode::CeOnehot => 0.0,
        LossMode::Ce => mean(
            &samples
                .iter()
                .map(|s| {
                    let min = s.label.iter().copied().fold(f64::INFINITY, f64::min);
                    let z: f64 = s.label.iter().map(|l| (min - l).exp()).sum();
                    -s.label
                        .iter()
                        .map(|l| {
                            let q = (min - l).exp() / z;
                            q * q.ln()
                        })
                        .sum::<f64>()
                })
                .collect::<Vec<_>>(),
        ),
    }
}

/// Trains one router per loss mode on the same samples. A mode converges when
/// it closes at least 90% of the gap between its initial loss and the floor
/// and routes every training prompt to the label minimum.
pub fn ablate_loss_mode(
    samples: &[RouterSample],
    arch: RouterArch,
    config: TrainConfig,
    modes: &[LossMode],
) -> Result<Vec<LossModeRow>> {
    modes
        .iter()
        .map(|&mode| {
            let init = train_router(samples, arch, TrainConfig { epochs: 0, ..config }, mode, "ablation")?;
            let out = train_router(samples, arch, config, mode, "ablation")?;
            let floor = loss_floor(mode, samples);
            let mut hits = 0usize;
            for s in samples {
                if s.label[argmin(&out.router.predict(&s.prompt_tokens)?)] == s.label[argmin(&s.label)] {
                    hits += 1;
                }
            }
            let routing_accuracy = hits as f64 / samples.len() as f64;
            let initial_loss = init.router.final_train_loss;
            let final_loss = out.router.final_train_loss;
            Ok(LossModeRow {
                mode,
                initial_loss,
                final_loss,
                floor,
                converged: final_loss - floor <= 0.1 * (initial_loss - floor) && routing_accuracy == 1.0,
                routing_accuracy,
                epoch_losses: out.epoch_losses,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::EncoderKind;
    use crate::synthetic::{FixtureParams, TaskFixture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture_tasks(f: &TaskFixture, n: usize, seed: u64) -> Vec<TaskSet> {
        (0..f.n_tasks())
            .map(|t| TaskSet::new(TaskFixture::task_name(t), f.task_pairs(t, n, seed)))
            .collect()
    }

    fn untrained(pool: &CandidatePool, vocab: usize) -> RouterModel {
        RouterModel::init(
            RouterArch::new(vocab, 4, EncoderKind::MeanPool),
            pool.len(),
            pool.hash(),
            TrainConfig::default(),
            LossMode::Mse,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    #[test]
    fn single_entry_heatmap_is_an_indicator() {
        let f = TaskFixture::build(FixtureParams::default(), 1);
        let pool = CandidatePool::from_sets(2, f.model.hash(), vec![OmissionSet::new([3, 7]).unwrap()]).unwrap();
        let router = untrained(&pool, f.vocab.size());
        let mut tasks = fixture_tasks(&f, 5, 2);
        tasks.push(TaskSet::new("empty", vec![]));
        let h = compute_heatmap(&router, &pool, 8, &tasks).unwrap();
        assert_eq!(h.skipped, vec!["empty".to_string()]);
        for row in &h.rates {
            let expect: Vec<f64> = (1..=8).map(|j| if j == 3 || j == 7 { 1.0 } else { 0.0 }).collect();
            assert_eq!(row, &expect);
            assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_choices_beat_fixed_sets_on_the_fixture() {
        let f = TaskFixture::build(FixtureParams::default(), 1);
        let sets = (0..3)
            .map(|t| OmissionSet::new(f.optimal_omission(t)).unwrap())
            .collect();
        let pool = CandidatePool::from_sets(2, f.model.hash(), sets).unwrap();
        let tasks = fixture_tasks(&f, 6, 3);
        let c = compare_methods(
            &f.model,
            &pool,
            &untrained(&pool, f.vocab.size()),
            &tasks,
            Criterion::Tl,
        )
        .unwrap();
        let methods: Vec<Method> = c.rows.iter().map(|r| r.method).collect();
        assert_eq!(
            methods,
            [
                Method::Dense,
                Method::StaticGlobal,
                Method::StaticPerTask,
                Method::PerPromptGreedy,
                Method::Router
            ]
        );
        assert!(c.rows[0].omission.is_empty());
        assert_eq!(
            c.rows[2].omission,
            pool.sets.iter().map(|e| e.blocks.clone()).collect::<Vec<_>>()
        );
        assert!(c.rows[2].average < c.rows[1].average);
        assert!(c.rows.iter().all(|r| r.accuracy.as_ref().is_some_and(|a| a.len() == 3)));
        assert_eq!(c.eval_hash, eval_set_hash(&tasks));
    }

    #[test]
    fn pool_size_one_is_static_global_and_oracle_regret_shrinks() {
        let f = TaskFixture::build(FixtureParams::default(), 1);
        let mut sets: Vec<OmissionSet> = (0..3)
            .map(|t| OmissionSet::new(f.optimal_omission(t)).unwrap())
            .collect();
        sets.push(OmissionSet::new([7, 8]).unwrap());
        let pool = CandidatePool::from_sets(2, f.model.hash(), sets).unwrap();
        let tasks = fixture_tasks(&f, 6, 3);
        let pairs: Vec<PromptAnswerPair> = tasks.iter().flat_map(|t| t.pairs.clone()).collect();
        let train = crate::router::build_router_dataset(&f.model, &pool, &pairs, Criterion::Tl).unwrap();
        let recipe = RouterRecipe {
            arch: RouterArch::new(f.vocab.size(), 4, EncoderKind::MeanPool),
            config: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            loss_mode: LossMode::Mse,
        };
        let rows = ablate_pool_size(&f.model, &pool, &train, &tasks, Criterion::Tl, &[1, 2, 3, 4], recipe).unwrap();
        let c = compare_methods(
            &f.model,
            &pool,
            &untrained(&pool, f.vocab.size()),
            &tasks,
            Criterion::Tl,
        )
        .unwrap();
        assert_eq!(rows[0].routed_average, c.rows[1].average);
        assert_eq!(rows[0].routed_per_task, c.rows[1].per_task);
        assert!(rows.windows(2).all(|w| w[1].oracle_regret <= w[0].oracle_regret));
        assert_eq!(rows[3].oracle_regret, 0.0);
        assert!(matches!(
            ablate_pool_size(&f.model, &pool, &train, &tasks, Criterion::Tl, &[5], recipe),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_hash_sees_every_token() {
        let a = TaskSet::new("t", vec![PromptAnswerPair::new(&[1, 2], &[3], vec![]).unwrap()]);
        let b = TaskSet::new("t", vec![PromptAnswerPair::new(&[1], &[2, 3], vec![]).unwrap()]);
        assert_ne!(eval_set_hash(std::slice::from_ref(&a)), eval_set_hash(&[b]));
        assert_eq!(eval_set_hash(std::slice::from_ref(&a)), eval_set_hash(&[a]));
    }
}
