//! Hand-built fixture in which the best blocks to drop depend on the task.
//!
//! Each of `n_tasks` tasks has its own marker, query, answer, wrong-answer and
//! content tokens. A prompt is `[marker, content.., query]` and the answer is
//! the task's single answer token. Token embeddings are one-hot, so the
//! output head acts as a bigram table, and blocks steer predictions through
//! dedicated residual directions:
//!
//! * block `2a + 1` and `2a + 2` fire on task `a`'s query token and push the
//!   answer prediction toward the wrong answer. Dropping both is optimal for
//!   task `a` and irrelevant for the others.
//! * the last two blocks sharpen every task's answer prediction but blur the
//!   prediction of content tokens. A search that only sees the prompt wants
//!   to drop them, which hurts the answer.
//!
//! Small random perturbations on every weight keep losses tie-free.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{write_pairs, write_prompts};
use crate::error::{Error, Result};
use crate::losses::PromptAnswerPair;
use crate::model::io::write_model;
use crate::model::{GlobalWeights, Matrix, ModelConfig, PositionKind, TransformerBlock, TransformerModel};
use crate::search::CalibrationDataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureParams {
    pub n_tasks: usize,
    pub content_per_task: usize,
    pub d_model: usize,
    /// Residual push toward the wrong answer per harmful block.
    pub harm: f32,
    /// Residual push toward the right answer per helper block.
    pub boost: f32,
    /// Residual push that blurs content predictions per helper block.
    pub blur: f32,
    /// Standard deviation of the random perturbation on all weights.
    pub noise: f32,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            content_per_task: 4,
            d_model: 48,
            harm: 2.5,
            boost: 1.5,
            blur: 2.0,
            noise: 0.01,
        }
    }
}

/// Token ids of the fixture vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub n_tasks: usize,
    pub content_per_task: usize,
}

impl Vocab {
    pub fn marker(&self, task: usize) -> u32 {
        1 + task as u32
    }
    pub fn query(&self, task: usize) -> u32 {
        1 + (self.n_tasks + task) as u32
    }
    pub fn answer(&self, task: usize) -> u32 {
        1 + (2 * self.n_tasks + task) as u32
    }
    pub fn wrong(&self, task: usize) -> u32 {
        1 + (3 * self.n_tasks + task) as u32
    }
    pub fn content(&self, task: usize, i: usize) -> u32 {
        1 + (4 * self.n_tasks + task * self.content_per_task + i) as u32
    }
    pub fn size(&self) -> usize {
        1 + 4 * self.n_tasks + self.n_tasks * self.content_per_task
    }
}

#[derive(Debug, Clone)]
pub struct TaskFixture {
    pub model: TransformerModel,
    pub vocab: Vocab,
    pub params: FixtureParams,
}

impl TaskFixture {
    pub fn build(params: FixtureParams, seed: u64) -> Self {
        let vocab = Vocab {
            n_tasks: params.n_tasks,
            content_per_task: params.content_per_task,
        };
        let v = vocab.size();
        let n = params.n_tasks;
        let d = params.d_model;
        assert!(d > v + 2 * n, "d_model too small for the fixture vocabulary");
        let confuse_dim = |a: usize| v + a;
        let boost_dim = |a: usize| v + n + a;
        let blur_dim = v + 2 * n;

        let cfg = ModelConfig {
            vocab_size: v,
            d_model: d,
            d_ff: 2 * d,
            n_blocks: 2 * n + 2,
            n_heads: 2,
            position: PositionKind::Learned,
            max_positions: 64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = params.noise;
        let jitter = |m: &mut Matrix, rng: &mut ChaCha8Rng| {
            for x in m.data.iter_mut() {
                *x += rng.random_range(-noise..noise) * 1.7;
            }
        };

        let mut token_embedding = Matrix::zeros(v, d);
        for t in 0..v {
            token_embedding.set(t, t, 1.0);
        }
        jitter(&mut token_embedding, &mut rng);
        let mut position_embedding = Matrix::zeros(cfg.max_positions, d);
        jitter(&mut position_embedding, &mut rng);

        // A one-hot residual normalizes to sqrt(d) in its active coordinate.
        let unit = 1.0 / (d as f32).sqrt();
        let mut head = Matrix::zeros(d, v);
        for a in 0..n {
            let c = params.content_per_task;
            for i in 0..c {
                head.set(vocab.marker(a) as usize, vocab.content(a, i) as usize, 1.5 * unit);
                let from = vocab.content(a, i) as usize;
                for j in 0..c {
                    let w = if j == (i + 1) % c { 3.0 } else { 1.5 };
                    head.set(from, vocab.content(a, j) as usize, w * unit);
                }
                head.set(from, vocab.query(a) as usize, 1.0 * unit);
            }
            head.set(vocab.query(a) as usize, vocab.answer(a) as usize, 3.0 * unit);
            head.set(vocab.query(a) as usize, vocab.wrong(a) as usize, 1.0 * unit);
            head.set(confuse_dim(a), vocab.wrong(a) as usize, 3.0 * unit);
            head.set(confuse_dim(a), vocab.answer(a) as usize, -unit);
            head.set(boost_dim(a), vocab.answer(a) as usize, 3.0 * unit);
            head.set(boost_dim(a), vocab.wrong(a) as usize, -unit);
        }
        head.set(blur_dim, 0, 4.0 * unit);
        jitter(&mut head, &mut rng);

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for index in 1..=cfg.n_blocks {
            let mut b = TransformerBlock::zeros(&cfg, index);
            for m in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                jitter(m, &mut rng);
            }
            let harmful_for = (index <= 2 * n).then(|| (index - 1) / 2);
            // Each unit reads one token coordinate (about sqrt(d) after the
            // norm) and writes `strength` into one residual direction.
            let wire = |b: &mut TransformerBlock, hidden: usize, reads: &[usize], writes: usize, strength: f32| {
                for &r in reads {
                    b.w_up.set(r, hidden, 1.0);
                }
                b.w_down.set(hidden, writes, strength * unit);
            };
            match harmful_for {
                Some(a) => wire(&mut b, 0, &[vocab.query(a) as usize], confuse_dim(a), params.harm),
                None => {
                    for a in 0..n {
                        wire(&mut b, a, &[vocab.query(a) as usize], boost_dim(a), params.boost);
                    }
                    let content: Vec<usize> = (0..n)
                        .flat_map(|a| (0..params.content_per_task).map(move |i| (a, i)))
                        .map(|(a, i)| vocab.content(a, i) as usize)
                        .collect();
                    wire(&mut b, n, &content, blur_dim, params.blur);
                }
            }
            jitter(&mut b.w_up, &mut rng);
            jitter(&mut b.w_down, &mut rng);
            blocks.push(b);
        }

        let globals = GlobalWeights {
            token_embedding,
            position_embedding: Some(position_embedding),
            final_norm: vec![1.0; d],
            output_head: head,
        };
        let model = TransformerModel::new(cfg, globals, blocks).expect("fixture model is well formed");
        Self { model, vocab, params }
    }

    /// Blocks whose removal is best for `task`.
    pub fn optimal_omission(&self, task: usize) -> [usize; 2] {
        [2 * task + 1, 2 * task + 2]
    }

    pub fn n_tasks(&self) -> usize {
        self.params.n_tasks
    }

    /// One prompt-answer pair for `task`: a random walk over the task's content.
    pub fn sample<R: Rng + ?Sized>(&self, task: usize, rng: &mut R) -> PromptAnswerPair {
        let c = self.params.content_per_task;
        let len = rng.random_range(3..=6);
        let mut prompt = vec![self.vocab.marker(task)];
        let mut i = rng.random_range(0..c);
        for _ in 0..len {
            prompt.push(self.vocab.content(task, i));
            i = if rng.random_bool(0.7) {
                (i + 1) % c
            } else {
                rng.random_range(0..c)
            };
        }
        prompt.push(self.vocab.query(task));
        PromptAnswerPair::new(&prompt, &[self.vocab.answer(task)], vec![vec![self.vocab.wrong(task)]])
            .expect("non-empty answer")
    }

    pub fn task_pairs(&self, task: usize, count: usize, seed: u64) -> Vec<PromptAnswerPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 * (task as u64 + 1)));
        (0..count).map(|_| self.sample(task, &mut rng)).collect()
    }

    pub fn task_name(task: usize) -> String {
        format!("task-{task}")
    }

    /// One calibration dataset per task.
    pub fn calibration_sets(&self, count: usize, seed: u64) -> Result<Vec<CalibrationDataset>> {
        (0..self.n_tasks())
            .map(|t| CalibrationDataset::new(Self::task_name(t), self.task_pairs(t, count, seed)))
            .collect()
    }
}

/// Files written by [`TaskFixture::write_bundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub config: PathBuf,
    pub model: PathBuf,
}

const CALIBRATION_PAIRS: usize = 48;
const TRAIN_PAIRS: usize = 96;
const EVAL_PAIRS: usize = 32;
const PROMPTS_PER_TASK: usize = 4;

impl TaskFixture {
    /// Writes the model, calibration/train/eval pairs, a prompt file and a
    /// ready-to-run `pudding.toml` into `dir`.
    pub fn write_bundle(&self, dir: &Path, seed: u64) -> Result<Bundle> {
        let data = dir.join("data");
        std::fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
        let model = dir.join("model.pudw");
        write_model(&self.model, &model)?;

        let mut toml = String::from(
            "model = \"model.pudw\"\nk = 2\ncriteria = [\"tl\", \"tld\"]\ncalibration_samples = 48\nseed = 0\nout = \"out\"\n",
        );
        let mut prompts = Vec::new();
        for (kind, count, salt) in [
            ("task", CALIBRATION_PAIRS, 1),
            ("train", TRAIN_PAIRS, 2),
            ("eval", EVAL_PAIRS, 3),
        ] {
            let section = match kind {
                "task" => "datasets",
                "train" => "train_datasets",
                _ => "bench.eval",
            };
            for t in 0..self.n_tasks() {
                let pairs = self.task_pairs(t, count, seed.wrapping_mul(31).wrapping_add(salt));
                let file = format!("data/{kind}-{t}.jsonl");
                write_pairs(&pairs, &dir.join(&file))?;
                toml.push_str(&format!(
                    "\n[[{section}]]\nname = \"{}\"\npath = \"{file}\"\n",
                    Self::task_name(t)
                ));
                if kind == "eval" {
                    prompts.extend(pairs.iter().take(PROMPTS_PER_TASK).map(|p| p.prompt_sequence()));
                }
            }
        }
        let prompts = prompts.into_iter().collect::<Result<Vec<_>>>()?;
        write_prompts(&prompts, &dir.join("prompts.jsonl"))?;
        toml.push_str(
            "
[router]
embed_dim = 8
encoder = \"mean-pool\"
loss_mode = \"mse\"

[train]
learning_rate = 0.02
weight_decay = 0.01
batch_size = 16
epochs = 30
warmup_steps = 20

[infer]
prompts = \"prompts.jsonl\"
max_new = 8

[bench]
pool_sizes = [1, 2, 3, 6]
loss_modes = [\"mse\", \"ce\"]
",
        );
        let config = dir.join("pudding.toml");
        std::fs::write(&config, toml).map_err(|e| Error::io(&config, e))?;
        Ok(Bundle { config, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{dataset_loss, Criterion};
    use crate::model::{apply_omission, OmissionSet};

    #[test]
    fn vocabulary_layout_is_disjoint() {
        let f = TaskFixture::build(FixtureParams::default(), 1);
        let vocab = &f.vocab;
        let mut ids: Vec<u32> = (0..3)
            .flat_map(|t| {
                let mut v = vec![vocab.marker(t), vocab.query(t), vocab.answer(t), vocab.wrong(t)];
                v.extend((0..4).map(|i| vocab.content(t, i)));
                v
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 24);
        assert_eq!(*ids.last().unwrap() as usize, vocab.size() - 1);
        assert_eq!(f.model.n_blocks(), 8);
    }

    #[test]
    fn each_task_prefers_its_own_blocks() {
        let f = TaskFixture::build(FixtureParams::default(), 2);
        for task in 0..3 {
            let pairs = f.task_pairs(task, 16, 5);
            let loss = |set: &[usize]| {
                let view = apply_omission(&f.model, &OmissionSet::new(set.iter().copied()).unwrap()).unwrap();
                dataset_loss(&view, &pairs, Criterion::Tl).unwrap().value
            };
            let own = loss(&f.optimal_omission(task));
            for other in (0..3).filter(|&o| o != task) {
                assert!(own < loss(&f.optimal_omission(other)));
            }
            assert!(own < loss(&[]) && own < loss(&[7, 8]));
        }
    }
}
