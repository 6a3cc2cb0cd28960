//! The `pudding` command line.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 algorithmic
//! failure, 4 I/O or file-format error.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{
    ablate_loss_mode, ablate_pool_size, compare_methods, compute_heatmap, emit_reports, BenchResults, RouterRecipe,
    TaskSet,
};
use crate::config::{require_file, DatasetRef, RunConfig};
use crate::data::{read_pairs, read_prompts};
use crate::error::{Error, Result};
use crate::losses::{Criterion, PromptAnswerPair};
use crate::model::io::{read_header, read_model};
use crate::model::tokenizer::Tokenizer;
use crate::model::{ModelConfig, OmissionSet, TokenSequence};
use crate::pipeline::{measure_speedup, run_inference, BlockStore};
use crate::router::{
    build_router_dataset, check_binding, evaluate_router, read_checkpoint, read_jsonl, split_samples, train_router,
    write_checkpoint, write_jsonl, LossMode, RouterArch,
};
use crate::search::{generate_pool, CalibrationDataset, CandidatePool, SearchOptions};
use crate::synthetic::{FixtureParams, TaskFixture};

#[derive(Debug, Parser)]
#[command(name = "pudding", version, about = "Prompt-routed dynamic depth pruning")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration (default: ./pudding.toml).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Validate the configuration and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Greedy omission-set search per (dataset, criterion); writes the pool.
    Search {
        #[arg(long)]
        k: Option<usize>,
        /// Criteria; repeat or separate with commas.
        #[arg(long, value_delimiter = ',')]
        criterion: Vec<Criterion>,
        /// Follow the greedy pass with single-block swap refinement.
        #[arg(long)]
        two_pass: bool,
    },
    /// Label every training pair with its loss under each pool entry.
    BuildDataset {
        /// Label criterion.
        #[arg(long)]
        criterion: Option<Criterion>,
    },
    /// Train the router on the labelled dataset; writes the checkpoint.
    Train {
        #[arg(long)]
        loss_mode: Option<LossMode>,
    },
    /// Route and decode every prompt; writes report JSONL.
    Infer {
        /// Prompt JSONL (default: `infer.prompts` from the config).
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Heatmap, method comparison, ablations and speedup measurement.
    Bench {
        /// Evaluation criterion for comparisons and ablations.
        #[arg(long, default_value = "tl")]
        criterion: Criterion,
        /// Pool sizes for the pool-size ablation.
        #[arg(long, value_delimiter = ',')]
        pool_size: Vec<usize>,
        /// Training losses for the loss-mode ablation.
        #[arg(long, value_delimiter = ',')]
        loss_mode: Vec<LossMode>,
        /// Also time dense against routed decoding.
        #[arg(long)]
        speedup: bool,
    },
    /// Write the bundled synthetic task fixture (model, data, config).
    Fixture,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // A global pool can only be installed once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Fixture = cli.command {
        return cmd_fixture(&cli.global);
    }
    let path = cli
        .global
        .config
        .clone()
        .unwrap_or_else(|| PathBuf::from("pudding.toml"));
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.global.out {
        cfg.out = out.clone();
    }
    cfg.train.seed = cfg.stream_seed("train");
    let dry = cli.global.dry_run;
    match cli.command {
        Command::Search { k, criterion, two_pass } => {
            if let Some(k) = k {
                cfg.k = k;
            }
            if !criterion.is_empty() {
                cfg.criteria = criterion;
            }
            cfg.two_pass |= two_pass;
            cmd_search(&cfg, dry)
        }
        Command::BuildDataset { criterion } => {
            if let Some(c) = criterion {
                cfg.router.label_criterion = c;
            }
            cmd_build_dataset(&cfg, dry)
        }
        Command::Train { loss_mode } => {
            if let Some(m) = loss_mode {
                cfg.router.loss_mode = m;
            }
            cmd_train(&cfg, dry)
        }
        Command::Infer { prompts, max_new } => {
            if prompts.is_some() {
                cfg.infer.prompts = prompts;
            }
            if let Some(n) = max_new {
                cfg.infer.max_new = n;
            }
            cmd_infer(&cfg, dry)
        }
        Command::Bench {
            criterion,
            pool_size,
            loss_mode,
            speedup,
        } => {
            if !pool_size.is_empty() {
                cfg.bench.pool_sizes = pool_size;
            }
            if !loss_mode.is_empty() {
                cfg.bench.loss_modes = loss_mode;
            }
            cfg.bench.speedup |= speedup;
            cmd_bench(&cfg, criterion, dry)
        }
        Command::Fixture => unreachable!("handled above"),
    }
}

fn model_header(path: &Path) -> Result<ModelConfig> {
    require_file(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(file))
}

fn check_k(cfg: &RunConfig, model: &ModelConfig) -> Result<()> {
    if cfg.k >= model.n_blocks {
        return Err(Error::InvalidK {
            k: cfg.k,
            max: model.n_blocks - 1,
        });
    }
    Ok(())
}

fn load_sets(refs: &[DatasetRef], tokenizer: &Tokenizer, what: &str) -> Result<Vec<(String, Vec<PromptAnswerPair>)>> {
    if refs.is_empty() {
        return Err(Error::Config(format!("no {what} datasets configured")));
    }
    refs.iter().try_for_each(|d| require_file(&d.path))?;
    refs.iter()
        .map(|d| Ok((d.name.clone(), read_pairs(&d.path, tokenizer)?)))
        .collect()
}

fn create_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

fn plan(step: &str, inputs: &[&Path], outputs: &[&Path]) {
    println!("plan: {step}");
    for p in inputs {
        println!("  read  {}", p.display());
    }
    for p in outputs {
        println!("  write {}", p.display());
    }
}

fn cmd_search(cfg: &RunConfig, dry: bool) -> Result<()> {
    let header = model_header(&cfg.model)?;
    check_k(cfg, &header)?;
    if cfg.criteria.is_empty() {
        return Err(Error::Config("no criteria configured".into()));
    }
    let tokenizer = cfg.tokenizer()?;
    cfg.datasets.iter().try_for_each(|d| require_file(&d.path))?;
    let pool_path = cfg.pool_path();
    if dry {
        let inputs: Vec<&Path> = std::iter::once(cfg.model.as_path())
            .chain(cfg.datasets.iter().map(|d| d.path.as_path()))
            .collect();
        plan(
            &format!(
                "search k={} over {} datasets x {} criteria",
                cfg.k,
                cfg.datasets.len(),
                cfg.criteria.len()
            ),
            &inputs,
            &[&pool_path],
        );
        return Ok(());
    }
    let model = read_model(&cfg.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed("search"));
    let datasets = load_sets(&cfg.datasets, &tokenizer, "calibration")?
        .into_iter()
        .map(|(name, pairs)| Ok(CalibrationDataset::new(name, pairs)?.subsample(cfg.calibration_samples, &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let options = SearchOptions { two_pass: cfg.two_pass };
    let pool = generate_pool(&model, &datasets, &cfg.criteria, cfg.k, options)?;
    create_out(cfg)?;
    pool.write(&pool_path)?;
    println!(
        "{:>5}  {:<16} {:<9} {:<20} loss",
        "entry", "dataset", "criterion", "omitted"
    );
    for (i, e) in pool.sets.iter().enumerate() {
        println!(
            "{i:>5}  {:<16} {:<9} {:<20} {:.6}",
            e.dataset,
            e.criterion.to_string(),
            e.blocks.to_string(),
            e.loss
        );
    }
    println!("wrote {} ({} sets)", pool_path.display(), pool.len());
    Ok(())
}

fn cmd_build_dataset(cfg: &RunConfig, dry: bool) -> Result<()> {
    model_header(&cfg.model)?;
    let pool_path = cfg.pool_path();
    require_file(&pool_path)?;
    let tokenizer = cfg.tokenizer()?;
    let sets = cfg.train_sets();
    sets.iter().try_for_each(|d| require_file(&d.path))?;
    let out = cfg.router_dataset_path();
    if dry {
        let inputs: Vec<&Path> = [cfg.model.as_path(), pool_path.as_path()]
            .into_iter()
            .chain(sets.iter().map(|d| d.path.as_path()))
            .collect();
        plan(
            &format!("label pairs with {} under every pool entry", cfg.router.label_criterion),
            &inputs,
            &[&out],
        );
        return Ok(());
    }
    let model = read_model(&cfg.model)?;
    let pool = CandidatePool::read(&pool_path)?;
    pool.check_model(&model)?;
    let pairs: Vec<PromptAnswerPair> = load_sets(sets, &tokenizer, "training")?
        .into_iter()
        .flat_map(|(_, p)| p)
        .collect();
    let samples = build_router_dataset(&model, &pool, &pairs, cfg.router.label_criterion)?;
    create_out(cfg)?;
    write_jsonl(&samples, &out)?;
    println!(
        "wrote {} ({} samples x {} labels)",
        out.display(),
        samples.len(),
        pool.len()
    );
    Ok(())
}

fn router_arch(cfg: &RunConfig, header: &ModelConfig) -> RouterArch {
    RouterArch {
        vocab_size: header.vocab_size,
        embed_dim: cfg.router.embed_dim,
        encoder: cfg.router.encoder,
        max_prompt_len: cfg.router.max_prompt_len,
    }
}

fn cmd_train(cfg: &RunConfig, dry: bool) -> Result<()> {
    let header = model_header(&cfg.model)?;
    let data_path = cfg.router_dataset_path();
    let pool_path = cfg.pool_path();
    require_file(&data_path)?;
    require_file(&pool_path)?;
    cfg.train.validate()?;
    if !(0.0..1.0).contains(&cfg.router.validation_fraction) {
        return Err(Error::Config("router.validation_fraction must lie in [0, 1)".into()));
    }
    let out = cfg.router_checkpoint_path();
    if dry {
        plan(
            &format!(
                "train {:?} router, {:?} loss, {} epochs",
                cfg.router.encoder, cfg.router.loss_mode, cfg.train.epochs
            ),
            &[&data_path, &pool_path],
            &[&out],
        );
        return Ok(());
    }
    let pool = CandidatePool::read(&pool_path)?;
    let samples = read_jsonl(&data_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed("split"));
    let (train, validation) = split_samples(&samples, cfg.router.validation_fraction, &mut rng);
    if cfg.train.epochs == 0 {
        eprintln!("warning: epochs = 0, writing the initialized router");
    }
    let outcome = train_router(
        &train,
        router_arch(cfg, &header),
        cfg.train,
        cfg.router.loss_mode,
        &pool.hash(),
    )?;
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.6}", i + 1);
    }
    println!("final train loss {:.6}", outcome.router.final_train_loss);
    if !validation.is_empty() {
        let m = evaluate_router(&outcome.router, &validation)?;
        println!(
            "validation: {} samples, accuracy {:.4}, regret {:.6}, mse {:.6}",
            m.samples, m.accuracy, m.regret, m.mse
        );
    }
    create_out(cfg)?;
    write_checkpoint(&outcome.router, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct InferLine<'a> {
    index: usize,
    prompt: &'a [u32],
    generated: &'a [u32],
    routed_index: usize,
    omission_set: &'a OmissionSet,
    blocks_loaded: &'a [usize],
    bytes_loaded: u64,
    tokens_generated: usize,
}

#[derive(Serialize)]
struct TimingLine {
    index: usize,
    #[serde(flatten)]
    timings: crate::pipeline::StageTimings,
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Deterministic per-prompt results go to `infer_report.jsonl`; wall-clock
/// stage timings go to `infer_timings.jsonl`.
fn cmd_infer(cfg: &RunConfig, dry: bool) -> Result<()> {
    let header = model_header(&cfg.model)?;
    check_k(cfg, &header)?;
    let pool_path = cfg.pool_path();
    let ckpt = cfg.router_checkpoint_path();
    require_file(&pool_path)?;
    require_file(&ckpt)?;
    let prompts_path = cfg
        .infer
        .prompts
        .clone()
        .ok_or_else(|| Error::Config("no prompt file: set infer.prompts or pass --prompts".into()))?;
    require_file(&prompts_path)?;
    let tokenizer = cfg.tokenizer()?;
    let report_path = cfg.out.join("infer_report.jsonl");
    let timing_path = cfg.out.join("infer_timings.jsonl");
    if dry {
        plan(
            &format!("route and decode up to {} tokens per prompt", cfg.infer.max_new),
            &[&cfg.model, &pool_path, &ckpt, &prompts_path],
            &[&report_path, &timing_path],
        );
        return Ok(());
    }
    let pool = CandidatePool::read(&pool_path)?;
    if pool.k != cfg.k {
        return Err(Error::Config(format!(
            "pool has k = {}, config has k = {}",
            pool.k, cfg.k
        )));
    }
    let router = read_checkpoint(&ckpt)?;
    check_binding(&router, &pool)?;
    let prompts: Vec<TokenSequence> = read_prompts(&prompts_path, &tokenizer)?;
    let mut store = BlockStore::open(&cfg.model)?.with_cap(header.n_blocks - cfg.k);
    let mut outputs = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let (out, report) = run_inference(&mut store, &router, &pool, p, cfg.infer.max_new)?;
        println!(
            "prompt {i}: set {} ({} blocks loaded), {} tokens",
            report.omission_set,
            report.blocks_loaded.len(),
            report.tokens_generated
        );
        outputs.push((out, report));
    }
    let lines: Vec<InferLine<'_>> = outputs
        .iter()
        .zip(&prompts)
        .enumerate()
        .map(|(index, ((out, r), p))| InferLine {
            index,
            prompt: p.tokens(),
            generated: &out.tokens()[p.len()..],
            routed_index: r.routed_index,
            omission_set: &r.omission_set,
            blocks_loaded: &r.blocks_loaded,
            bytes_loaded: r.bytes_loaded,
            tokens_generated: r.tokens_generated,
        })
        .collect();
    let timings: Vec<TimingLine> = outputs
        .iter()
        .enumerate()
        .map(|(index, (_, r))| TimingLine {
            index,
            timings: r.timings,
        })
        .collect();
    create_out(cfg)?;
    std::fs::write(&report_path, jsonl(&lines)?).map_err(|e| Error::io(&report_path, e))?;
    std::fs::write(&timing_path, jsonl(&timings)?).map_err(|e| Error::io(&timing_path, e))?;
    println!(
        "{} prompts, {} bytes transferred, peak residency {} blocks",
        prompts.len(),
        store.bytes_transferred_total(),
        store.peak_resident()
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, criterion: Criterion, dry: bool) -> Result<()> {
    let header = model_header(&cfg.model)?;
    let pool_path = cfg.pool_path();
    let ckpt = cfg.router_checkpoint_path();
    require_file(&pool_path)?;
    require_file(&ckpt)?;
    let tokenizer = cfg.tokenizer()?;
    let eval = cfg.eval_sets();
    eval.iter().try_for_each(|d| require_file(&d.path))?;
    let needs_samples = !cfg.bench.pool_sizes.is_empty() || !cfg.bench.loss_modes.is_empty();
    let data_path = cfg.router_dataset_path();
    if needs_samples {
        require_file(&data_path)?;
    }
    let out_dir = cfg.out.join("bench");
    if dry {
        let mut steps = Vec::new();
        if cfg.bench.heatmap {
            steps.push("heatmap".to_string());
        }
        if cfg.bench.compare {
            steps.push(format!("compare ({criterion})"));
        }
        if !cfg.bench.pool_sizes.is_empty() {
            steps.push(format!("pool sizes {:?}", cfg.bench.pool_sizes));
        }
        if !cfg.bench.loss_modes.is_empty() {
            steps.push(format!("loss modes {:?}", cfg.bench.loss_modes));
        }
        if cfg.bench.speedup {
            steps.push(format!("speedup at {:?} tokens", cfg.bench.gen_lengths));
        }
        plan(
            &format!("bench: {}", steps.join(", ")),
            &[&cfg.model, &pool_path, &ckpt],
            &[&out_dir],
        );
        return Ok(());
    }
    let model = read_model(&cfg.model)?;
    let pool = CandidatePool::read(&pool_path)?;
    pool.check_model(&model)?;
    let router = read_checkpoint(&ckpt)?;
    check_binding(&router, &pool)?;
    let tasks: Vec<TaskSet> = load_sets(eval, &tokenizer, "evaluation")?
        .into_iter()
        .map(|(n, p)| TaskSet::new(n, p))
        .collect();
    let mut results = BenchResults::default();

    if cfg.bench.heatmap {
        let h = compute_heatmap(&router, &pool, header.n_blocks, &tasks)?;
        for name in &h.skipped {
            eprintln!("warning: task {name:?} has no prompts, left out of the heatmap");
        }
        results.heatmap = Some(h);
    }
    if cfg.bench.compare {
        let c = compare_methods(&model, &pool, &router, &tasks, criterion)?;
        println!("{:<18} average", "method");
        for r in &c.rows {
            println!("{:<18} {:.6}", r.method.to_string(), r.average);
        }
        results.comparison = Some(c);
    }
    if needs_samples {
        let samples = read_jsonl(&data_path)?;
        let recipe = RouterRecipe {
            arch: router_arch(cfg, &header),
            config: cfg.train,
            loss_mode: cfg.router.loss_mode,
        };
        if !cfg.bench.pool_sizes.is_empty() {
            let rows = ablate_pool_size(
                &model,
                &pool,
                &samples,
                &tasks,
                criterion,
                &cfg.bench.pool_sizes,
                recipe,
            )?;
            for r in &rows {
                println!(
                    "pool size {:>3}: routed {:.6}, oracle {:.6}",
                    r.size, r.routed_average, r.oracle_average
                );
            }
            results.pool_sizes = Some(rows);
        }
        if !cfg.bench.loss_modes.is_empty() {
            let rows = ablate_loss_mode(&samples, recipe.arch, cfg.train, &cfg.bench.loss_modes)?;
            for r in &rows {
                println!(
                    "loss mode {:?}: {:.6} -> {:.6}, routing accuracy {:.4}",
                    r.mode, r.initial_loss, r.final_loss, r.routing_accuracy
                );
            }
            results.loss_modes = Some(rows);
        }
    }
    if cfg.bench.speedup {
        let workload: Vec<TokenSequence> = tasks
            .iter()
            .flat_map(|t| t.pairs.iter().map(|p| p.prompt_sequence()))
            .collect::<Result<_>>()?;
        let mut dense = BlockStore::open(&cfg.model)?;
        let mut routed = BlockStore::open(&cfg.model)?.with_cap(header.n_blocks - pool.k);
        let cells = measure_speedup(
            &mut dense,
            &mut routed,
            &router,
            &pool,
            &workload,
            &cfg.bench.gen_lengths,
            cfg.bench.repetitions,
        )?;
        for c in &cells {
            println!(
                "prompt {:>3} gen {:>3}: dense {:.3} ms, routed {:.3} ms (+{:.3} ms router), x{:.3}",
                c.prompt_len, c.gen_len, c.dense_ms, c.routed_ms, c.router_ms, c.ratio
            );
        }
        results.speedup = Some(cells);
    }
    for p in emit_reports(&results, &out_dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_fixture(global: &GlobalArgs) -> Result<()> {
    let dir = global.out.clone().unwrap_or_else(|| PathBuf::from("fixture"));
    let seed = global.seed.unwrap_or(0);
    if global.dry_run {
        plan("write the synthetic task fixture", &[], &[&dir]);
        return Ok(());
    }
    let bundle = TaskFixture::build(FixtureParams::default(), seed).write_bundle(&dir, seed)?;
    println!("wrote {} and {}", bundle.model.display(), bundle.config.display());
    Ok(())
}
