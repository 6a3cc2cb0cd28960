//! Candidate pool, router labels, training and held-out evaluation on the fixture.

use pudding::losses::{Criterion, PromptAnswerPair};
use pudding::router::{
    build_router_dataset, evaluate_router, train_router, EncoderKind, LossMode, RouterArch, TrainConfig,
};
use pudding::search::{generate_pool, SearchOptions};
use pudding::synthetic::{FixtureParams, TaskFixture};

fn main() -> pudding::Result<()> {
    let fx = TaskFixture::build(FixtureParams::default(), 2);
    let calib = fx.calibration_sets(48, 1)?;
    let pool = generate_pool(
        &fx.model,
        &calib,
        &[Criterion::Tl, Criterion::Tld],
        2,
        SearchOptions::default(),
    )?;
    for (i, e) in pool.sets.iter().enumerate() {
        println!("entry {i}: {} from {} / {}", e.blocks, e.dataset, e.criterion.as_str());
    }

    let pairs = |seed: u64, n| -> Vec<PromptAnswerPair> {
        (0..fx.n_tasks())
            .flat_map(|t| fx.task_pairs(t, n, seed + t as u64))
            .collect()
    };
    let train = build_router_dataset(&fx.model, &pool, &pairs(100, 96), Criterion::Tl)?;
    let held = build_router_dataset(&fx.model, &pool, &pairs(200, 32), Criterion::Tl)?;

    let config = TrainConfig {
        learning_rate: 0.02,
        batch_size: 16,
        epochs: 30,
        warmup_steps: 20,
        ..TrainConfig::default()
    };
    let arch = RouterArch::new(fx.vocab.size(), 8, EncoderKind::MeanPool);
    let out = train_router(&train, arch, config, LossMode::Mse, &pool.hash())?;
    println!(
        "loss {:.3} -> {:.4} over {} steps",
        out.epoch_losses[0],
        out.epoch_losses.last().unwrap(),
        out.steps
    );
    let m = evaluate_router(&out.router, &held)?;
    println!(
        "held-out: accuracy {:.3}, regret {:.4}, mse {:.4}",
        m.accuracy, m.regret, m.mse
    );
    Ok(())
}
