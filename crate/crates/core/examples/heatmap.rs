//! Per-task block omission rates of a trained router, printed as a text heatmap.

use pudding::bench::{compute_heatmap, TaskSet};
use pudding::losses::{Criterion, PromptAnswerPair};
use pudding::router::{build_router_dataset, train_router, EncoderKind, LossMode, RouterArch, TrainConfig};
use pudding::search::{generate_pool, SearchOptions};
use pudding::synthetic::{FixtureParams, TaskFixture};

fn main() -> pudding::Result<()> {
    let fx = TaskFixture::build(FixtureParams::default(), 5);
    let pool = generate_pool(
        &fx.model,
        &fx.calibration_sets(48, 1)?,
        &[Criterion::Tl],
        2,
        SearchOptions::default(),
    )?;
    let pairs: Vec<PromptAnswerPair> = (0..fx.n_tasks())
        .flat_map(|t| fx.task_pairs(t, 64, 10 + t as u64))
        .collect();
    let train = build_router_dataset(&fx.model, &pool, &pairs, Criterion::Tl)?;
    let config = TrainConfig {
        learning_rate: 0.02,
        batch_size: 16,
        epochs: 30,
        warmup_steps: 20,
        ..TrainConfig::default()
    };
    let arch = RouterArch::new(fx.vocab.size(), 8, EncoderKind::MeanPool);
    let router = train_router(&train, arch, config, LossMode::Mse, &pool.hash())?.router;

    let tasks: Vec<TaskSet> = (0..fx.n_tasks())
        .map(|t| TaskSet::new(TaskFixture::task_name(t), fx.task_pairs(t, 40, 50 + t as u64)))
        .collect();
    let table = compute_heatmap(&router, &pool, fx.model.n_blocks(), &tasks)?;
    let shades = [' ', '.', ':', '*', '#'];
    print!("{:<8}", "");
    (1..=table.n_blocks).for_each(|b| print!("{b:>3}"));
    println!();
    for (name, rates) in table.tasks.iter().zip(&table.rates) {
        print!("{name:<8}");
        for r in rates {
            print!("  {}", shades[(r * 4.0).round() as usize]);
        }
        println!();
    }
    print!("{}", table.to_matrix());
    Ok(())
}
