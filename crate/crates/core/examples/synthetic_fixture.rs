//! The planted-structure fixture: each task is helped by dropping its own block pair.

use pudding::losses::{dataset_loss, Criterion};
use pudding::model::{apply_omission, OmissionSet};
use pudding::synthetic::{FixtureParams, TaskFixture};

fn main() -> pudding::Result<()> {
    let fx = TaskFixture::build(FixtureParams::default(), 2);
    let sets: Vec<OmissionSet> = std::iter::once(OmissionSet::empty())
        .chain((0..fx.n_tasks()).map(|t| OmissionSet::new(fx.optimal_omission(t)).unwrap()))
        .chain([OmissionSet::new([7, 8])?])
        .collect();
    print!("{:<8}", "task");
    sets.iter()
        .for_each(|s| print!("{:>9}", if s.is_empty() { "dense".into() } else { s.to_string() }));
    println!();
    for t in 0..fx.n_tasks() {
        let pairs = fx.task_pairs(t, 32, t as u64);
        print!("{:<8}", TaskFixture::task_name(t));
        for s in &sets {
            print!(
                "{:>9.3}",
                dataset_loss(&apply_omission(&fx.model, s)?, &pairs, Criterion::Tl)?.value
            );
        }
        println!();
    }
    let p = fx.task_pairs(0, 1, 99).remove(0);
    println!("sample prompt {:?} answer {:?}", p.prompt(), p.answer());
    Ok(())
}
