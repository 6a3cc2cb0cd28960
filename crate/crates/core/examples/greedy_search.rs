//! Greedy omission search on the synthetic fixture, with its step trace and
//! the exhaustive optimum for comparison.

use pudding::losses::Criterion;
use pudding::search::{exhaustive_search, greedy_search, DEFAULT_EXHAUSTIVE_CAP};
use pudding::synthetic::{FixtureParams, TaskFixture};

fn main() -> pudding::Result<()> {
    let fx = TaskFixture::build(FixtureParams::default(), 2);
    for data in fx.calibration_sets(32, 9)? {
        let (set, trace) = greedy_search(&fx.model, &data, Criterion::Tl, 2)?;
        println!("{}: greedy {set}", data.name);
        for (i, step) in trace.steps.iter().enumerate() {
            let row: Vec<String> = step.candidates.iter().map(|(b, l)| format!("{b}:{l:.2}")).collect();
            println!(
                "  step {}: drop {} ({:.3})  [{}]",
                i + 1,
                step.chosen,
                step.loss,
                row.join(" ")
            );
        }
        let (best, loss) = exhaustive_search(&fx.model, &data, Criterion::Tl, 2, DEFAULT_EXHAUSTIVE_CAP)?;
        println!("  exhaustive {best} ({loss:.3})");
    }
    Ok(())
}
