//! Back-of-envelope weight transfer times for dense and pruned 8B-class models.

use pudding::pipeline::{estimate_load_time, ParamLayout, GB};

fn main() -> pudding::Result<()> {
    let layout = ParamLayout::llama_3_1_8b();
    println!("parameters {} ({} per block)", layout.total(), layout.per_block);
    for (link, bw) in [("PCIe 4.0 x16", 64.0), ("NVLink", 600.0)] {
        print!("{link:<13}");
        for k in [0, 4, 7, 10] {
            let t = estimate_load_time(16.0 * GB, layout.surviving_fraction(k), bw * GB)?;
            print!("  k={k:<2} {:.4} s", t);
        }
        println!();
    }
    Ok(())
}
