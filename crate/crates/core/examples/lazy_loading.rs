//! Block-granular loading: only blocks missing from the previous request are read.

use pudding::model::io::write_model;
use pudding::model::{ModelConfig, OmissionSet, TransformerModel};
use pudding::pipeline::BlockStore;
use rand::SeedableRng;

fn main() -> pudding::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let model = TransformerModel::random(ModelConfig::tiny(16, 16, 12), 0.2, &mut rng);
    let dir = tempfile::tempdir().map_err(|e| pudding::Error::io(".", e))?;
    let path = dir.path().join("model.pudw");
    write_model(&model, &path)?;

    let mut store = BlockStore::open(&path)?.with_cap(9);
    for omit in [[1, 2, 3], [1, 2, 3], [2, 3, 4], [10, 11, 12], [1, 2, 3]] {
        let set = OmissionSet::new(omit)?;
        let d = store.prepare(&set)?;
        println!(
            "omit {set:<10} loaded {:?} evicted {:?} ({} bytes), resident {:?}",
            d.loaded,
            d.evicted,
            d.bytes,
            store.loaded_blocks()
        );
    }
    println!(
        "total {} bytes, peak {} blocks, file holds {} bytes",
        store.bytes_transferred_total(),
        store.peak_resident(),
        store.layout().total_bytes
    );
    Ok(())
}
