//! Dense versus routed decoding time on a 32-block random model.

use pudding::model::io::write_model;
use pudding::model::{ModelConfig, OmissionSet, TokenSequence, TransformerModel};
use pudding::pipeline::{measure_speedup, BlockStore};
use pudding::router::{EncoderKind, LossMode, RouterArch, RouterModel, TrainConfig};
use pudding::search::CandidatePool;
use rand::{Rng, SeedableRng};

fn main() -> pudding::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let config = ModelConfig {
        d_ff: 256,
        n_heads: 4,
        ..ModelConfig::tiny(64, 64, 32)
    };
    let model = TransformerModel::random(config, 0.05, &mut rng);
    let dir = tempfile::tempdir().map_err(|e| pudding::Error::io(".", e))?;
    let path = dir.path().join("model.pudw");
    write_model(&model, &path)?;

    let sets = (0..3)
        .map(|i| OmissionSet::new((0..7).map(|j| 1 + (5 * i + 4 * j) % 32)))
        .collect::<pudding::Result<Vec<_>>>()?;
    let pool = CandidatePool::from_sets(7, model.hash(), sets)?;
    let arch = RouterArch::new(64, 8, EncoderKind::MeanPool);
    let router = RouterModel::init(
        arch,
        pool.len(),
        pool.hash(),
        TrainConfig::default(),
        LossMode::Mse,
        &mut rng,
    );
    let workload = [8, 8, 24, 24]
        .iter()
        .map(|&n| TokenSequence::new((0..n).map(|_| rng.random_range(0..64)).collect()))
        .collect::<pudding::Result<Vec<_>>>()?;

    let mut dense = BlockStore::open(&path)?;
    let mut routed = BlockStore::open(&path)?;
    let cells = measure_speedup(&mut dense, &mut routed, &router, &pool, &workload, &[8, 24], 5)?;
    println!("prompt  gen   dense ms  routed ms  router ms  ratio");
    for c in cells {
        println!(
            "{:>6} {:>4} {:>10.3} {:>10.3} {:>10.4} {:>6.3}",
            c.prompt_len, c.gen_len, c.dense_ms, c.routed_ms, c.router_ms, c.ratio
        );
    }
    Ok(())
}
