//! Dense and pruned forward passes over a random model, plus greedy decoding.

use pudding::model::{
    apply_omission, forward_logprobs, greedy_decode, ModelConfig, OmissionSet, TokenSequence, TransformerModel,
};
use rand::SeedableRng;

fn main() -> pudding::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let model = TransformerModel::random(ModelConfig::tiny(32, 16, 6), 0.3, &mut rng);
    let prompt = TokenSequence::new(vec![3, 1, 4, 1, 5])?;

    for omit in [vec![], vec![2], vec![2, 5]] {
        let set = OmissionSet::new(omit)?;
        let view = apply_omission(&model, &set)?;
        let table = forward_logprobs(&view, &prompt)?;
        let last = table.row(table.rows - 1);
        let (best, lp) = last.iter().enumerate().fold(
            (0, f32::NEG_INFINITY),
            |acc, (t, &l)| if l > acc.1 { (t, l) } else { acc },
        );
        let out = greedy_decode(&view, &prompt, 6)?;
        println!(
            "omit {set:<6} blocks {:?}  next {best} (log p {lp:.3})  decode {:?}",
            view.block_indices(),
            &out.tokens()[prompt.len()..]
        );
    }
    Ok(())
}
