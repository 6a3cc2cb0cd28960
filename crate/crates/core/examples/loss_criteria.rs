//! The four calibration criteria on one prompt-answer pair, dense and pruned.

use pudding::losses::{evaluate, perplexity, Criterion, PromptAnswerPair};
use pudding::model::{apply_omission, ModelConfig, OmissionSet, TransformerModel};
use rand::SeedableRng;

fn main() -> pudding::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let model = TransformerModel::random(ModelConfig::tiny(20, 16, 4), 0.3, &mut rng);
    let pair = PromptAnswerPair::new(&[1, 2, 3, 4], &[5, 6], vec![vec![7, 8], vec![9]])?;

    println!("{:<8} {:>10} {:>10} {:>10} {:>10}", "omit", "tl", "tld", "sl", "ppl");
    for omit in [vec![], vec![1], vec![4]] {
        let set = OmissionSet::new(omit)?;
        let view = apply_omission(&model, &set)?;
        let v = |c| evaluate(&view, &pair, c).map(|l| l.value);
        println!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            set.to_string(),
            v(Criterion::Tl)?,
            v(Criterion::Tld)?,
            v(Criterion::Sl)?,
            v(Criterion::Ppl)?
        );
    }
    let ppl = perplexity(&model.dense_view(), pair.tokens())?.value;
    println!("ln(ppl) of the whole sequence: {:.4}", ppl.ln());
    Ok(())
}
