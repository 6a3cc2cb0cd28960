mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pudding::losses::{dataset_loss, evaluate, Criterion, PromptAnswerPair};
use pudding::model::io::{decode_model, encode_model};
use pudding::model::{
    apply_omission, forward_logprobs, greedy_decode, greedy_decode_uncached, ModelConfig, OmissionSet, PositionKind,
    TokenSequence, TransformerModel,
};
use pudding::router::{
    decode_checkpoint, encode_checkpoint, EncoderKind, LossMode, RouterArch, RouterModel, RouterSample, TrainConfig,
};
use pudding::search::CandidatePool;

fn model(seed: u64, blocks: usize, rotary: bool) -> TransformerModel {
    let config = ModelConfig {
        n_heads: 2,
        position: if rotary {
            PositionKind::Rotary
        } else {
            PositionKind::Learned
        },
        ..ModelConfig::tiny(12, 8, blocks)
    };
    TransformerModel::random(config, 0.3, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..12, 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn survivors_complement_the_omission(d in 2usize..40, picks in prop::collection::btree_set(1usize..40, 0..10)) {
        let picks: Vec<usize> = picks.into_iter().filter(|&b| b <= d).take(d - 1).collect();
        let set = OmissionSet::new(picks.iter().copied()).unwrap();
        let survivors = set.survivors(d);
        prop_assert_eq!(survivors.len() + set.len(), d);
        prop_assert!(survivors.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(survivors.iter().all(|b| !set.contains(*b)));
    }

    #[test]
    fn cached_decoding_matches_recomputation(seed in 0u64..1000, prompt in tokens(6), rotary in any::<bool>()) {
        let m = model(seed, 3, rotary);
        let view = m.dense_view();
        let prompt = TokenSequence::new(prompt).unwrap();
        prop_assert_eq!(greedy_decode(&view, &prompt, 5).unwrap(), greedy_decode_uncached(&view, &prompt, 5).unwrap());
    }

    #[test]
    fn forward_matches_reference_under_any_omission(seed in 0u64..1000, z in tokens(10), omit in 0usize..4) {
        let m = model(seed, 4, seed % 2 == 0);
        let set = if omit == 0 { OmissionSet::empty() } else { OmissionSet::new([omit]).unwrap() };
        let table = forward_logprobs(&apply_omission(&m, &set).unwrap(), &TokenSequence::new(z.clone()).unwrap()).unwrap();
        let reference = common::reference_logprobs(&m, set.indices(), &z);
        for (r, row) in reference.iter().enumerate() {
            for (t, want) in row.iter().enumerate() {
                prop_assert!((table.get(r, t as u32) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dataset_loss_is_the_pair_mean(seed in 0u64..1000, pairs in prop::collection::vec((tokens(4), tokens(3)), 1..6)) {
        let m = model(seed, 2, false);
        let view = m.dense_view();
        let pairs: Vec<PromptAnswerPair> = pairs.iter().map(|(p, a)| PromptAnswerPair::new(p, a, vec![]).unwrap()).collect();
        let total: f64 = pairs.iter().map(|p| evaluate(&view, p, Criterion::Tl).unwrap().value).sum();
        let mean = dataset_loss(&view, &pairs, Criterion::Tl).unwrap().value;
        prop_assert!((mean - total / pairs.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn weight_files_round_trip(seed in 0u64..1000, blocks in 1usize..4, rotary in any::<bool>()) {
        let m = model(seed, blocks, rotary);
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(back.hash(), m.hash());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, attention in any::<bool>(), m in 1usize..6) {
        let encoder = if attention { EncoderKind::Attention } else { EncoderKind::MeanPool };
        let arch = RouterArch::new(12, 4, encoder);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let router = RouterModel::init(arch, m, "binding", TrainConfig::default(), LossMode::Ce, &mut rng);
        let back = decode_checkpoint(&encode_checkpoint(&router)).unwrap();
        let prompt = TokenSequence::new(vec![1, 2, 3]).unwrap();
        prop_assert_eq!(back.predict(&prompt).unwrap(), router.predict(&prompt).unwrap());
        prop_assert_eq!(back.pool_binding, router.pool_binding);
    }

    #[test]
    fn loss_modes_are_finite_and_nonnegative(seed in 0u64..1000, label in prop::collection::vec(0.0f64..20.0, 3), prompt in tokens(5)) {
        let arch = RouterArch::new(12, 4, EncoderKind::MeanPool);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let router = RouterModel::init(arch, 3, "b", TrainConfig::default(), LossMode::Mse, &mut rng);
        let sample = RouterSample { prompt_tokens: TokenSequence::new(prompt).unwrap(), label };
        for mode in [LossMode::Mse, LossMode::Ce, LossMode::CeOnehot] {
            let l = router.loss(&[&sample], mode).unwrap();
            prop_assert!(l.is_finite() && l >= 0.0);
        }
    }
}

#[test]
fn pool_hash_tracks_content() {
    let sets = vec![OmissionSet::new([1, 3]).unwrap(), OmissionSet::new([2, 3]).unwrap()];
    let a = CandidatePool::from_sets(2, "m", sets.clone()).unwrap();
    let b = CandidatePool::from_json(&a.to_json()).unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = CandidatePool::from_sets(2, "m", sets.into_iter().rev().collect()).unwrap();
    assert_ne!(a.hash(), c.hash());
}
