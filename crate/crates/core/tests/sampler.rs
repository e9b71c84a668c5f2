mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpld::sampler::{make_contrastive_batch, TurnRef};

#[test]
fn contract_holds_over_many_batches() {
    let m = common::micro(120, 1);
    common::sampler_contract(&m.data, 300, None, 3).unwrap();
}

#[test]
fn sixteen_anchors_two_positives_is_48() {
    let m = common::micro(120, 1);
    let base: Vec<TurnRef> = m.data.refs()[..16].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = make_contrastive_batch(&base, &m.data.index, 2, false, &mut rng).unwrap();
    assert_eq!(b.samples.len(), 48);
    assert_eq!(b.base_count, 16);
    assert!(b.positives[16..].iter().all(Vec::is_empty));
    common::sampler_contract(&m.data, 50, Some(16), 9).unwrap();
}

#[test]
fn same_rng_same_batch() {
    let m = common::micro(60, 2);
    let base: Vec<TurnRef> = m.data.refs()[5..13].to_vec();
    let draw = |seed| {
        make_contrastive_batch(&base, &m.data.index, 2, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    assert_eq!(draw(4), draw(4));
    assert_ne!(draw(4).samples, draw(5).samples);
}

#[test]
fn bucket_inside_the_base_batch_has_no_positives() {
    let sessions = common::three_sessions();
    let vocab = tpld::tokenizer::Vocabulary::build(&sessions);
    let mut model = tpld::model::ModelConfig::micro(vocab.len());
    model.max_context = 64;
    model.max_target = 64;
    let data =
        tpld::trainer::TrainData::build(&sessions, &vocab, &model, tpld::corpus::SignatureGranularity::Act).unwrap();
    // Every turn in the base batch: positives can only come from outside, and there is nothing outside.
    let all = data.refs();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(make_contrastive_batch(&all, &data.index, 1, false, &mut rng).is_err());
    let base = &all[..all.len() - 1];
    let b = make_contrastive_batch(base, &data.index, 2, false, &mut rng).unwrap();
    assert_eq!(b.samples.len(), 3 * base.len());
    assert!(common::sampler_violation(&data, base, 2, &mut rng).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn contract_for_any_seed(seed in any::<u64>(), n in 2usize..20) {
        let m = common::micro(40, seed % 5);
        prop_assert!(common::sampler_contract(&m.data, 5, Some(n), seed).is_ok());
    }

    #[test]
    fn symmetrized_positives_stay_in_group(seed in any::<u64>()) {
        let m = common::micro(40, 0);
        let base: Vec<TurnRef> = m.data.refs()[..6].to_vec();
        let b = make_contrastive_batch(&base, &m.data.index, 2, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (i, ps) in b.positives.iter().enumerate() {
            for &p in ps {
                prop_assert!(p != i);
                prop_assert_eq!(m.data.index.signature(b.samples[p]), m.data.index.signature(b.samples[i]));
            }
        }
    }
}
