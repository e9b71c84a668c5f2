mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpld::autodiff::{ParamVisitor, Tensor};
use tpld::model::{extract_policy_vectors, ModelConfig, PolicyEncoders, Weights};
use tpld::tokenizer::{locate_span_ends, EOS_RESP_ID};
use tpld::{Weights32, Weights64};

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Parameter count written out layer by layer.
fn expected_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let norm = 2 * d;
    let attn = 4 * linear(d, d);
    let ff = linear(d, c.d_ff) + linear(c.d_ff, d);
    let enc = 2 * norm + attn + ff;
    let dec = 3 * norm + 2 * attn + ff;
    c.vocab_size * d
        + c.max_context * d
        + c.max_target * d
        + c.n_enc_layers * enc
        + c.n_dec_layers * dec
        + 2 * norm
        + linear(d, c.vocab_size)
}

#[test]
fn desk_parameter_count() {
    let c = ModelConfig::desk(512);
    let w: Weights32 = Weights::init(&c).unwrap();
    assert_eq!(w.param_count(), expected_params(&c));
    assert_eq!(w.param_count(), 316_160);
    let e: PolicyEncoders<f32> = PolicyEncoders::init(&c).unwrap();
    assert_eq!(e.param_count(), 16 * 64 + 2 * 128 + 4 * linear(64, 64) + linear(64, 256) + linear(256, 64));
}

fn flat(w: &Weights64) -> Vec<f64> {
    let mut v = Vec::new();
    w.visit(&mut |_, t| v.extend_from_slice(t.data()));
    v
}

#[test]
fn init_depends_only_on_seed() {
    let mut c = ModelConfig::micro(40);
    let a = flat(&Weights::init(&c).unwrap());
    assert_eq!(a, flat(&Weights::init(&c).unwrap()));
    c.seed = 1;
    assert_ne!(a, flat(&Weights::init(&c).unwrap()));
}

#[test]
fn invalid_inputs_are_rejected() {
    let w: Weights64 = Weights::init(&ModelConfig::micro(40)).unwrap();
    assert!(w.forward(&[], &[11]).is_err());
    assert!(w.forward(&[11], &[40]).is_err());
    assert!(w.forward(&[11; 33], &[11]).is_err());
    let mut bad = ModelConfig::micro(40);
    bad.n_heads = 3;
    assert!(Weights::<f64>::init(&bad).is_err());
}

#[test]
fn micro_logits_snapshot() {
    let w: Weights64 = Weights::init(&ModelConfig::micro(40)).unwrap();
    let tr = w.forward(&[11, 12, 13, 14, 15], &[4, 20, 21, 5]).unwrap();
    assert_eq!(tr.logits.shape(), &[4, 40]);
    let sum: f64 = tr.logits.data().iter().sum();
    let row0: Vec<f64> = tr.logits.row(0)[..4].to_vec();
    let frozen_sum = -17.649432525835;
    let frozen_row0 = [-0.0015077220936915, 0.6751412892330282, 1.2657235724251528, 1.2992942402912575];
    assert!((sum - frozen_sum).abs() < 1e-9, "sum {sum:.12}");
    for (a, b) in row0.iter().zip(frozen_row0) {
        assert!((a - b).abs() < 1e-9, "row0 {row0:?}");
    }
}

#[test]
fn greedy_decode_snapshot() {
    let w: Weights64 = Weights::init(&ModelConfig::micro(40)).unwrap();
    let out = w.greedy_decode(&[11, 12, 13, 14, 15], EOS_RESP_ID, 8).unwrap();
    assert_eq!(out, [23, 3, 29, 3, 3, 3, 3, 2]);
    let again = w.greedy_decode(&[11, 12, 13, 14, 15], EOS_RESP_ID, 8).unwrap();
    assert_eq!(out, again);
    assert!(w.greedy_decode(&[11], EOS_RESP_ID, 0).unwrap().is_empty());
}

#[test]
fn packed_batch_matches_single_passes() {
    let w: Weights64 = Weights::init(&ModelConfig::micro(40)).unwrap();
    let a: (&[usize], &[usize]) = (&[11, 12, 13], &[4, 20, 5]);
    let b: (&[usize], &[usize]) = (&[14, 15], &[4, 21, 22, 23, 5]);
    let packed = w.forward_batch(&[a, b], &mut tpld::model::Dropout::off()).unwrap();
    let sa = w.forward(a.0, a.1).unwrap();
    let sb = w.forward(b.0, b.1).unwrap();
    let both: Vec<f64> = sa.logits.data().iter().chain(sb.logits.data()).copied().collect();
    for (x, y) in packed.logits.data().iter().zip(&both) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn decoder_is_causal() {
    let w: Weights64 = Weights::init(&ModelConfig::micro(40)).unwrap();
    let ctx = [11, 12, 13];
    let a = w.forward(&ctx, &[4, 20, 21, 22, 5]).unwrap();
    let b = w.forward(&ctx, &[4, 20, 30, 31, 6]).unwrap();
    // Positions 0..=2 read inputs PAD, 4, 20 in both.
    for p in 0..3 {
        assert_eq!(a.hidden.row(p), b.hidden.row(p));
    }
    assert_ne!(a.hidden.row(3), b.hidden.row(3));
}

#[test]
fn belief_edit_moves_the_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Weights64 = Weights::init(&ModelConfig::micro(60)).unwrap();
    let ctx = common::random_ids(&mut rng, 60, 10);
    let (t, b_end, a_end) = common::random_target(&mut rng, 60, 5);
    let mut edited = t.clone();
    edited[1] = if t[1] == 20 { 21 } else { 20 };
    let h = w.forward(&ctx, &t).unwrap();
    let g = w.forward(&ctx, &edited).unwrap();
    assert_ne!(h.hidden.row(a_end), g.hidden.row(a_end));
    assert_ne!(h.hidden.row(b_end), g.hidden.row(b_end));
}

#[test]
fn policy_vectors_need_both_markers() {
    let w: Weights64 = Weights::init(&ModelConfig::micro(40)).unwrap();
    let target = [4, 20, 5, 6, 21, 7];
    let tr = w.forward(&[11], &target).unwrap();
    let ends = locate_span_ends(&target).unwrap();
    let pv = extract_policy_vectors(&tr, 0, &ends, 0).unwrap();
    assert_eq!(pv.prior.data(), tr.hidden.row(2));
    assert_eq!(pv.posterior.data(), tr.hidden.row(5));
    let short = locate_span_ends(&[4, 20, 5]).unwrap();
    assert!(extract_policy_vectors(&tr, 0, &short, 0).is_err());
}

#[test]
fn sequence_encoder_sees_order() {
    let c = ModelConfig::micro(40);
    let enc: PolicyEncoders<f64> = PolicyEncoders::init(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<f64> = (0..3 * c.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = Tensor::constant(vec![3, c.d_model], rows.clone()).unwrap();
    let mut swapped = rows.clone();
    swapped[..c.d_model].copy_from_slice(&rows[c.d_model..2 * c.d_model]);
    swapped[c.d_model..2 * c.d_model].copy_from_slice(&rows[..c.d_model]);
    let s = Tensor::constant(vec![3, c.d_model], swapped).unwrap();
    let a = enc.prior.encode(&h).unwrap();
    let b = enc.prior.encode(&s).unwrap();
    assert_eq!(a.shape(), &[1, c.d_model]);
    assert_ne!(a.data(), b.data());
    let too_long = Tensor::<f64>::zeros(vec![c.max_turns + 1, c.d_model]);
    assert!(enc.prior.encode(&too_long).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn prior_is_blind_to_act_and_response(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = ModelConfig::micro(50);
        c.seed = seed;
        let w: Weights64 = Weights::init(&c).unwrap();
        let n = rng.random_range(1..20);
        let ctx = common::random_ids(&mut rng, 50, n);
        let (t, b_end, _) = common::random_target(&mut rng, 50, 6);
        let (other, _, _) = common::random_target(&mut rng, 50, 6);
        let other_end = other.iter().position(|&x| x == tpld::tokenizer::EOS_BELIEF_ID).unwrap();
        let mut swapped = t[..=b_end].to_vec();
        swapped.extend_from_slice(&other[other_end + 1..]);
        let a = w.forward(&ctx, &t).unwrap();
        let b = w.forward(&ctx, &swapped).unwrap();
        prop_assert_eq!(a.hidden.row(b_end), b.hidden.row(b_end));
    }

    #[test]
    fn forward_is_finite(seed in any::<u64>(), len in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Weights32 = Weights::init(&ModelConfig::micro(50)).unwrap();
        let ctx = common::random_ids(&mut rng, 50, len);
        let (t, _, _) = common::random_target(&mut rng, 50, 6);
        let tr = w.forward(&ctx, &t).unwrap();
        prop_assert!(tr.logits.data().iter().all(|x| x.is_finite()));
    }
}
