mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpld::autodiff::{grad_check, Tensor};
use tpld::model::{ModelConfig, PolicyEncoders};
use tpld::objectives::{
    acl_loss, compose, gpc_loss, session_consistency, turn_consistency, AclReduction, Coefficients, Objective, Term,
};

fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
    Tensor::constant(vec![rows, cols], v).unwrap()
}

#[test]
fn acl_orthogonal_pairs() {
    let expected = 4.0 * ((std::f64::consts::E + 2.0) / std::f64::consts::E).ln();
    let got = common::acl_orthogonal_fixture();
    assert!((got - expected).abs() < 1e-12);
    assert!((got - 2.205_778_855_728).abs() < 1e-9);
}

#[test]
fn acl_matches_double_loop_on_random_batches() {
    assert!(common::acl_oracle_gap(200, 11) < 1e-10);
}

#[test]
fn acl_mean_pairs_divides_by_pair_count() {
    let v = t(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    let p = [vec![2], vec![3], vec![0], vec![1]];
    let sum = acl_loss(&v, &p, 1.0, AclReduction::Sum).unwrap().item();
    let mean = acl_loss(&v, &p, 1.0, AclReduction::MeanPairs).unwrap().item();
    assert!((sum / 4.0 - mean).abs() < 1e-14);
}

#[test]
fn acl_rejects_bad_input() {
    let v = t(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    assert!(acl_loss(&v, &[vec![0], vec![]], 1.0, AclReduction::Sum).is_err());
    assert!(acl_loss(&v, &[vec![2], vec![]], 1.0, AclReduction::Sum).is_err());
    assert!(acl_loss(&v, &[vec![1], vec![]], 0.0, AclReduction::Sum).is_err());
    assert!(acl_loss(&v, &[vec![1]], 1.0, AclReduction::Sum).is_err());
    assert_eq!(acl_loss(&v, &[vec![], vec![]], 1.0, AclReduction::Sum).unwrap().item(), 0.0);
}

#[test]
fn acl_falls_as_positives_align() {
    let positives = [vec![2], vec![3], vec![], vec![]];
    let mut last = f64::INFINITY;
    for k in 0..=10 {
        let a = k as f64 / 10.0;
        // Positives rotate from orthogonal towards their anchors.
        let v = t(4, 2, vec![1.0, 0.0, -1.0, 0.0, a, 1.0 - a, -a, -(1.0 - a) + 1e-3]);
        let l = acl_loss(&v, &positives, 0.5, AclReduction::Sum).unwrap().item();
        assert!(l < last, "step {k}: {l} ≥ {last}");
        last = l;
    }
}

#[test]
fn raw_terms_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 6;
    let a = t(1, d, common::normal_vec(&mut rng, d));
    let b = t(1, d, common::normal_vec(&mut rng, d));
    assert!(grad_check(|x| turn_consistency(x, &b), &a, 1e-5).unwrap() < 1e-6);

    let mut c = ModelConfig::micro(20);
    c.d_model = d;
    let enc: PolicyEncoders<f64> = PolicyEncoders::init(&c).unwrap();
    let hr = t(3, d, common::normal_vec(&mut rng, 3 * d));
    let ho = t(3, d, common::normal_vec(&mut rng, 3 * d));
    assert!(grad_check(|x| session_consistency(x, &ho, &enc), &hr, 1e-5).unwrap() < 1e-4);
    assert!(grad_check(|x| session_consistency(&hr, x, &enc), &ho, 1e-5).unwrap() < 1e-4);
    let gpc = |x: &Tensor<f64>| {
        let turn = turn_consistency(&x.slice_rows(2, 3)?, &ho.slice_rows(2, 3)?)?;
        gpc_loss(&turn, &session_consistency(x, &ho, &enc)?)
    };
    assert!(grad_check(gpc, &hr, 1e-5).unwrap() < 1e-4);

    let v = t(6, 4, common::normal_vec(&mut rng, 24));
    let p = [vec![2, 3], vec![4, 5], vec![], vec![], vec![], vec![]];
    assert!(grad_check(|x| acl_loss(x, &p, 0.7, AclReduction::Sum), &v, 1e-5).unwrap() < 1e-6);
}

#[test]
fn session_term_vanishes_for_equal_histories() {
    let c = ModelConfig::micro(20);
    let enc: PolicyEncoders<f64> = PolicyEncoders::init(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = t(4, c.d_model, common::normal_vec(&mut rng, 4 * c.d_model));
    assert_eq!(session_consistency(&h, &h, &enc).unwrap().item(), 0.0);
    let short = t(3, c.d_model, common::normal_vec(&mut rng, 3 * c.d_model));
    assert!(session_consistency(&h, &short, &enc).is_err());
}

fn scalars(v: &[(Term, f64)]) -> BTreeMap<Term, Tensor<f64>> {
    v.iter().map(|&(k, x)| (k, Tensor::scalar(x))).collect()
}

#[test]
fn missing_terms_are_errors() {
    let none = BTreeSet::new();
    let c = Coefficients::default();
    assert!(compose(Objective::Stage1, scalars(&[(Term::GenA, 1.0)]), c, &none).is_err());
    assert!(compose(Objective::Stage2, scalars(&[(Term::GenB, 1.0), (Term::GenA, 1.0)]), c, &none).is_err());
    assert!(compose(Objective::Finetune, scalars(&[(Term::GenB, 1.0)]), c, &none).is_err());
}

#[test]
fn disabled_terms_leave_the_total() {
    let c = Coefficients::default();
    let all = scalars(&[
        (Term::GenB, 1.0),
        (Term::GenA, 2.0),
        (Term::Turn, 3.0),
        (Term::Session, 4.0),
        (Term::Acl, 5.0),
    ]);
    let b = compose(Objective::Stage2, all.clone(), c, &[Term::Gpc].into()).unwrap();
    assert!((b.total_value() - (0.1 + 2.0 + 5.0)).abs() < 1e-12);
    assert!(!b.terms.contains_key(&Term::Gpc));
    let b = compose(Objective::Stage2, all.clone(), c, &[Term::Session].into()).unwrap();
    assert!((b.total_value() - (0.1 + 2.0 + 0.1 * 3.0 + 5.0)).abs() < 1e-12);
    let b = compose(Objective::Stage2, all, c, &[Term::Acl].into()).unwrap();
    assert!((b.total_value() - (0.1 + 2.0 + 0.1 * 7.0)).abs() < 1e-12);
}

#[test]
fn composition_gradients_through_the_micro_model() {
    // A coordinate stride keeps the debug build fast; the acceptance run checks more of them.
    for (name, err) in common::objective_grad_checks(29) {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}

fn coef() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0]
}

proptest! {
    #[test]
    fn stage_totals_are_the_stated_weighted_sums(
        b in 0.0..10.0f64, a in 0.0..10.0f64, r in 0.0..10.0f64,
        tu in 0.0..10.0f64, se in 0.0..10.0f64, acl in 0.0..10.0f64,
        alpha in coef(), beta in coef(), gamma in coef(),
    ) {
        let c = Coefficients { alpha, beta, gamma, tau: 1.0 };
        let terms = scalars(&[
            (Term::GenB, b), (Term::GenA, a), (Term::GenR, r),
            (Term::Turn, tu), (Term::Session, se), (Term::Acl, acl),
        ]);
        let none = BTreeSet::new();
        let total = |o| compose(o, terms.clone(), c, &none).unwrap().total_value();
        let tol = 1e-12 * (1.0 + b + a + r + tu + se + acl);
        prop_assert!((total(Objective::Stage1) - b).abs() <= tol);
        prop_assert!((total(Objective::Stage2) - (gamma * b + a + alpha * (tu + se) + beta * acl)).abs() <= tol);
        prop_assert!((total(Objective::Stage3) - (gamma * (b + a) + r)).abs() <= tol);
        prop_assert!((total(Objective::Finetune) - (b + a + r)).abs() <= tol);
        prop_assert!((total(Objective::Multitask) - (b + a + r + alpha * (tu + se) + beta * acl)).abs() <= tol);
        let s2 = compose(Objective::Stage2, terms.clone(), c, &none).unwrap();
        prop_assert!((s2.value(Term::Gpc).unwrap() - (tu + se)).abs() <= tol);
    }

    #[test]
    fn acl_is_scale_and_rotation_invariant(seed in any::<u64>(), s in 0.1..10.0f64, theta in 0.0..6.28f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = common::normal_vec(&mut rng, 12);
        let p = [vec![3], vec![4], vec![5], vec![], vec![], vec![]];
        let base = acl_loss(&t(6, 2, raw.clone()), &p, 0.5, AclReduction::Sum).unwrap().item();
        let scaled: Vec<f64> = raw.iter().map(|x| x * s).collect();
        let (c, sn) = (theta.cos(), theta.sin());
        let rotated: Vec<f64> = raw.chunks(2).flat_map(|v| [c * v[0] - sn * v[1], sn * v[0] + c * v[1]]).collect();
        let l1 = acl_loss(&t(6, 2, scaled), &p, 0.5, AclReduction::Sum).unwrap().item();
        let l2 = acl_loss(&t(6, 2, rotated), &p, 0.5, AclReduction::Sum).unwrap().item();
        prop_assert!((base - l1).abs() < 1e-9 * (1.0 + base));
        prop_assert!((base - l2).abs() < 1e-9 * (1.0 + base));
    }

    #[test]
    fn acl_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = t(6, 3, common::normal_vec(&mut rng, 18));
        let p = [vec![2, 3], vec![4, 5], vec![], vec![], vec![], vec![]];
        prop_assert!(acl_loss(&v, &p, 1.0, AclReduction::Sum).unwrap().item() >= 0.0);
    }
}
