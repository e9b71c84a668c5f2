mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpld::corpus::Splits;
use tpld::eval::{
    bleu, evaluate, generate_dialog, inform_success, match_succf1, repetition_probe, report, DialogRun, EvalOptions,
    OracleGenerator, Smoothing,
};
use tpld::model::{ModelConfig, Weights};
use tpld::tokenizer::Vocabulary;
use tpld::Weights64;

/// Corpus BLEU-4 as a product of clipped precisions, n-grams compared as word slices.
fn bleu_oracle(cands: &[&str], refs: &[&str]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in cands.iter().zip(refs) {
        let c: Vec<&str> = c.split(' ').collect();
        let r: Vec<&str> = r.split(' ').collect();
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            if c.len() < n {
                continue;
            }
            let grams: Vec<&[&str]> = c.windows(n).collect();
            let ref_grams: Vec<&[&str]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
            let mut seen: Vec<&[&str]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_c = grams.iter().filter(|x| *x == g).count();
                let in_r = ref_grams.iter().filter(|x| *x == g).count();
                matched[n - 1] += in_c.min(in_r);
            }
            total[n - 1] += grams.len();
        }
    }
    let mut p = 1.0;
    for n in 0..4 {
        p *= matched[n] as f64 / total[n] as f64;
    }
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    100.0 * bp * p.powf(0.25)
}

const CANDS: [&str; 3] = [
    "the hotel is in the north part of town",
    "what time would you like to book",
    "i have booked it for you",
];
const REFS: [&str; 3] = [
    "the hotel is located in the north of town",
    "what time would you like",
    "i have booked a table for you",
];

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn bleu_matches_independent_oracle() {
    let got = bleu(&strings(&CANDS), &strings(&REFS), Smoothing::None).unwrap();
    assert!((got - bleu_oracle(&CANDS, &REFS)).abs() < 0.01);
    assert!((got - 41.5527).abs() < 0.01, "{got}");
}

#[test]
fn bleu_brevity_penalty_applies() {
    let c = ["what time would you like"];
    let r = ["what time would you like to book"];
    let got = bleu(&strings(&c), &strings(&r), Smoothing::None).unwrap();
    assert!((got - 100.0 * (1.0f64 - 7.0 / 5.0).exp()).abs() < 1e-9);
    assert!(bleu(&strings(&c), &strings(&[]), Smoothing::None).is_err());
}

#[test]
fn smoothing_keeps_short_overlaps_positive() {
    let c = strings(&["the north part of"]);
    let r = strings(&["the north of town"]);
    assert_eq!(bleu(&c, &r, Smoothing::None).unwrap(), 0.0);
    assert!(bleu(&c, &r, Smoothing::Method1).unwrap() > 0.0);
}

fn corpus() -> (Splits, tpld::corpus::Database, Vocabulary) {
    let out = common::synth(60, 4);
    let splits = Splits::by_fraction(out.sessions, 0.8, 0.1);
    let vocab = Vocabulary::build(&splits.train);
    (splits, out.database, vocab)
}

#[test]
fn gold_transcripts_score_full_marks() {
    let out = common::synth(60, 4);
    let runs: Vec<DialogRun> = out.sessions.iter().map(DialogRun::gold).collect();
    let (inform, success) = inform_success(&runs, &out.sessions, &out.database).unwrap();
    assert_eq!((inform, success), (100.0, 100.0));
    let (m, f1) = match_succf1(&runs, &out.sessions, &out.database).unwrap();
    assert_eq!((m, f1), (100.0, 1.0));
    let r = report(&runs, &out.sessions, &out.database, &EvalOptions::default()).unwrap();
    assert_eq!((r.bleu, r.combined), (100.0, 200.0));
    assert!(inform_success(&runs[1..], &out.sessions, &out.database).is_err());
}

#[test]
fn oracle_generator_reproduces_gold() {
    let (splits, db, _) = corpus();
    // The vocabulary must cover the test split for the lookup to be exact.
    let all: Vec<_> = splits.train.iter().chain(&splits.test).cloned().collect();
    let vocab = Vocabulary::build(&all);
    let oracle = OracleGenerator::new(&splits.test, &vocab, 4096, 512);
    let (rep, runs) = evaluate(&oracle, &splits.test, &vocab, &db, &EvalOptions::default()).unwrap();
    for (run, s) in runs.iter().zip(&splits.test) {
        assert_eq!(run, &DialogRun::gold(s));
    }
    assert_eq!((rep.inform, rep.success, rep.bleu), (100.0, 100.0, 100.0));
    assert_eq!(rep.overflow_turns, 0);
}

#[test]
fn generated_responses_feed_the_next_context() {
    let (splits, _, vocab) = corpus();
    let w: Weights64 = Weights::init(&ModelConfig::micro(vocab.len())).unwrap();
    let s = splits.test.iter().find(|s| s.turns.len() >= 2).unwrap();
    let run = generate_dialog(&w, s, &vocab).unwrap();
    assert_eq!(run.turns[0].context, format!("<user> {}", s.turns[0].user.trim()));
    let expected = format!("<user> {} <system> {}", s.turns[0].user.trim(), run.turns[0].response.trim());
    assert!(run.turns[1].context.starts_with(&expected), "{}", run.turns[1].context);
    assert!(run.turns.iter().all(|t| t.turn < s.turns.len()));
}

#[test]
fn untrained_model_overflows_and_is_flagged() {
    let (splits, db, vocab) = corpus();
    let w: Weights64 = Weights::init(&ModelConfig::micro(vocab.len())).unwrap();
    let (rep, _) = evaluate(&w, &splits.test[..2], &vocab, &db, &EvalOptions::default()).unwrap();
    assert!(rep.overflow_turns > 0);
    assert!(rep.success <= rep.inform);
}

#[test]
fn probe_counts_revision_sessions() {
    let out = common::synth(80, 2);
    let runs: Vec<DialogRun> = out.sessions.iter().map(DialogRun::gold).collect();
    let p = repetition_probe(&runs, &out.sessions).unwrap();
    let revised = out
        .sessions
        .iter()
        .filter(|s| s.goal.revision_events.first().is_some_and(|e| e.turn > 0))
        .count();
    assert_eq!(p.sessions, revised);
    assert!((p.repeat_rate + p.advance_rate + p.other_rate - 1.0).abs() < 1e-12);
    let plain: Vec<_> = out.sessions.iter().filter(|s| !s.has_revision()).cloned().collect();
    let plain_runs: Vec<DialogRun> = plain.iter().map(DialogRun::gold).collect();
    assert!(repetition_probe(&plain_runs, &plain).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn success_never_exceeds_inform(seed in any::<u64>()) {
        let out = common::synth(20, seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut runs: Vec<DialogRun> = out.sessions.iter().map(DialogRun::gold).collect();
        // Blank a random subset of responses and beliefs.
        for run in &mut runs {
            for t in &mut run.turns {
                if rand::Rng::random_bool(&mut rng, 0.3) {
                    t.response.clear();
                }
                if rand::Rng::random_bool(&mut rng, 0.2) {
                    t.belief = Default::default();
                }
            }
        }
        let r = report(&runs, &out.sessions, &out.database, &EvalOptions::default()).unwrap();
        prop_assert!(r.success <= r.inform);
        for d in &r.per_dialog {
            prop_assert!(!d.success || d.inform);
        }
    }

    #[test]
    fn bleu_ignores_pair_order(seed in any::<u64>()) {
        let mut pairs: Vec<(&str, &str)> = CANDS.iter().copied().zip(REFS.iter().copied()).collect();
        pairs.push(("booked for you", "i have booked it"));
        let base = bleu(
            &pairs.iter().map(|p| p.0.to_string()).collect::<Vec<_>>(),
            &pairs.iter().map(|p| p.1.to_string()).collect::<Vec<_>>(),
            Smoothing::None,
        ).unwrap();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = bleu(
            &pairs.iter().map(|p| p.0.to_string()).collect::<Vec<_>>(),
            &pairs.iter().map(|p| p.1.to_string()).collect::<Vec<_>>(),
            Smoothing::None,
        ).unwrap();
        prop_assert!((base - shuffled).abs() < 1e-12);
        prop_assert!((0.0..=100.0).contains(&base));
    }
}
