#![allow(dead_code)]

use std::path::PathBuf;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tpld::autodiff::{grad_check_params, join_name, ParamVisitor, Tensor};
use tpld::corpus::io::load_corpus;
use tpld::corpus::synth::{synthesize_corpus, SynthOutput, SynthSpec};
use tpld::corpus::{DialogSession, SignatureGranularity};
use tpld::model::{Dropout, ModelConfig, PolicyEncoders, Weights};
use tpld::objectives::{acl_loss, AclReduction, Term};
use tpld::sampler::{make_contrastive_batch, TurnRef};
use tpld::tokenizer::{
    TokenId, Vocabulary, BOS_ACT_ID, BOS_BELIEF_ID, BOS_RESP_ID, EOS_ACT_ID, EOS_BELIEF_ID, EOS_ID, EOS_RESP_ID,
};
use tpld::trainer::{
    batch_loss, metrics_to_string, parse_metrics, run_schedule, train_step, Batch, Mode, StageSchedule, StageSpec,
    StageTag, TrainConfig, TrainData, TrainState,
};
use tpld::{PolicyEncoders64, Weights64};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The hand-written 3-session, 7-turn corpus.
pub fn three_sessions() -> Vec<DialogSession> {
    load_corpus(fixture("three_sessions.jsonl")).expect("fixture loads")
}

pub fn synth(n_sessions: usize, seed: u64) -> SynthOutput {
    synthesize_corpus(&SynthSpec {
        n_sessions,
        seed,
        ..SynthSpec::default()
    })
    .expect("synthesis succeeds")
}

/// Supervised contrastive loss written as the literal double loop over anchors and
/// positives, with cosine similarity over `tau` as the score.
pub fn acl_double_loop(vectors: &[Vec<f64>], positives: &[Vec<usize>], tau: f64) -> f64 {
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = 0.0;
    for (i, ps) in positives.iter().enumerate() {
        for &p in ps {
            let num = (dot(&unit[i], &unit[p]) / tau).exp();
            let mut den = 0.0;
            for l in 0..unit.len() {
                if l != i {
                    den += (dot(&unit[i], &unit[l]) / tau).exp();
                }
            }
            loss -= (num / den).ln();
        }
    }
    loss
}

/// Textbook Adam on one flat parameter vector.
pub fn adam_reference(
    mut x: Vec<f64>,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
) -> Vec<f64> {
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    for t in 1..=steps {
        let g = grad(&x);
        for j in 0..x.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1.powi(t as i32));
            let vh = v[j] / (1.0 - b2.powi(t as i32));
            x[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    x
}

/// Small corpus, its vocabulary and a micro model sized to fit it.
pub struct Micro {
    pub synth: SynthOutput,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub data: TrainData,
}

pub fn micro(n_sessions: usize, seed: u64) -> Micro {
    let synth = synth(n_sessions, seed);
    let vocab = Vocabulary::build(&synth.sessions);
    let mut model = ModelConfig::micro(vocab.len());
    model.max_context = 64;
    model.max_target = 64;
    let data = TrainData::build(&synth.sessions, &vocab, &model, SignatureGranularity::Act).expect("data builds");
    Micro {
        synth,
        vocab,
        model,
        data,
    }
}

/// Model weights and policy encoders checked as one parameter set.
#[derive(Debug, Clone)]
pub struct Joint {
    pub weights: Weights64,
    pub encoders: PolicyEncoders64,
}

impl ParamVisitor<f64> for Joint {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
        self.weights.visit_prefixed(&join_name(prefix, "model"), f);
        self.encoders.visit_prefixed(&join_name(prefix, "sequence"), f);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        self.weights.visit_prefixed_mut(&join_name(prefix, "model"), f);
        self.encoders.visit_prefixed_mut(&join_name(prefix, "sequence"), f);
    }
}

/// A well-formed three-segment target with random bodies, plus its belief and act end positions.
pub fn random_target(rng: &mut ChaCha8Rng, vocab_size: usize, max_body: usize) -> (Vec<TokenId>, usize, usize) {
    let body = |rng: &mut ChaCha8Rng| -> Vec<TokenId> {
        let n = rng.random_range(1..=max_body);
        (0..n).map(|_| rng.random_range(EOS_ID + 1..vocab_size)).collect()
    };
    let mut t = vec![BOS_BELIEF_ID];
    t.extend(body(rng));
    let belief_end = t.len();
    t.push(EOS_BELIEF_ID);
    t.push(BOS_ACT_ID);
    t.extend(body(rng));
    let act_end = t.len();
    t.push(EOS_ACT_ID);
    t.push(BOS_RESP_ID);
    t.extend(body(rng));
    t.push(EOS_RESP_ID);
    (t, belief_end, act_end)
}

pub fn random_ids(rng: &mut ChaCha8Rng, vocab_size: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(EOS_ID + 1..vocab_size)).collect()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Largest gap between `acl_loss` and the double loop over `batches` random batches
/// (N ≤ 4 anchors, M ≤ 2 positives each, d ≤ 8).
pub fn acl_oracle_gap(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let n = rng.random_range(2..=4);
        let m = rng.random_range(1..=2);
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.1..2.0);
        let rows = n * (m + 1);
        let vectors: Vec<Vec<f64>> = (0..rows).map(|_| normal_vec(&mut rng, d)).collect();
        let mut positives = vec![Vec::new(); rows];
        for (i, p) in positives.iter_mut().enumerate().take(n) {
            *p = (n + i * m..n + (i + 1) * m).collect();
        }
        let t = Tensor::<f64>::constant(vec![rows, d], vectors.concat()).unwrap();
        let fast = acl_loss(&t, &positives, tau, AclReduction::Sum).unwrap().item();
        worst = worst.max((fast - acl_double_loop(&vectors, &positives, tau)).abs());
    }
    worst
}

/// Two orthogonal unit vectors, each present twice and paired with its copy.
pub fn acl_orthogonal_fixture() -> f64 {
    let v = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let t = Tensor::<f64>::constant(vec![4, 2], v.to_vec()).unwrap();
    acl_loss(&t, &[vec![2], vec![3], vec![0], vec![1]], 1.0, AclReduction::Sum).unwrap().item()
}

/// Gradient checks of every loss term and every stage composition through the micro
/// model in f64; returns `(name, max relative error)`.
pub fn objective_grad_checks(stride: usize) -> Vec<(String, f64)> {
    let m = micro(12, 3);
    let mut cfg = TrainConfig::desk();
    cfg.sessions_per_batch = 2;
    let joint = Joint {
        weights: Weights::init(&m.model).unwrap(),
        encoders: PolicyEncoders::init(&m.model).unwrap(),
    };
    let tpld = StageSchedule::for_mode(Mode::Tpld, &cfg).stages;
    let multitask = StageSchedule::for_mode(Mode::Multitask, &cfg).stages[0].clone();
    let turns = Batch::Turns(m.data.refs()[..3].to_vec());
    let sessions = Batch::Sessions(vec![0, 1]);
    let check = |stage: &StageSpec, term: Option<Term>| {
        let batch = if stage.grouped() { &sessions } else { &turns };
        let f = |j: &Joint| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let b = batch_loss(&j.weights, &j.encoders, &m.data, batch, stage, &cfg, &mut rng, &mut Dropout::off())?;
            Ok(match term {
                Some(t) => b.terms[&t].clone(),
                None => b.total,
            })
        };
        grad_check_params(&joint, f, 1e-5, stride).unwrap()
    };
    let mut out = Vec::new();
    for t in Term::ALL {
        out.push((t.as_str().to_string(), check(&multitask, Some(t))));
    }
    let mut compositions: Vec<(String, StageSpec)> =
        tpld.iter().map(|s| (s.tag.as_str().to_string(), s.clone())).collect();
    compositions.push(("finetune".into(), cfg.finetune_stage()));
    compositions.push(("multitask".into(), multitask.clone()));
    for (name, stage) in &compositions {
        out.push((name.clone(), check(stage, None)));
    }
    out
}

/// Checks one contrastive batch against the sampler contract; `None` when it holds.
pub fn sampler_violation(data: &TrainData, base: &[TurnRef], m: usize, rng: &mut ChaCha8Rng) -> Option<String> {
    let b = make_contrastive_batch(base, &data.index, m, false, rng).unwrap();
    let n = base.len();
    if b.samples.len() != (m + 1) * n || b.base_count != n || b.samples[..n] != *base {
        return Some(format!("batch of {} for N={n}, M={m}", b.samples.len()));
    }
    let in_base: BTreeSet<TurnRef> = base.iter().copied().collect();
    for (i, ps) in b.positives.iter().enumerate() {
        for &p in ps {
            if p == i || p < n || in_base.contains(&b.samples[p]) {
                return Some(format!("positive {p} of anchor {i} is the anchor or in the base batch"));
            }
            if data.index.signature(b.samples[p]) != data.index.signature(b.samples[i]) {
                return Some(format!("positive {p} of anchor {i} has another signature"));
            }
        }
    }
    None
}

/// Draws `count` base batches of random size (or `n` when given) and checks each.
pub fn sampler_contract(data: &TrainData, count: usize, n: Option<usize>, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs = data.refs();
    for k in 0..count {
        let size = n.unwrap_or_else(|| rng.random_range(2..=16));
        let m = rng.random_range(1..=3);
        let mut pool = refs.clone();
        rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut rng);
        if let Some(v) = sampler_violation(data, &pool[..size], m, &mut rng) {
            return Err(format!("batch {k}: {v}"));
        }
    }
    Ok(())
}

/// Prior blindness over `count` random models and targets; returns the number of
/// fixtures whose `h^r` moved when act and response tokens were replaced.
pub fn prior_blindness_failures(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for k in 0..count {
        let mut c = ModelConfig::micro(50);
        c.seed = seed.wrapping_add(k as u64);
        let w: Weights64 = Weights::init(&c).unwrap();
        let len = rng.random_range(1..20);
        let ctx = random_ids(&mut rng, 50, len);
        let (t, b_end, _) = random_target(&mut rng, 50, 6);
        let (other, o_end, _) = random_target(&mut rng, 50, 6);
        let mut swapped = t[..=b_end].to_vec();
        swapped.extend_from_slice(&other[o_end + 1..]);
        let a = w.forward(&ctx, &t).unwrap();
        let b = w.forward(&ctx, &swapped).unwrap();
        if a.hidden.row(b_end) != b.hidden.row(b_end) {
            failures += 1;
        }
    }
    failures
}

/// Whether replacing one belief token changes `h^o` on a fixed fixture.
pub fn belief_edit_moves_posterior() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Weights64 = Weights::init(&ModelConfig::micro(60)).unwrap();
    let ctx = random_ids(&mut rng, 60, 10);
    let (t, _, a_end) = random_target(&mut rng, 60, 5);
    let mut edited = t.clone();
    edited[1] = if t[1] == 20 { 21 } else { 20 };
    let h = w.forward(&ctx, &t).unwrap();
    let g = w.forward(&ctx, &edited).unwrap();
    h.hidden.row(a_end) != g.hidden.row(a_end)
}

pub fn flat_params<S: tpld::Scalar, M: ParamVisitor<S>>(m: &M) -> Vec<S> {
    let mut v = Vec::new();
    m.visit(&mut |_, t| v.extend_from_slice(t.data()));
    v
}

/// Desk training config shrunk to one epoch per stage and small batches.
pub fn quick_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.stage_epochs = 1;
    cfg.finetune_epochs = 1;
    cfg.batch_size = 8;
    cfg.sessions_per_batch = 2;
    cfg
}

/// Runs the TPLD schedule and checks that the metrics log introduces terms stage by
/// stage, and that each stage's total is the stated combination of its terms.
pub fn stage_progression(m: &Micro) -> Result<(), String> {
    let cfg = quick_config();
    let schedule = StageSchedule::for_mode(Mode::Tpld, &cfg);
    let mut state: TrainState<f32> = TrainState::new(&m.model, &cfg, m.data.vocab_fingerprint.clone()).unwrap();
    run_schedule(&mut state, &schedule, &m.data, &cfg, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    let log = parse_metrics(&metrics_to_string(&state.history).unwrap()).unwrap();
    let expected: [(StageTag, &[&str]); 3] = [
        (StageTag::Stage1, &["gen_b"]),
        (StageTag::Stage2, &["gen_b", "gen_a", "turn", "session", "gpc", "acl"]),
        (StageTag::Stage3, &["gen_b", "gen_a", "gen_r"]),
    ];
    for (tag, terms) in expected {
        let got: BTreeSet<&str> = log.iter().filter(|r| r.stage == tag).map(|r| r.term.as_str()).collect();
        let want: BTreeSet<&str> = terms.iter().copied().collect();
        if got != want {
            return Err(format!("{tag} logs {got:?}, expected {want:?}"));
        }
    }
    if log.iter().any(|r| !matches!(r.stage, StageTag::Stage1 | StageTag::Stage2 | StageTag::Stage3)) {
        return Err("records outside the three stages".into());
    }

    let weights: Weights<f64> = Weights::init(&m.model).unwrap();
    let encoders: PolicyEncoders<f64> = PolicyEncoders::init(&m.model).unwrap();
    let c = cfg.coefficients;
    for stage in &schedule.stages {
        let batch = if stage.grouped() { Batch::Sessions(vec![0, 1]) } else { Batch::Turns(m.data.refs()[..4].to_vec()) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch_loss(&weights, &encoders, &m.data, &batch, stage, &cfg, &mut rng, &mut Dropout::off()).unwrap();
        let v = |t| b.value(t).unwrap();
        let want = match stage.tag {
            StageTag::Stage1 => v(Term::GenB),
            StageTag::Stage2 => c.gamma * v(Term::GenB) + v(Term::GenA) + c.alpha * v(Term::Gpc) + c.beta * v(Term::Acl),
            _ => c.gamma * (v(Term::GenB) + v(Term::GenA)) + v(Term::GenR),
        };
        if (b.total_value() - want).abs() > 1e-9 * (1.0 + want.abs()) {
            return Err(format!("{} total {} is not {want}", stage.tag, b.total_value()));
        }
    }
    Ok(())
}

/// One stage-3 step with γ = 0 against one step of response-only training on the same batch.
pub fn gamma_zero_step_identity(m: &Micro) -> Result<(), String> {
    let mut cfg = quick_config();
    cfg.coefficients.gamma = 0.0;
    let stage3 = StageSchedule::for_mode(Mode::Tpld, &cfg).stages[2].clone();
    let mut response_only = cfg.clone();
    response_only.finetune_belief_act = false;
    response_only.finetune_lr = stage3.lr;
    response_only.finetune_batch_size = stage3.batch_size;
    let ft = response_only.finetune_stage();
    let batch = Batch::Turns(m.data.refs()[..6].to_vec());
    let step = |stage: &StageSpec| {
        let mut state: TrainState<f32> = TrainState::new(&m.model, &cfg, m.data.vocab_fingerprint.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(4);
        let terms = train_step(&mut state, &m.data, &batch, stage, &cfg, &mut rng, &mut drop_rng).unwrap();
        (flat_params(&state.weights), terms)
    };
    let (a, a_terms) = step(&stage3);
    let (b, b_terms) = step(&ft);
    if !a_terms.contains_key(&Term::GenB) || b_terms.contains_key(&Term::GenB) {
        return Err("unexpected logged terms".into());
    }
    if a_terms[&Term::GenR].to_bits() != b_terms[&Term::GenR].to_bits() {
        return Err("response losses differ".into());
    }
    let differing = a.iter().zip(&b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    if differing > 0 {
        return Err(format!("{differing} of {} parameters differ after one step", a.len()));
    }
    Ok(())
}
