//! Staged pre-training, fine-tuning and checkpoints.
//!
//! A run is a [`StageSchedule`] executed epoch by epoch over a [`TrainState`]. Batch
//! order, contrastive sampling and dropout draw from RNGs derived from
//! `(seed, stage, epoch)`, so a run resumed from an epoch-boundary checkpoint
//! continues exactly like an uninterrupted one.

mod checkpoint;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_hash, load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta,
    FORMAT_VERSION, MAGIC,
};
pub use metrics::{metrics_to_string, parse_metrics, read_metrics, write_metrics, MetricRecord};

use crate::autodiff::{adam_step, AdamConfig, AdamState, ParamVisitor, Reduction, Tensor};
use crate::corpus::linearize::linearize_turn;
use crate::corpus::{Database, DialogSession, SignatureGranularity, TargetKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, truncate_left, EvalOptions, EvalReport};
use crate::model::{Dropout, ModelConfig, PolicyEncoders, Weights};
use crate::objectives::{
    acl_loss, compose, gen_loss, logged_terms, session_consistency, AclReduction, Coefficients, LossBundle, Objective,
    Term,
};
use crate::sampler::{make_contrastive_batch, PolicyIndex, TurnRef};
use crate::scalar::Scalar;
use crate::tokenizer::{locate_span_ends, segment_of_positions, Segment, SpanEnds, TokenId, Vocabulary};

/// Pre-training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tpld,
    Multitask,
    TpldWoAcl,
    TpldWoSession,
    TpldWoGpc,
    NoPretrain,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Tpld,
        Mode::Multitask,
        Mode::TpldWoAcl,
        Mode::TpldWoSession,
        Mode::TpldWoGpc,
        Mode::NoPretrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Tpld => "tpld",
            Mode::Multitask => "multitask",
            Mode::TpldWoAcl => "tpld_wo_acl",
            Mode::TpldWoSession => "tpld_wo_session",
            Mode::TpldWoGpc => "tpld_wo_gpc",
            Mode::NoPretrain => "no_pretrain",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1,
    Stage2,
    Stage3,
    Multitask,
    Finetune,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Stage3 => "stage3",
            StageTag::Multitask => "multitask",
            StageTag::Finetune => "finetune",
        }
    }

    fn stream(self) -> u64 {
        match self {
            StageTag::Stage1 => 1,
            StageTag::Stage2 => 2,
            StageTag::Stage3 => 3,
            StageTag::Multitask => 4,
            StageTag::Finetune => 5,
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            StageTag::Stage1,
            StageTag::Stage2,
            StageTag::Stage3,
            StageTag::Multitask,
            StageTag::Finetune,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| Error::Checkpoint(format!("unknown stage tag `{s}`")))
    }
}

/// One phase of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub tag: StageTag,
    pub objective: Objective,
    pub epochs: usize,
    pub coefficients: Coefficients,
    pub lr: f64,
    pub batch_size: usize,
    /// Loss terms removed from this stage.
    pub disabled: BTreeSet<Term>,
}

impl StageSpec {
    /// Stages whose batches hold whole sessions plus contrastive positives.
    pub fn grouped(&self) -> bool {
        matches!(self.objective, Objective::Stage2 | Objective::Multitask)
    }

    pub fn terms(&self) -> Vec<Term> {
        logged_terms(self.objective, &self.disabled)
    }

    fn computes(&self, t: Term) -> bool {
        self.terms().contains(&t)
    }

    fn uses_sequence_encoders(&self) -> bool {
        self.computes(Term::Session)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<StageSpec>,
}

impl StageSchedule {
    /// Pre-training stages for `mode`; empty for `no_pretrain`.
    pub fn for_mode(mode: Mode, cfg: &TrainConfig) -> Self {
        let stage = |tag, objective, epochs, disabled: &[Term]| StageSpec {
            tag,
            objective,
            epochs,
            coefficients: cfg.coefficients,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            disabled: disabled.iter().copied().collect(),
        };
        let e = cfg.stage_epochs;
        let tpld = |disabled: &[Term]| {
            vec![
                stage(StageTag::Stage1, Objective::Stage1, e, &[]),
                stage(StageTag::Stage2, Objective::Stage2, e, disabled),
                stage(StageTag::Stage3, Objective::Stage3, e, &[]),
            ]
        };
        let stages = match mode {
            Mode::Tpld => tpld(&[]),
            Mode::TpldWoAcl => tpld(&[Term::Acl]),
            Mode::TpldWoSession => tpld(&[Term::Session]),
            Mode::TpldWoGpc => tpld(&[Term::Gpc]),
            Mode::Multitask => vec![stage(StageTag::Multitask, Objective::Multitask, 3 * e, &[])],
            Mode::NoPretrain => Vec::new(),
        };
        Self { stages }
    }

    pub fn validate(&self) -> Result<()> {
        let mut last: Option<StageTag> = None;
        for s in &self.stages {
            s.coefficients.validate()?;
            if s.epochs == 0 || s.batch_size == 0 {
                return Err(Error::Config(format!("{}: epochs and batch size must be positive", s.tag)));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("{}: learning rate {} must be positive", s.tag, s.lr)));
            }
            if s.tag == StageTag::Finetune {
                return Err(Error::Config("fine-tuning is not a pre-training stage".into()));
            }
            if let Some(prev) = last {
                if s.tag <= prev || prev == StageTag::Multitask || s.tag == StageTag::Multitask {
                    return Err(Error::Config(format!("stage {} cannot follow {prev}", s.tag)));
                }
            }
            last = Some(s.tag);
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

/// Training hyperparameters shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub coefficients: Coefficients,
    pub stage_epochs: usize,
    pub finetune_epochs: usize,
    /// Turns per batch in ungrouped stages.
    pub batch_size: usize,
    /// Whole sessions per batch in grouped stages.
    pub sessions_per_batch: usize,
    pub finetune_batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Positives `M` per anchor.
    pub positives: usize,
    pub granularity: SignatureGranularity,
    pub symmetrize_positives: bool,
    /// Fresh Adam moments at every stage boundary.
    pub reset_optimizer: bool,
    /// Treat `h^o` as a constant target in the turn and session terms.
    pub stop_grad_posterior: bool,
    pub gen_reduction: Reduction,
    pub acl_reduction: AclReduction,
    /// Keep the belief and act terms during fine-tuning.
    pub finetune_belief_act: bool,
    /// Keep the fine-tuning epoch with the best validation score instead of the last.
    pub select_best_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tpld,
            seed: 0,
            coefficients: Coefficients::default(),
            stage_epochs: 15,
            finetune_epochs: 10,
            batch_size: 16,
            sessions_per_batch: 4,
            finetune_batch_size: 16,
            lr: 5e-4,
            finetune_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            positives: 2,
            granularity: SignatureGranularity::Act,
            symmetrize_positives: false,
            reset_optimizer: true,
            stop_grad_posterior: false,
            gen_reduction: Reduction::Mean,
            acl_reduction: AclReduction::Sum,
            finetune_belief_act: true,
            select_best_epoch: true,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: five epochs per stage at a higher learning rate.
    pub fn desk() -> Self {
        Self {
            stage_epochs: 5,
            lr: 1e-3,
            finetune_lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coefficients.validate()?;
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.sessions_per_batch", self.sessions_per_batch),
            ("train.finetune_batch_size", self.finetune_batch_size),
            ("train.positives", self.positives),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("train.lr", self.lr), ("train.finetune_lr", self.finetune_lr), ("train.eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} = {v} must be positive")));
            }
        }
        for (k, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} = {v} outside [0, 1)")));
            }
        }
        if self.mode != Mode::NoPretrain && self.stage_epochs == 0 {
            return Err(Error::Config("train.stage_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule::for_mode(self.mode, self)
    }

    pub fn finetune_stage(&self) -> StageSpec {
        StageSpec {
            tag: StageTag::Finetune,
            objective: Objective::Finetune,
            epochs: self.finetune_epochs,
            coefficients: self.coefficients,
            lr: self.finetune_lr,
            batch_size: self.finetune_batch_size,
            disabled: if self.finetune_belief_act {
                BTreeSet::new()
            } else {
                [Term::GenB, Term::GenA].into()
            },
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Token ids of one turn: left-truncated context and the full three-segment target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTurn {
    pub context: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub ends: SpanEnds,
}

impl EncodedTurn {
    /// The target cut after the last segment `kind` needs.
    pub fn target_for(&self, kind: TargetKind) -> Result<&[TokenId]> {
        let end = match kind {
            TargetKind::Belief => self.ends.belief_end,
            TargetKind::BeliefAct => self.ends.act_end,
            TargetKind::All => self.ends.resp_end,
            other => return Err(Error::Config(format!("unsupported training target {other:?}"))),
        };
        let end = end.ok_or_else(|| Error::Corpus("target lacks a segment".into()))?;
        Ok(&self.target[..=end])
    }
}

/// Encoded turns, their policy index and the vocabulary they were encoded with.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub sessions: Vec<Vec<EncodedTurn>>,
    pub index: PolicyIndex,
    pub vocab_fingerprint: String,
}

impl TrainData {
    pub fn build(
        sessions: &[DialogSession],
        vocab: &Vocabulary,
        model: &ModelConfig,
        granularity: SignatureGranularity,
    ) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::Corpus("no training sessions".into()));
        }
        if vocab.len() != model.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.vocab_size
            )));
        }
        let mut out = Vec::with_capacity(sessions.len());
        for s in sessions {
            if s.turns.len() > model.max_turns {
                return Err(Error::Corpus(format!(
                    "session {} has {} turns, model allows {}",
                    s.session_id,
                    s.turns.len(),
                    model.max_turns
                )));
            }
            let mut turns = Vec::with_capacity(s.turns.len());
            for t in 0..s.turns.len() {
                let sample = linearize_turn(s, t, TargetKind::All)?;
                let context = vocab.encode(&sample.context);
                let target = vocab.encode(&sample.target);
                if target.len() > model.max_target {
                    return Err(Error::Corpus(format!(
                        "session {} turn {t}: target of {} tokens exceeds {}",
                        s.session_id,
                        target.len(),
                        model.max_target
                    )));
                }
                let ends = locate_span_ends(&target)?;
                turns.push(EncodedTurn {
                    context: truncate_left(&context, model.max_context).to_vec(),
                    target,
                    ends,
                });
            }
            out.push(turns);
        }
        Ok(Self {
            sessions: out,
            index: PolicyIndex::build(sessions, granularity)?,
            vocab_fingerprint: vocab.fingerprint(),
        })
    }

    pub fn turn(&self, r: TurnRef) -> &EncodedTurn {
        &self.sessions[r.session][r.turn]
    }

    pub fn refs(&self) -> Vec<TurnRef> {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(s, turns)| (0..turns.len()).map(move |t| TurnRef { session: s, turn: t }))
            .collect()
    }

    pub fn turn_count(&self) -> usize {
        self.sessions.iter().map(Vec::len).sum()
    }
}

/// The turns of one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    Turns(Vec<TurnRef>),
    /// Every turn of each listed session.
    Sessions(Vec<usize>),
}

/// Everything a run carries between epochs.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub weights: Weights<S>,
    pub encoders: PolicyEncoders<S>,
    pub model_opt: AdamState<S>,
    pub encoder_opt: AdamState<S>,
    /// Index of the stage in progress.
    pub stage: usize,
    /// Completed epochs of that stage.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<MetricRecord>,
    pub vocab_fingerprint: String,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, vocab_fingerprint: impl Into<String>) -> Result<Self> {
        Ok(Self {
            weights: Weights::init(model)?,
            encoders: PolicyEncoders::init(model)?,
            model_opt: AdamState::new(cfg.adam(cfg.lr)),
            encoder_opt: AdamState::new(cfg.adam(cfg.lr)),
            stage: 0,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            vocab_fingerprint: vocab_fingerprint.into(),
        })
    }

    /// Carries the weights into a fresh run: new optimizers, counters and log.
    pub fn restart(&self, cfg: &TrainConfig) -> Self {
        Self {
            weights: self.weights.clone(),
            encoders: self.encoders.clone(),
            model_opt: AdamState::new(cfg.adam(cfg.lr)),
            encoder_opt: AdamState::new(cfg.adam(cfg.lr)),
            stage: 0,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        }
    }
}

fn epoch_rngs(seed: u64, tag: StageTag, epoch: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let stream = (tag.stream() << 40) | ((epoch as u64) << 1);
    let mut batches = ChaCha8Rng::seed_from_u64(seed);
    batches.set_stream(stream);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    dropout.set_stream(stream | 1);
    (batches, dropout)
}

/// Shuffled batches of one epoch.
pub fn plan_epoch(data: &TrainData, stage: &StageSpec, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    if stage.grouped() {
        let mut order: Vec<usize> = (0..data.sessions.len()).collect();
        order.shuffle(rng);
        order
            .chunks(cfg.sessions_per_batch)
            .map(|c| Batch::Sessions(c.to_vec()))
            .collect()
    } else {
        let mut order = data.refs();
        order.shuffle(rng);
        order.chunks(stage.batch_size).map(|c| Batch::Turns(c.to_vec())).collect()
    }
}

fn base_target(objective: Objective) -> TargetKind {
    match objective {
        Objective::Stage1 => TargetKind::Belief,
        Objective::Stage2 => TargetKind::BeliefAct,
        Objective::Stage3 | Objective::Finetune | Objective::Multitask => TargetKind::All,
    }
}

/// Per-segment masks over the concatenated targets of `targets`.
fn segment_masks(targets: &[&[TokenId]]) -> (Vec<TokenId>, BTreeMap<Segment, Vec<bool>>) {
    let mut flat = Vec::new();
    let mut segs = Vec::new();
    for t in targets {
        flat.extend_from_slice(t);
        segs.extend(segment_of_positions(t));
    }
    let masks = [Segment::Belief, Segment::Act, Segment::Response]
        .into_iter()
        .map(|s| (s, segs.iter().map(|&x| x == s).collect()))
        .collect();
    (flat, masks)
}

/// Loss terms and total for one batch, recorded for backpropagation.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<S: Scalar>(
    weights: &Weights<S>,
    encoders: &PolicyEncoders<S>,
    data: &TrainData,
    batch: &Batch,
    stage: &StageSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    drop: &mut Dropout,
) -> Result<LossBundle<S>> {
    let base: Vec<TurnRef> = match batch {
        Batch::Turns(r) => r.clone(),
        Batch::Sessions(ss) => ss
            .iter()
            .flat_map(|&s| (0..data.sessions[s].len()).map(move |t| TurnRef { session: s, turn: t }))
            .collect(),
    };
    if base.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let kind = base_target(stage.objective);
    let contrastive = if stage.grouped() && stage.computes(Term::Acl) {
        Some(make_contrastive_batch(
            &base,
            &data.index,
            cfg.positives,
            cfg.symmetrize_positives,
            rng,
        )?)
    } else {
        None
    };
    let mut items: Vec<(&[TokenId], &[TokenId])> = Vec::new();
    for &r in &base {
        let t = data.turn(r);
        items.push((&t.context, t.target_for(kind)?));
    }
    if let Some(cb) = &contrastive {
        for &r in &cb.samples[cb.base_count..] {
            let t = data.turn(r);
            items.push((&t.context, t.target_for(TargetKind::Belief)?));
        }
    }
    let trace = weights.forward_batch(&items, drop)?;
    let n = base.len();
    let base_rows = trace.target_spans[n - 1].1;
    let logits = if trace.logits.rows() == base_rows {
        trace.logits.clone()
    } else {
        trace.logits.slice_rows(0, base_rows)?
    };
    let base_targets: Vec<&[TokenId]> = items[..n].iter().map(|(_, t)| *t).collect();
    let (flat, masks) = segment_masks(&base_targets);

    let mut terms = BTreeMap::new();
    for (term, seg) in [
        (Term::GenB, Segment::Belief),
        (Term::GenA, Segment::Act),
        (Term::GenR, Segment::Response),
    ] {
        if stage.computes(term) {
            terms.insert(term, gen_loss(&logits, &flat, &masks[&seg], cfg.gen_reduction)?);
        }
    }

    let row = |i: usize, pos: Option<usize>| -> Result<usize> {
        pos.map(|p| trace.target_spans[i].0 + p)
            .ok_or_else(|| Error::Corpus("target lacks a policy marker".into()))
    };
    if stage.computes(Term::Turn) || stage.computes(Term::Session) {
        let ends: Vec<SpanEnds> = base.iter().map(|&r| data.turn(r).ends).collect();
        let prior_rows = (0..n).map(|i| row(i, ends[i].belief_end)).collect::<Result<Vec<_>>>()?;
        let post_rows = (0..n).map(|i| row(i, ends[i].act_end)).collect::<Result<Vec<_>>>()?;
        let prior = trace.hidden.gather_rows(&prior_rows)?;
        let mut posterior = trace.hidden.gather_rows(&post_rows)?;
        if cfg.stop_grad_posterior {
            posterior = posterior.detach();
        }
        if stage.computes(Term::Turn) {
            let turn = prior.l2_sq(&posterior)?.scale(S::from_f64_lossy(1.0 / n as f64));
            terms.insert(Term::Turn, turn);
        }
        if stage.computes(Term::Session) {
            let Batch::Sessions(ss) = batch else {
                return Err(Error::Config("the session term needs session-grouped batches".into()));
            };
            let mut total: Option<Tensor<S>> = None;
            let mut start = 0;
            for &s in ss {
                let len = data.sessions[s].len();
                let rows: Vec<usize> = (start..start + len).collect();
                let l = session_consistency(&prior.gather_rows(&rows)?, &posterior.gather_rows(&rows)?, encoders)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => acc.add(&l)?,
                });
                start += len;
            }
            let total = total.expect("non-empty batch");
            terms.insert(Term::Session, total.scale(S::from_f64_lossy(1.0 / ss.len() as f64)));
        }
    }
    if let Some(cb) = &contrastive {
        let rows = cb
            .samples
            .iter()
            .enumerate()
            .map(|(i, &r)| row(i, data.turn(r).ends.belief_end))
            .collect::<Result<Vec<_>>>()?;
        let vectors = trace.hidden.gather_rows(&rows)?;
        terms.insert(
            Term::Acl,
            acl_loss(&vectors, &cb.positives, stage.coefficients.tau, cfg.acl_reduction)?,
        );
    }
    compose(stage.objective, terms, stage.coefficients, &stage.disabled)
}

fn describe(bundle: &LossBundle<impl Scalar>) -> String {
    bundle
        .terms
        .keys()
        .map(|&t| format!("{t}={}", bundle.value(t).unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One optimizer step on `batch`; returns the loss values before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    data: &TrainData,
    batch: &Batch,
    stage: &StageSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<Term, f64>> {
    let rate = state.weights.config.dropout;
    let bundle = batch_loss(
        &state.weights,
        &state.encoders,
        data,
        batch,
        stage,
        cfg,
        rng,
        &mut Dropout {
            rate,
            rng: Some(dropout_rng),
        },
    )?;
    let total = bundle.total_value();
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "{} epoch {} step {}: total={total} {}",
            stage.tag,
            state.epoch + 1,
            state.step,
            describe(&bundle)
        )));
    }
    bundle.total.backward()?;
    state.model_opt.hyper.lr = stage.lr;
    let step_err = |e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("{} step {}: {m}; {}", stage.tag, state.step, describe(&bundle))),
        other => other,
    };
    adam_step(&mut state.weights, &mut state.model_opt).map_err(step_err)?;
    if stage.uses_sequence_encoders() {
        state.encoder_opt.hyper.lr = stage.lr;
        adam_step(&mut state.encoders, &mut state.encoder_opt).map_err(step_err)?;
    } else {
        state.encoders.zero_grad();
    }
    state.step += 1;
    Ok(bundle.terms.keys().map(|&t| (t, bundle.value(t).unwrap())).collect())
}

/// Runs every remaining batch of the current epoch and returns per-term means.
fn run_epoch<S: Scalar>(
    state: &mut TrainState<S>,
    data: &TrainData,
    stage: &StageSpec,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRecord>> {
    let (mut rng, mut dropout_rng) = epoch_rngs(cfg.seed, stage.tag, state.epoch);
    let plan = plan_epoch(data, stage, cfg, &mut rng);
    let mut sums: BTreeMap<Term, f64> = BTreeMap::new();
    for batch in &plan {
        for (t, v) in train_step(state, data, batch, stage, cfg, &mut rng, &mut dropout_rng)? {
            *sums.entry(t).or_insert(0.0) += v;
        }
    }
    let epoch = state.epoch + 1;
    let records: Vec<MetricRecord> = stage
        .terms()
        .into_iter()
        .filter_map(|t| {
            sums.get(&t).map(|v| MetricRecord {
                stage: stage.tag,
                epoch,
                term: t.as_str().to_string(),
                value: v / plan.len() as f64,
            })
        })
        .collect();
    state.epoch = epoch;
    state.history.extend(records.iter().cloned());
    Ok(records)
}

fn check_vocab<S: Scalar>(state: &TrainState<S>, data: &TrainData) -> Result<()> {
    if state.vocab_fingerprint != data.vocab_fingerprint {
        return Err(Error::Checkpoint(format!(
            "vocabulary mismatch: weights built for {}, data encoded with {}",
            state.vocab_fingerprint, data.vocab_fingerprint
        )));
    }
    Ok(())
}

/// Progress notification for checkpointing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Epoch { stage: StageTag, epoch: usize },
    StageDone(StageTag),
}

/// Runs the remaining epochs of `stage`; resets the optimizers first when starting fresh.
pub fn run_stage<S: Scalar>(
    state: &mut TrainState<S>,
    stage: &StageSpec,
    data: &TrainData,
    cfg: &TrainConfig,
    on_progress: &mut dyn FnMut(&TrainState<S>, Progress) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    check_vocab(state, data)?;
    if state.epoch == 0 && cfg.reset_optimizer {
        state.model_opt.reset();
        state.encoder_opt.reset();
    }
    let mut out = Vec::new();
    while state.epoch < stage.epochs {
        let records = run_epoch(state, data, stage, cfg)?;
        log::info!(
            "{} epoch {}/{}: {}",
            stage.tag,
            state.epoch,
            stage.epochs,
            records
                .iter()
                .map(|r| format!("{}={:.4}", r.term, r.value))
                .collect::<Vec<_>>()
                .join(" ")
        );
        out.extend(records);
        on_progress(
            state,
            Progress::Epoch {
                stage: stage.tag,
                epoch: state.epoch,
            },
        )?;
    }
    Ok(out)
}

/// Executes the schedule from the state's stage pointer to the end.
pub fn run_schedule<S: Scalar>(
    state: &mut TrainState<S>,
    schedule: &StageSchedule,
    data: &TrainData,
    cfg: &TrainConfig,
    on_progress: &mut dyn FnMut(&TrainState<S>, Progress) -> Result<()>,
) -> Result<()> {
    schedule.validate()?;
    while state.stage < schedule.stages.len() {
        let stage = &schedule.stages[state.stage];
        run_stage(state, stage, data, cfg, on_progress)?;
        state.stage += 1;
        state.epoch = 0;
        on_progress(state, Progress::StageDone(stage.tag))?;
    }
    Ok(())
}

/// Held-out dialogs for picking the fine-tuning epoch.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub sessions: &'a [DialogSession],
    pub vocab: &'a Vocabulary,
    pub db: &'a Database,
    pub options: EvalOptions,
}

impl Validation<'_> {
    pub fn score<S: Scalar>(&self, weights: &Weights<S>) -> Result<EvalReport> {
        Ok(evaluate(weights, self.sessions, self.vocab, self.db, &self.options)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<S: Scalar> {
    /// State after the last epoch, with the selected epoch's weights.
    pub state: TrainState<S>,
    /// 1-based.
    pub best_epoch: usize,
    /// Validation Combined per epoch.
    pub scores: Vec<f64>,
}

/// Index of the largest score; the earliest wins ties.
pub fn best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fine-tunes from `start` with fresh optimizers, keeping the best validation epoch.
pub fn finetune<S: Scalar>(
    start: &TrainState<S>,
    data: &TrainData,
    cfg: &TrainConfig,
    validation: Option<&Validation>,
) -> Result<FinetuneOutcome<S>> {
    check_vocab(start, data)?;
    let stage = cfg.finetune_stage();
    if stage.epochs == 0 {
        return Err(Error::Config("train.finetune_epochs must be positive".into()));
    }
    let mut state = start.restart(cfg);
    let mut scores = Vec::new();
    let mut best: Option<(f64, Weights<S>)> = None;
    while state.epoch < stage.epochs {
        run_epoch(&mut state, data, &stage, cfg)?;
        if let (Some(v), true) = (validation, cfg.select_best_epoch) {
            let report = v.score(&state.weights)?;
            log::info!("finetune epoch {}: validation combined {:.2}", state.epoch, report.combined);
            state.history.push(MetricRecord {
                stage: StageTag::Finetune,
                epoch: state.epoch,
                term: "valid_combined".into(),
                value: report.combined,
            });
            if best.as_ref().is_none_or(|(b, _)| report.combined > *b) {
                best = Some((report.combined, state.weights.clone()));
            }
            scores.push(report.combined);
        }
    }
    let best_epoch = best_epoch(&scores).map_or(stage.epochs, |i| i + 1);
    if let Some((_, w)) = best {
        state.weights = w;
    }
    Ok(FinetuneOutcome {
        state,
        best_epoch,
        scores,
    })
}
