//! Chained end-to-end inference and dialog metrics.
//!
//! Each turn is decoded as belief, then acts, then response, with the context built
//! from the user utterances and the responses generated so far.

mod bleu;
mod metrics;

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, Smoothing};
pub use metrics::{
    combined, inform_success, match_succf1, repetition_probe, score_dialog, succ_f1, DialogScore, ProbeReport,
};

use crate::autodiff::no_grad;
use crate::corpus::linearize::{context_text, linearize_turn};
use crate::corpus::{ActType, BeliefState, Database, DialogAct, DialogSession, Domain, Slot, TargetKind};
use crate::error::{Error, Result};
use crate::model::{argmax, Decoded, Dropout, Weights};
use crate::scalar::Scalar;
use crate::tokenizer::{
    segment_of_positions, Segment, TokenId, Vocabulary, BOS_ACT_ID, BOS_BELIEF_ID, BOS_RESP_ID, EOS_ACT_ID,
    EOS_BELIEF_ID, EOS_RESP_ID,
};

/// Anything that can extend a target prefix for a given context.
pub trait SegmentGenerator {
    fn max_context(&self) -> usize;
    fn max_target(&self) -> usize;
    fn continue_target(&self, context: &[TokenId], prefix: &[TokenId], stop: TokenId, max_new: usize)
        -> Result<Decoded>;
}

impl<S: Scalar> SegmentGenerator for Weights<S> {
    fn max_context(&self) -> usize {
        self.config.max_context
    }
    fn max_target(&self) -> usize {
        self.config.max_target
    }
    fn continue_target(
        &self,
        context: &[TokenId],
        prefix: &[TokenId],
        stop: TokenId,
        max_new: usize,
    ) -> Result<Decoded> {
        self.greedy_continue(context, prefix, stop, max_new)
    }
}

/// Keeps the most recent `max` tokens.
pub fn truncate_left(ids: &[TokenId], max: usize) -> &[TokenId] {
    &ids[ids.len().saturating_sub(max)..]
}

/// Replays gold targets; a lookup table keyed by the encoded context.
#[derive(Debug, Clone)]
pub struct OracleGenerator {
    targets: HashMap<Vec<TokenId>, Vec<TokenId>>,
    max_context: usize,
    max_target: usize,
}

impl OracleGenerator {
    pub fn new(sessions: &[DialogSession], vocab: &Vocabulary, max_context: usize, max_target: usize) -> Self {
        let mut targets = HashMap::new();
        for s in sessions {
            for t in 0..s.turns.len() {
                let sample = linearize_turn(s, t, TargetKind::All).expect("turn in range");
                let ctx = vocab.encode(&sample.context);
                targets.insert(truncate_left(&ctx, max_context).to_vec(), vocab.encode(&sample.target));
            }
        }
        Self {
            targets,
            max_context,
            max_target,
        }
    }
}

impl SegmentGenerator for OracleGenerator {
    fn max_context(&self) -> usize {
        self.max_context
    }
    fn max_target(&self) -> usize {
        self.max_target
    }
    fn continue_target(
        &self,
        context: &[TokenId],
        prefix: &[TokenId],
        stop: TokenId,
        max_new: usize,
    ) -> Result<Decoded> {
        let gold = self
            .targets
            .get(context)
            .ok_or_else(|| Error::Eval("oracle has no entry for this context".into()))?;
        if !gold.starts_with(prefix) {
            return Err(Error::Eval("prefix diverges from the gold target".into()));
        }
        let mut ids = Vec::new();
        for &id in &gold[prefix.len()..] {
            if ids.len() == max_new {
                break;
            }
            ids.push(id);
            if id == stop {
                return Ok(Decoded { ids, stopped: true });
            }
        }
        Ok(Decoded { ids, stopped: false })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub turn: usize,
    pub context: String,
    pub belief_text: String,
    pub belief: BeliefState,
    pub acts_text: String,
    pub acts: BTreeSet<DialogAct>,
    pub response: String,
    /// A segment hit the length limit before its closing marker.
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogRun {
    pub session_id: String,
    pub turns: Vec<TurnPrediction>,
}

impl DialogRun {
    /// The gold transcript in run form.
    pub fn gold(session: &DialogSession) -> Self {
        let mut turns = Vec::with_capacity(session.turns.len());
        for (i, t) in session.turns.iter().enumerate() {
            let history = session.turns[..i]
                .iter()
                .map(|p| (p.user.as_str(), p.response_delex.as_str()));
            turns.push(TurnPrediction {
                turn: i,
                context: context_text(history, &t.user),
                belief_text: t.belief.words(),
                belief: t.belief.clone(),
                acts_text: t.acts.iter().map(DialogAct::words).collect::<Vec<_>>().join(" "),
                acts: t.acts.clone(),
                response: t.response_delex.clone(),
                overflow: false,
            });
        }
        Self {
            session_id: session.session_id.clone(),
            turns,
        }
    }
}

/// Parses `domain slot value ...` triples; values run until the next `domain slot` pair.
pub fn parse_belief(text: &str) -> BeliefState {
    let words: Vec<&str> = text.split_whitespace().collect();
    let head = |i: usize| -> Option<(Domain, Slot)> {
        let d: Domain = words.get(i)?.parse().ok()?;
        let s: Slot = words.get(i + 1)?.parse().ok()?;
        d.has_slot(s).then_some((d, s))
    };
    let mut belief = BeliefState::default();
    let mut i = 0;
    while i < words.len() {
        let Some((d, s)) = head(i) else {
            i += 1;
            continue;
        };
        let mut j = i + 2;
        while j < words.len() && head(j).is_none() {
            j += 1;
        }
        if j > i + 2 {
            belief.set(d, s, words[i + 2..j].join(" "));
        }
        i = j;
    }
    belief
}

/// Parses `domain act [slot]` groups, skipping anything that is not a valid act.
pub fn parse_acts(text: &str) -> BTreeSet<DialogAct> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i + 1 < words.len() {
        let (Ok(d), Ok(a)) = (words[i].parse::<Domain>(), words[i + 1].parse::<ActType>()) else {
            i += 1;
            continue;
        };
        let slot = words.get(i + 2).and_then(|w| w.parse::<Slot>().ok());
        if let Some(s) = slot {
            if let Ok(act) = DialogAct::new(d, a, Some(s)) {
                out.insert(act);
                i += 3;
                continue;
            }
        }
        if let Ok(act) = DialogAct::new(d, a, None) {
            out.insert(act);
        }
        i += 2;
    }
    out
}

/// Runs one dialog with generated responses fed back into the context.
pub fn generate_dialog<G: SegmentGenerator + ?Sized>(
    generator: &G,
    session: &DialogSession,
    vocab: &Vocabulary,
) -> Result<DialogRun> {
    let mut history: Vec<(String, String)> = Vec::new();
    let mut turns = Vec::with_capacity(session.turns.len());
    let max_target = generator.max_target();
    for (t, gold) in session.turns.iter().enumerate() {
        let context = context_text(history.iter().map(|(u, r)| (u.as_str(), r.as_str())), &gold.user);
        let full = vocab.encode(&context);
        let ctx = truncate_left(&full, generator.max_context());
        let mut target: Vec<TokenId> = vec![BOS_BELIEF_ID];
        let mut bodies: [Vec<TokenId>; 3] = Default::default();
        let mut overflow = false;
        let plan = [
            (EOS_BELIEF_ID, Some(BOS_ACT_ID)),
            (EOS_ACT_ID, Some(BOS_RESP_ID)),
            (EOS_RESP_ID, None),
        ];
        for (k, (stop, next_open)) in plan.into_iter().enumerate() {
            let room = max_target.saturating_sub(target.len());
            let d = generator.continue_target(ctx, &target, stop, room)?;
            let body_len = if d.stopped { d.ids.len() - 1 } else { d.ids.len() };
            bodies[k] = d.ids[..body_len].to_vec();
            target.extend_from_slice(&d.ids);
            if !d.stopped {
                overflow = true;
                if target.len() >= max_target {
                    break;
                }
                target.push(stop);
            }
            if let Some(open) = next_open {
                if target.len() >= max_target {
                    overflow = true;
                    break;
                }
                target.push(open);
            }
        }
        let belief_text = vocab.decode(&bodies[0])?;
        let acts_text = vocab.decode(&bodies[1])?;
        let response = vocab.decode(&bodies[2])?;
        history.push((gold.user.clone(), response.clone()));
        turns.push(TurnPrediction {
            turn: t,
            context,
            belief: parse_belief(&belief_text),
            belief_text,
            acts: parse_acts(&acts_text),
            acts_text,
            response,
            overflow,
        });
    }
    Ok(DialogRun {
        session_id: session.session_id.clone(),
        turns,
    })
}

/// Metric family used for the combined score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusStyle {
    /// `(inform + success)·0.5 + bleu`.
    #[default]
    Multiwoz,
    /// `(match + succ_f1)·0.5 + bleu`.
    InCar,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub style: CorpusStyle,
    pub smoothing: Smoothing,
    /// Resolve the offered entity with the gold belief instead of the generated one.
    pub oracle_belief: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub style: CorpusStyle,
    pub dialogs: usize,
    pub bleu: f64,
    pub inform: f64,
    pub success: f64,
    #[serde(rename = "match")]
    pub match_rate: f64,
    pub succ_f1: f64,
    pub combined: f64,
    pub overflow_turns: usize,
    pub probe: Option<ProbeReport>,
    pub per_dialog: Vec<DialogScore>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8}", "metric", "value");
        for (k, v) in [
            ("bleu", self.bleu),
            ("inform", self.inform),
            ("success", self.success),
            ("match", self.match_rate),
            ("succ_f1", self.succ_f1),
            ("combined", self.combined),
        ] {
            let _ = writeln!(s, "{k:<16} {v:>8.2}");
        }
        let _ = writeln!(s, "{:<16} {:>8}", "dialogs", self.dialogs);
        let _ = writeln!(s, "{:<16} {:>8}", "overflow_turns", self.overflow_turns);
        if let Some(p) = &self.probe {
            let _ = writeln!(s, "{:<16} {:>8}", "probe_sessions", p.sessions);
            let _ = writeln!(s, "{:<16} {:>8.3}", "probe_repeat", p.repeat_rate);
            let _ = writeln!(s, "{:<16} {:>8.3}", "probe_advance", p.advance_rate);
            let _ = writeln!(s, "{:<16} {:>8.3}", "probe_other", p.other_rate);
        }
        s
    }
}

/// Scores finished runs against their sessions.
pub fn report(
    runs: &[DialogRun],
    sessions: &[DialogSession],
    db: &Database,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if runs.len() != sessions.len() {
        return Err(Error::Eval(format!("{} runs for {} sessions", runs.len(), sessions.len())));
    }
    if runs.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    let mut per_dialog = Vec::with_capacity(runs.len());
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (run, s) in runs.iter().zip(sessions) {
        per_dialog.push(score_dialog(run, s, db, options.oracle_belief)?);
        if run.turns.len() != s.turns.len() {
            return Err(Error::Eval(format!("run {} has {} turns", run.session_id, run.turns.len())));
        }
        for (p, g) in run.turns.iter().zip(&s.turns) {
            cands.push(p.response.clone());
            refs.push(g.response_delex.clone());
        }
    }
    let n = per_dialog.len() as f64;
    let pct = |f: &dyn Fn(&DialogScore) -> bool| 100.0 * per_dialog.iter().filter(|d| f(d)).count() as f64 / n;
    let inform = pct(&|d| d.inform);
    let success = pct(&|d| d.success);
    let f1 = 100.0 * per_dialog.iter().map(|d| d.succ_f1).sum::<f64>() / n;
    let bleu = bleu(&cands, &refs, options.smoothing)?;
    let combined = match options.style {
        CorpusStyle::Multiwoz => combined(inform, success, bleu),
        CorpusStyle::InCar => combined(inform, f1, bleu),
    };
    Ok(EvalReport {
        style: options.style,
        dialogs: runs.len(),
        bleu,
        inform,
        success,
        match_rate: inform,
        succ_f1: f1,
        combined,
        overflow_turns: runs.iter().flat_map(|r| &r.turns).filter(|t| t.overflow).count(),
        probe: repetition_probe(runs, sessions),
        per_dialog,
    })
}

/// Generates every session and scores the result.
pub fn evaluate<G: SegmentGenerator + ?Sized>(
    generator: &G,
    sessions: &[DialogSession],
    vocab: &Vocabulary,
    db: &Database,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<DialogRun>)> {
    let runs = sessions
        .iter()
        .map(|s| generate_dialog(generator, s, vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok((report(&runs, sessions, db, options)?, runs))
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: String,
    pub turn: usize,
    pub belief: String,
    pub acts: String,
    pub response: String,
}

pub fn prediction_records(runs: &[DialogRun]) -> Vec<PredictionRecord> {
    runs.iter()
        .flat_map(|r| {
            r.turns.iter().map(|t| PredictionRecord {
                session_id: r.session_id.clone(),
                turn: t.turn,
                belief: t.belief_text.clone(),
                acts: t.acts_text.clone(),
                response: t.response.clone(),
            })
        })
        .collect()
}

/// Teacher-forced accuracy of the model's argmax over one segment's tokens, opening marker excluded.
pub fn segment_token_accuracy<S: Scalar>(
    weights: &Weights<S>,
    items: &[(Vec<TokenId>, Vec<TokenId>)],
    segment: Segment,
    batch: usize,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    no_grad(|| -> Result<()> {
        for chunk in items.chunks(batch.max(1)) {
            let refs: Vec<(&[TokenId], &[TokenId])> =
                chunk.iter().map(|(c, t)| (c.as_slice(), t.as_slice())).collect();
            let trace = weights.forward_batch(&refs, &mut Dropout::off())?;
            for (i, (_, tgt)) in chunk.iter().enumerate() {
                let (start, _) = trace.target_spans[i];
                for (pos, seg) in segment_of_positions(tgt).into_iter().enumerate() {
                    if seg != segment || matches!(tgt[pos], BOS_BELIEF_ID | BOS_ACT_ID | BOS_RESP_ID) {
                        continue;
                    }
                    total += 1;
                    if argmax(trace.logits.row(start + pos)) == tgt[pos] {
                        hit += 1;
                    }
                }
            }
        }
        Ok(())
    })?;
    if total == 0 {
        return Err(Error::Eval("no tokens in the requested segment".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn belief_parse_round_trips() {
        let mut b = BeliefState::default();
        b.set(Domain::Hotel, Slot::Area, "north");
        b.set(Domain::Hotel, Slot::Stars, "4");
        b.set(Domain::Restaurant, Slot::Food, "british");
        assert_eq!(parse_belief(&b.words()), b);
        assert_eq!(parse_belief(""), BeliefState::default());
        assert_eq!(parse_belief("hotel area"), BeliefState::default());
    }

    #[test]
    fn act_parse_skips_garbage() {
        let acts = parse_acts("hotel inform area blah restaurant request food general bye hotel bye");
        let want: BTreeSet<DialogAct> = [
            DialogAct::new(Domain::Hotel, ActType::Inform, Some(Slot::Area)).unwrap(),
            DialogAct::new(Domain::Restaurant, ActType::Request, Some(Slot::Food)).unwrap(),
            DialogAct::new(Domain::General, ActType::Bye, None).unwrap(),
        ]
        .into();
        assert_eq!(acts, want);
    }
}
