//! Text format of training samples.
//!
//! Context: `<user> u0 <system> r0 <user> u1 ... <user> ut`, where `r` are delexicalized
//! system responses. Target: one or more segments, each wrapped in its marker pair,
//! always in belief → act → response order:
//!
//! ```text
//! <bos_belief> hotel area north hotel price cheap <eos_belief>
//! <bos_act> hotel request stars <eos_act>
//! <bos_resp> how many stars should it have ? <eos_resp>
//! ```
//!
//! Belief triples are sorted by `(domain, slot)` and acts by `(domain, act, slot)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::types::{BeliefState, DialogAct, DialogSession};
use crate::error::{Error, Result};

pub mod markers {
    pub const PAD: &str = "<pad>";
    pub const UNK: &str = "<unk>";
    pub const USER: &str = "<user>";
    pub const SYSTEM: &str = "<system>";
    pub const BOS_BELIEF: &str = "<bos_belief>";
    pub const EOS_BELIEF: &str = "<eos_belief>";
    pub const BOS_ACT: &str = "<bos_act>";
    pub const EOS_ACT: &str = "<eos_act>";
    pub const BOS_RESP: &str = "<bos_resp>";
    pub const EOS_RESP: &str = "<eos_resp>";
    pub const EOS: &str = "<eos>";

    /// Reserved tokens in id order; `<pad>` is id 0.
    pub const RESERVED: [&str; 11] = [
        PAD, UNK, USER, SYSTEM, BOS_BELIEF, EOS_BELIEF, BOS_ACT, EOS_ACT, BOS_RESP, EOS_RESP, EOS,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Belief,
    Act,
    Response,
    BeliefAct,
    All,
}

impl TargetKind {
    pub fn has_belief(self) -> bool {
        matches!(self, TargetKind::Belief | TargetKind::BeliefAct | TargetKind::All)
    }

    pub fn has_act(self) -> bool {
        matches!(self, TargetKind::Act | TargetKind::BeliefAct | TargetKind::All)
    }

    pub fn has_response(self) -> bool {
        matches!(self, TargetKind::Response | TargetKind::All)
    }
}

/// A `(context, target)` pair for one turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSample {
    pub session_id: String,
    pub turn: usize,
    pub kind: TargetKind,
    pub context: String,
    pub target: String,
}

fn wrap(open: &str, body: &str, close: &str) -> String {
    if body.is_empty() {
        format!("{open} {close}")
    } else {
        format!("{open} {body} {close}")
    }
}

pub fn belief_segment(belief: &BeliefState) -> String {
    wrap(markers::BOS_BELIEF, &belief.words(), markers::EOS_BELIEF)
}

pub fn act_segment(acts: &BTreeSet<DialogAct>) -> String {
    let body = acts.iter().map(DialogAct::words).collect::<Vec<_>>().join(" ");
    wrap(markers::BOS_ACT, &body, markers::EOS_ACT)
}

pub fn response_segment(response_delex: &str) -> String {
    wrap(markers::BOS_RESP, response_delex.trim(), markers::EOS_RESP)
}

/// Dialog history followed by the current user utterance.
pub fn context_text<'a>(history: impl IntoIterator<Item = (&'a str, &'a str)>, user: &str) -> String {
    let mut parts = Vec::new();
    for (u, r) in history {
        parts.push(format!("{} {}", markers::USER, u.trim()));
        parts.push(format!("{} {}", markers::SYSTEM, r.trim()));
    }
    parts.push(format!("{} {}", markers::USER, user.trim()));
    parts.join(" ")
}

pub fn linearize_turn(session: &DialogSession, t: usize, kind: TargetKind) -> Result<TrainingSample> {
    let turn = session.turns.get(t).ok_or_else(|| {
        Error::Corpus(format!(
            "turn {t} out of range for session {} with {} turns",
            session.session_id,
            session.turns.len()
        ))
    })?;
    let history = session.turns[..t]
        .iter()
        .map(|p| (p.user.as_str(), p.response_delex.as_str()));
    let context = context_text(history, &turn.user);
    let mut segs = Vec::new();
    if kind.has_belief() {
        segs.push(belief_segment(&turn.belief));
    }
    if kind.has_act() {
        segs.push(act_segment(&turn.acts));
    }
    if kind.has_response() {
        segs.push(response_segment(&turn.response_delex));
    }
    Ok(TrainingSample {
        session_id: session.session_id.clone(),
        turn: t,
        kind,
        context,
        target: segs.join(" "),
    })
}
