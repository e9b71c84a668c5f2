use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::DialogRun;
use crate::corpus::delex::placeholder_slots;
use crate::corpus::{canonicalize_acts, Database, DialogSession, SignatureGranularity, Slot};
use crate::error::{Error, Result};

/// `(a + b)·0.5 + bleu`.
pub fn combined(a: f64, b: f64, bleu: f64) -> f64 {
    (a + b) * 0.5 + bleu
}

/// F1 between requested and provided slots; 1 when both are empty.
pub fn succ_f1(requested: &BTreeSet<Slot>, provided: &BTreeSet<Slot>) -> f64 {
    if requested.is_empty() && provided.is_empty() {
        return 1.0;
    }
    let hit = requested.intersection(provided).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / provided.len() as f64;
    let r = hit / requested.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogScore {
    pub session_id: String,
    pub inform: bool,
    pub success: bool,
    pub succ_f1: f64,
    pub requested: BTreeSet<Slot>,
    pub provided: BTreeSet<Slot>,
}

/// Inform: the entity behind the last `[value_name]` response, looked up with that turn's
/// belief, satisfies the goal's final constraints in every goal domain. Success: inform
/// and every requested slot's placeholder appears in some response.
pub fn score_dialog(run: &DialogRun, session: &DialogSession, db: &Database, oracle_belief: bool) -> Result<DialogScore> {
    if run.session_id != session.session_id {
        return Err(Error::Eval(format!(
            "no goal for run {} (got session {})",
            run.session_id, session.session_id
        )));
    }
    let goal = &session.goal;
    let final_constraints = goal.final_constraints();
    let offered = run
        .turns
        .iter()
        .rposition(|t| placeholder_slots(&t.response).contains(&Slot::Name));
    let inform = match offered {
        None => false,
        Some(t) => {
            let belief = if oracle_belief {
                session.turns.get(t).map(|g| g.belief.clone()).unwrap_or_default()
            } else {
                run.turns[t].belief.clone()
            };
            let domains = goal.domains();
            !domains.is_empty()
                && domains.iter().all(|&d| {
                    let constraints = belief.for_domain(d);
                    !constraints.is_empty()
                        && db
                            .query(d, &constraints)
                            .is_some_and(|e| e.matches(&final_constraints.for_domain(d)))
                })
        }
    };
    let mentioned: BTreeSet<Slot> = run.turns.iter().flat_map(|t| placeholder_slots(&t.response)).collect();
    let requestable: BTreeSet<Slot> = goal
        .domains()
        .iter()
        .flat_map(|d| d.requestable().iter().copied())
        .collect();
    let requested: BTreeSet<Slot> = goal.requests.iter().map(|(_, s)| *s).collect();
    let provided: BTreeSet<Slot> = mentioned.intersection(&requestable).copied().collect();
    let success = inform && requested.iter().all(|s| mentioned.contains(s));
    Ok(DialogScore {
        session_id: run.session_id.clone(),
        inform,
        success,
        succ_f1: succ_f1(&requested, &provided),
        requested,
        provided,
    })
}

fn scores(runs: &[DialogRun], sessions: &[DialogSession], db: &Database) -> Result<Vec<DialogScore>> {
    if runs.len() != sessions.len() {
        return Err(Error::Eval(format!("{} runs for {} goals", runs.len(), sessions.len())));
    }
    if runs.is_empty() {
        return Err(Error::Eval("no dialogs".into()));
    }
    runs.iter().zip(sessions).map(|(r, s)| score_dialog(r, s, db, false)).collect()
}

/// Inform and Success rates in percent.
pub fn inform_success(runs: &[DialogRun], sessions: &[DialogSession], db: &Database) -> Result<(f64, f64)> {
    let s = scores(runs, sessions, db)?;
    let n = s.len() as f64;
    let inform = 100.0 * s.iter().filter(|d| d.inform).count() as f64 / n;
    let success = 100.0 * s.iter().filter(|d| d.success).count() as f64 / n;
    Ok((inform, success))
}

/// Match rate in percent and dialog-averaged SuccF1 in `[0, 1]`.
pub fn match_succf1(runs: &[DialogRun], sessions: &[DialogSession], db: &Database) -> Result<(f64, f64)> {
    let s = scores(runs, sessions, db)?;
    let n = s.len() as f64;
    let m = 100.0 * s.iter().filter(|d| d.inform).count() as f64 / n;
    let f1 = s.iter().map(|d| d.succ_f1).sum::<f64>() / n;
    Ok((m, f1))
}

/// Behavior right after a user revises a constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub sessions: usize,
    /// The revision turn repeats the previous turn's act signature.
    pub repeat_rate: f64,
    /// Otherwise, the revision turn provides a booking reference.
    pub advance_rate: f64,
    pub other_rate: f64,
}

/// Categorizes the system turn answering each revision; `None` without revision sessions.
pub fn repetition_probe(runs: &[DialogRun], sessions: &[DialogSession]) -> Option<ProbeReport> {
    let (mut n, mut repeat, mut advance) = (0usize, 0usize, 0usize);
    for (run, s) in runs.iter().zip(sessions) {
        let Some(ev) = s.goal.revision_events.first() else {
            continue;
        };
        if ev.turn == 0 || ev.turn >= run.turns.len() {
            continue;
        }
        n += 1;
        let sig = |i: usize| {
            canonicalize_acts(&run.turns[i].acts, SignatureGranularity::Act)
                .map(|p| p.0)
                .unwrap_or_default()
        };
        if sig(ev.turn) == sig(ev.turn - 1) {
            repeat += 1;
        } else if placeholder_slots(&run.turns[ev.turn].response).contains(&Slot::Reference) {
            advance += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let f = n as f64;
    Some(ProbeReport {
        sessions: n,
        repeat_rate: repeat as f64 / f,
        advance_rate: advance as f64 / f,
        other_rate: (n - repeat - advance) as f64 / f,
    })
}
