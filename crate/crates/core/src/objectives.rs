//! Generation, policy-consistency and contrastive losses, and their per-stage compositions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tensor};
use crate::error::{Error, Result};
use crate::model::PolicyEncoders;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    GenB,
    GenA,
    GenR,
    Turn,
    Session,
    Gpc,
    Acl,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::GenB,
        Term::GenA,
        Term::GenR,
        Term::Turn,
        Term::Session,
        Term::Gpc,
        Term::Acl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Term::GenB => "gen_b",
            Term::GenA => "gen_a",
            Term::GenR => "gen_r",
            Term::Turn => "turn",
            Term::Session => "session",
            Term::Gpc => "gpc",
            Term::Acl => "acl",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.1,
            tau: 1.0,
        }
    }
}

impl Coefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau = {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Which composition formula applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_gen_b`.
    Stage1,
    /// `γ·L_gen_b + L_gen_a + α·L_gpc + β·L_acl`.
    Stage2,
    /// `γ·(L_gen_b + L_gen_a) + L_gen_r`.
    Stage3,
    /// Sum of whichever generation terms are provided; `L_gen_r` required.
    Finetune,
    /// `(L_gen_b + L_gen_a + L_gen_r) + α·L_gpc + β·L_acl`.
    Multitask,
}

/// Scalar loss terms plus their weighted total.
#[derive(Debug, Clone)]
pub struct LossBundle<S: Scalar> {
    pub objective: Objective,
    pub terms: BTreeMap<Term, Tensor<S>>,
    pub coefficients: Coefficients,
    pub total: Tensor<S>,
}

impl<S: Scalar> LossBundle<S> {
    pub fn value(&self, term: Term) -> Option<f64> {
        self.terms.get(&term).map(|t| t.item().to_f64().unwrap())
    }

    pub fn total_value(&self) -> f64 {
        self.total.item().to_f64().unwrap()
    }
}

/// Negative log-likelihood over the positions selected by `mask`.
pub fn gen_loss<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
    reduction: Reduction,
) -> Result<Tensor<S>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Objective("generation loss over an empty mask".into()));
    }
    logits.cross_entropy(targets, mask, reduction)
}

/// `‖h^r − h^o‖²`.
pub fn turn_consistency<S: Scalar>(prior: &Tensor<S>, posterior: &Tensor<S>) -> Result<Tensor<S>> {
    if prior.len() != posterior.len() {
        return Err(Error::shape("turn_consistency", format!("{:?} vs {:?}", prior.shape(), posterior.shape())));
    }
    prior.l2_sq(posterior)
}

/// Distance between the sequence encodings of the prior and posterior histories (`L × d` each).
pub fn session_consistency<S: Scalar>(
    prior_history: &Tensor<S>,
    posterior_history: &Tensor<S>,
    encoders: &PolicyEncoders<S>,
) -> Result<Tensor<S>> {
    if prior_history.shape() != posterior_history.shape() {
        return Err(Error::shape(
            "session_consistency",
            format!("{:?} vs {:?}", prior_history.shape(), posterior_history.shape()),
        ));
    }
    let a = encoders.prior.encode(prior_history)?;
    let b = encoders.posterior().encode(posterior_history)?;
    a.l2_sq(&b)
}

pub fn gpc_loss<S: Scalar>(turn: &Tensor<S>, session: &Tensor<S>) -> Result<Tensor<S>> {
    turn.add(session)
}

/// How the contrastive loss aggregates over (anchor, positive) pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AclReduction {
    /// Plain double sum over anchors and their positives.
    #[default]
    Sum,
    /// Double sum divided by the number of pairs.
    MeanPairs,
}

/// Supervised contrastive loss over L2-normalized rows of `vectors`.
///
/// `positives[i]` lists batch indices paired with anchor `i`. The denominator for
/// anchor `i` ranges over every other member of the batch. Anchors without
/// positives contribute nothing.
pub fn acl_loss<S: Scalar>(
    vectors: &Tensor<S>,
    positives: &[Vec<usize>],
    tau: f64,
    reduction: AclReduction,
) -> Result<Tensor<S>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Objective(format!("temperature {tau} must be positive")));
    }
    let n = vectors.rows();
    if positives.len() != n {
        return Err(Error::shape("acl_loss", format!("{} positive lists for {n} vectors", positives.len())));
    }
    let mut weights = vec![S::zero(); n * n];
    let mut pairs = 0usize;
    for (i, p) in positives.iter().enumerate() {
        for &j in p {
            if j >= n || j == i {
                return Err(Error::Objective(format!("invalid positive {j} for anchor {i}")));
            }
            weights[i * n + j] = weights[i * n + j] + S::one();
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(Tensor::scalar(S::zero()));
    }
    let z = vectors.normalize_rows()?;
    let scores = z.matmul_t(&z)?.scale(S::from_f64_lossy(1.0 / tau));
    // A large finite value keeps `0 · mask` well defined in the weighted sum below.
    let mut diag = vec![S::zero(); n * n];
    for i in 0..n {
        diag[i * n + i] = S::from_f64_lossy(-1e30);
    }
    let logp = scores.add(&Tensor::constant(vec![n, n], diag)?)?.log_softmax()?;
    let picked = logp.mul(&Tensor::constant(vec![n, n], weights)?)?.sum();
    let scale = match reduction {
        AclReduction::Sum => -1.0,
        AclReduction::MeanPairs => -1.0 / pairs as f64,
    };
    Ok(picked.scale(S::from_f64_lossy(scale)))
}

fn required<S: Scalar>(terms: &BTreeMap<Term, Tensor<S>>, t: Term, objective: Objective) -> Result<Tensor<S>> {
    terms
        .get(&t)
        .cloned()
        .ok_or_else(|| Error::Objective(format!("{objective:?} needs term {t}")))
}

/// Weighted sum that leaves out zero-coefficient terms entirely, so a zero weight
/// reproduces the reduced objective bit for bit.
fn weighted_sum<S: Scalar>(parts: &[(f64, Tensor<S>)]) -> Result<Tensor<S>> {
    let mut total: Option<Tensor<S>> = None;
    for (c, t) in parts {
        if *c == 0.0 {
            continue;
        }
        let term = if *c == 1.0 { t.clone() } else { t.scale(S::from_f64_lossy(*c)) };
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(S::zero())))
}

/// Composes the total for `objective` from the supplied terms.
///
/// `gpc` is assembled here from `turn` and `session` when either is present; terms
/// listed in `disabled` are dropped before composition (ablations).
pub fn compose<S: Scalar>(
    objective: Objective,
    mut terms: BTreeMap<Term, Tensor<S>>,
    coefficients: Coefficients,
    disabled: &BTreeSet<Term>,
) -> Result<LossBundle<S>> {
    for t in disabled {
        terms.remove(t);
    }
    let policy_terms = || -> Result<Option<Tensor<S>>> {
        if disabled.contains(&Term::Gpc) {
            return Ok(None);
        }
        match (terms.get(&Term::Turn), terms.get(&Term::Session), terms.get(&Term::Gpc)) {
            (_, _, Some(g)) => Ok(Some(g.clone())),
            (Some(t), Some(s), None) => Ok(Some(gpc_loss(t, s)?)),
            (Some(t), None, None) if disabled.contains(&Term::Session) => Ok(Some(t.clone())),
            (None, Some(s), None) if disabled.contains(&Term::Turn) => Ok(Some(s.clone())),
            _ => Err(Error::Objective(format!("{objective:?} needs turn and session terms"))),
        }
    };
    let acl = |terms: &BTreeMap<Term, Tensor<S>>| -> Result<Option<Tensor<S>>> {
        if disabled.contains(&Term::Acl) {
            Ok(None)
        } else {
            required(terms, Term::Acl, objective).map(Some)
        }
    };
    let c = coefficients;
    let total = match objective {
        Objective::Stage1 => required(&terms, Term::GenB, objective)?,
        Objective::Stage2 => {
            let gpc = policy_terms()?;
            let acl = acl(&terms)?;
            let mut parts = vec![
                (c.gamma, required(&terms, Term::GenB, objective)?),
                (1.0, required(&terms, Term::GenA, objective)?),
            ];
            if let Some(g) = gpc.clone() {
                parts.push((c.alpha, g));
            }
            if let Some(a) = acl {
                parts.push((c.beta, a));
            }
            if let Some(g) = gpc {
                terms.insert(Term::Gpc, g);
            }
            weighted_sum(&parts)?
        }
        Objective::Stage3 => {
            let b = required(&terms, Term::GenB, objective)?;
            let a = required(&terms, Term::GenA, objective)?;
            let r = required(&terms, Term::GenR, objective)?;
            let carried = if c.gamma == 0.0 { None } else { Some(b.add(&a)?) };
            match carried {
                Some(ba) => weighted_sum(&[(c.gamma, ba), (1.0, r)])?,
                None => r,
            }
        }
        Objective::Finetune => {
            let r = required(&terms, Term::GenR, objective)?;
            let mut parts = Vec::new();
            for t in [Term::GenB, Term::GenA] {
                if let Some(x) = terms.get(&t) {
                    parts.push((1.0, x.clone()));
                }
            }
            parts.push((1.0, r));
            weighted_sum(&parts)?
        }
        Objective::Multitask => {
            let gpc = policy_terms()?;
            let acl = acl(&terms)?;
            let b = required(&terms, Term::GenB, objective)?;
            let a = required(&terms, Term::GenA, objective)?;
            let r = required(&terms, Term::GenR, objective)?;
            let mut parts = vec![(1.0, b.add(&a)?.add(&r)?)];
            if let Some(g) = gpc.clone() {
                parts.push((c.alpha, g));
            }
            if let Some(a) = acl {
                parts.push((c.beta, a));
            }
            if let Some(g) = gpc {
                terms.insert(Term::Gpc, g);
            }
            weighted_sum(&parts)?
        }
    };
    Ok(LossBundle {
        objective,
        terms,
        coefficients,
        total,
    })
}

/// Terms whose values are logged for each objective, in log order.
pub fn logged_terms(objective: Objective, disabled: &BTreeSet<Term>) -> Vec<Term> {
    let all: &[Term] = match objective {
        Objective::Stage1 => &[Term::GenB],
        Objective::Stage2 => &[Term::GenB, Term::GenA, Term::Turn, Term::Session, Term::Gpc, Term::Acl],
        Objective::Stage3 | Objective::Finetune => &[Term::GenB, Term::GenA, Term::GenR],
        Objective::Multitask => &[
            Term::GenB,
            Term::GenA,
            Term::GenR,
            Term::Turn,
            Term::Session,
            Term::Gpc,
            Term::Acl,
        ],
    };
    all.iter()
        .copied()
        .filter(|t| !disabled.contains(t) && !(disabled.contains(&Term::Gpc) && matches!(t, Term::Turn | Term::Session)))
        .collect()
}
