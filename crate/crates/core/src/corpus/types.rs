use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::taxonomy::{ActType, Domain, Slot};
use crate::error::{Error, Result};

/// A `(domain, act, slot)` label describing one system intention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogAct {
    pub domain: Domain,
    pub act: ActType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<Slot>,
}

impl DialogAct {
    /// Builds an act, rejecting slots the domain does not own.
    pub fn new(domain: Domain, act: ActType, slot: Option<Slot>) -> Result<Self> {
        let a = Self { domain, act, slot };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(slot) = self.slot {
            if !self.domain.has_slot(slot) {
                return Err(Error::Taxonomy {
                    kind: "slot",
                    label: format!("{}.{}", self.domain, slot),
                });
            }
        }
        if (self.domain == Domain::General) != (self.act == ActType::Bye) {
            return Err(Error::Taxonomy {
                kind: "act",
                label: format!("{}.{}", self.domain, self.act),
            });
        }
        Ok(())
    }

    /// Space separated `domain act [slot]` words.
    pub fn words(&self) -> String {
        match self.slot {
            Some(s) => format!("{} {} {}", self.domain, self.act, s),
            None => format!("{} {}", self.domain, self.act),
        }
    }
}

/// Accumulated user constraints: at most one value per `(domain, slot)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeliefState {
    pub entries: BTreeMap<(Domain, Slot), String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeliefEntry {
    domain: Domain,
    slot: Slot,
    value: String,
}

impl Serialize for BeliefState {
    fn serialize<Se: Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        let v: Vec<BeliefEntry> = self
            .entries
            .iter()
            .map(|(&(domain, slot), value)| BeliefEntry {
                domain,
                slot,
                value: value.clone(),
            })
            .collect();
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BeliefState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<BeliefEntry>::deserialize(d)?;
        let mut entries = BTreeMap::new();
        for e in v {
            if entries.insert((e.domain, e.slot), e.value).is_some() {
                return Err(serde::de::Error::custom(format!(
                    "belief has two values for {}.{}",
                    e.domain, e.slot
                )));
            }
        }
        Ok(BeliefState { entries })
    }
}

impl BeliefState {
    pub fn get(&self, domain: Domain, slot: Slot) -> Option<&str> {
        self.entries.get(&(domain, slot)).map(String::as_str)
    }

    pub fn set(&mut self, domain: Domain, slot: Slot, value: impl Into<String>) {
        self.entries.insert((domain, slot), value.into());
    }

    /// Constraints for one domain.
    pub fn for_domain(&self, domain: Domain) -> BTreeMap<Slot, String> {
        self.entries
            .iter()
            .filter(|((d, _), _)| *d == domain)
            .map(|((_, s), v)| (*s, v.clone()))
            .collect()
    }

    /// `domain slot value` triples in sorted `(domain, slot)` order.
    pub fn words(&self) -> String {
        self.entries
            .iter()
            .map(|((d, s), v)| format!("{d} {s} {v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub user: String,
    pub belief: BeliefState,
    pub acts: BTreeSet<DialogAct>,
    pub response_delex: String,
    pub response_lex: String,
    /// Lexical values substituted into `response_delex` to produce `response_lex`.
    #[serde(default)]
    pub values: BTreeMap<Slot, String>,
}

/// A user changing one constraint at a given turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionEvent {
    pub turn: usize,
    pub domain: Domain,
    pub slot: Slot,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    pub constraints: BeliefState,
    pub requests: BTreeSet<(Domain, Slot)>,
    #[serde(default)]
    pub revision_events: Vec<RevisionEvent>,
}

impl Goal {
    /// Constraints after every revision has been applied.
    pub fn final_constraints(&self) -> BeliefState {
        let mut c = self.constraints.clone();
        for r in &self.revision_events {
            c.set(r.domain, r.slot, r.value.clone());
        }
        c
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.constraints.entries.keys().map(|(d, _)| *d).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogSession {
    pub session_id: String,
    pub goal: Goal,
    pub turns: Vec<Turn>,
}

impl DialogSession {
    pub fn has_revision(&self) -> bool {
        !self.goal.revision_events.is_empty()
    }

    /// Checks every structural invariant; errors name the offending field.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let fail = |field: String, msg: String| Err((field, msg));
        if self.turns.is_empty() {
            return fail("turns".into(), "session has no turns".into());
        }
        for (d, s) in self.goal.requests.iter() {
            if !d.has_slot(*s) {
                return fail("goal.requests".into(), format!("{d}.{s} not in ontology"));
            }
        }
        for r in &self.goal.revision_events {
            if r.turn >= self.turns.len() {
                return fail("goal.revision_events".into(), format!("turn {} out of range", r.turn));
            }
        }
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.acts.is_empty() {
                return fail(format!("turns[{t}].acts"), "acts must be non-empty".into());
            }
            for a in &turn.acts {
                if let Err(e) = a.validate() {
                    return fail(format!("turns[{t}].acts"), e.to_string());
                }
            }
            for ((d, s), _) in &turn.belief.entries {
                if !d.has_slot(*s) {
                    return fail(format!("turns[{t}].belief"), format!("{d}.{s} not in ontology"));
                }
            }
            for tok in turn.response_delex.split_whitespace() {
                if tok.starts_with('[') && Slot::from_placeholder(tok).is_none() {
                    return fail(format!("turns[{t}].response_delex"), format!("bad placeholder {tok}"));
                }
            }
            if t > 0 {
                let prev = &self.turns[t - 1].belief;
                for (key, value) in &prev.entries {
                    let revised = self
                        .goal
                        .revision_events
                        .iter()
                        .any(|r| r.turn == t && (r.domain, r.slot) == *key);
                    match turn.belief.entries.get(key) {
                        Some(v) if v == value || revised => {}
                        _ => {
                            return fail(
                                format!("turns[{t}].belief"),
                                format!("{}.{} dropped or changed without a revision event", key.0, key.1),
                            )
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Granularity of a policy key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureGranularity {
    /// Act types only.
    #[default]
    Act,
    /// `(domain, act)` pairs.
    DomainAct,
}

/// Canonical key identifying "the same dialog policy".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PolicySignature(pub String);

impl fmt::Display for PolicySignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sorted, de-duplicated act labels joined with `|`.
pub fn canonicalize_acts<'a, I>(acts: I, granularity: SignatureGranularity) -> Result<PolicySignature>
where
    I: IntoIterator<Item = &'a DialogAct>,
{
    let mut keys = BTreeSet::new();
    for a in acts {
        a.validate()?;
        keys.insert(match granularity {
            SignatureGranularity::Act => a.act.as_str().to_string(),
            SignatureGranularity::DomainAct => format!("{}.{}", a.domain, a.act),
        });
    }
    if keys.is_empty() {
        return Err(Error::NoPolicy);
    }
    Ok(PolicySignature(keys.into_iter().collect::<Vec<_>>().join("|")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub domain: Domain,
    pub attributes: BTreeMap<Slot, String>,
}

impl Entity {
    pub fn matches(&self, constraints: &BTreeMap<Slot, String>) -> bool {
        constraints
            .iter()
            .all(|(s, v)| self.attributes.get(s).is_none_or(|a| a == v))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Database {
    pub entities: Vec<Entity>,
}

impl Database {
    /// First entity of `domain` consistent with `constraints`, in database order.
    pub fn query(&self, domain: Domain, constraints: &BTreeMap<Slot, String>) -> Option<&Entity> {
        self.entities
            .iter()
            .find(|e| e.domain == domain && e.matches(constraints))
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.entities.iter().filter(|e| e.domain == domain).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entities.iter().enumerate() {
            for slot in e.domain.attributes() {
                if !e.attributes.contains_key(&slot) {
                    return Err(Error::Corpus(format!("entity {i} ({}) lacks {slot}", e.domain)));
                }
            }
        }
        Ok(())
    }
}

/// Per-domain slot inventory together with the values seen for informable slots.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ontology {
    pub domains: BTreeMap<Domain, DomainOntology>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainOntology {
    pub informable: Vec<Slot>,
    pub requestable: Vec<Slot>,
    pub values: BTreeMap<Slot, Vec<String>>,
}

impl Ontology {
    pub fn from_database(domains: &[Domain], db: &Database) -> Self {
        let mut out = BTreeMap::new();
        for &d in domains {
            let mut values: BTreeMap<Slot, Vec<String>> = BTreeMap::new();
            for s in d.informable() {
                let mut vs: Vec<String> = db
                    .entities
                    .iter()
                    .filter(|e| e.domain == d)
                    .filter_map(|e| e.attributes.get(s).cloned())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                vs.sort();
                values.insert(*s, vs);
            }
            out.insert(
                d,
                DomainOntology {
                    informable: d.informable().to_vec(),
                    requestable: d.requestable().to_vec(),
                    values,
                },
            );
        }
        Self { domains: out }
    }

    /// Requestable slots across every domain.
    pub fn requestable_slots(&self) -> BTreeSet<Slot> {
        self.domains.values().flat_map(|d| d.requestable.iter().copied()).collect()
    }
}
