//! Positive-sample selection for the act-based contrastive loss.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{canonicalize_acts, DialogSession, PolicySignature, SignatureGranularity};
use crate::error::{Error, Result};

/// A turn addressed by its session's position in the corpus slice and its turn index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TurnRef {
    pub session: usize,
    pub turn: usize,
}

/// Corpus turns grouped by policy signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyIndex {
    pub granularity: SignatureGranularity,
    pub buckets: BTreeMap<PolicySignature, Vec<TurnRef>>,
    signatures: Vec<Vec<PolicySignature>>,
    all: Vec<TurnRef>,
}

impl PolicyIndex {
    pub fn build(sessions: &[DialogSession], granularity: SignatureGranularity) -> Result<Self> {
        let mut buckets: BTreeMap<PolicySignature, Vec<TurnRef>> = BTreeMap::new();
        let mut signatures = Vec::with_capacity(sessions.len());
        let mut all = Vec::new();
        for (si, s) in sessions.iter().enumerate() {
            let mut per_turn = Vec::with_capacity(s.turns.len());
            for (ti, t) in s.turns.iter().enumerate() {
                let sig = canonicalize_acts(&t.acts, granularity)?;
                let r = TurnRef { session: si, turn: ti };
                buckets.entry(sig.clone()).or_default().push(r);
                per_turn.push(sig);
                all.push(r);
            }
            signatures.push(per_turn);
        }
        Ok(Self {
            granularity,
            buckets,
            signatures,
            all,
        })
    }

    pub fn total(&self) -> usize {
        self.all.len()
    }

    pub fn signature(&self, r: TurnRef) -> &PolicySignature {
        &self.signatures[r.session][r.turn]
    }

    /// Bucket sizes by signature.
    pub fn histogram(&self) -> BTreeMap<String, usize> {
        self.buckets.iter().map(|(k, v)| (k.0.clone(), v.len())).collect()
    }
}

/// A base batch of `N` turns followed by `M` appended turns per base anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub samples: Vec<TurnRef>,
    /// Batch indices paired with each sample as positives.
    pub positives: Vec<Vec<usize>>,
    pub base_count: usize,
}

/// Appends `m` positives per base anchor, drawn from the anchor's signature bucket
/// outside the base batch.
///
/// Short buckets are sampled with replacement; an empty bucket leaves the anchor
/// without positives and fills its slots with random corpus turns that act only as
/// negatives. Appended samples have no positives of their own unless `symmetrize`
/// is set, in which case each is paired with its anchor and its co-positives.
pub fn make_contrastive_batch(
    base: &[TurnRef],
    index: &PolicyIndex,
    m: usize,
    symmetrize: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveBatch> {
    let n = base.len();
    if n < 2 {
        return Err(Error::Sampler(format!("base batch of {n} has no negatives")));
    }
    if m < 1 {
        return Err(Error::Sampler("at least one positive per anchor is required".into()));
    }
    let in_base: BTreeSet<TurnRef> = base.iter().copied().collect();
    let outside: Vec<TurnRef> = index.all.iter().copied().filter(|r| !in_base.contains(r)).collect();
    if outside.is_empty() {
        return Err(Error::Sampler("no corpus turns outside the base batch".into()));
    }
    let mut samples = base.to_vec();
    let mut positives = vec![Vec::new(); n];
    let mut groups = Vec::with_capacity(n);
    for (i, &anchor) in base.iter().enumerate() {
        let bucket = &index.buckets[index.signature(anchor)];
        let mut eligible: Vec<TurnRef> = bucket.iter().copied().filter(|r| !in_base.contains(r)).collect();
        let start = samples.len();
        if eligible.len() >= m {
            eligible.shuffle(rng);
            samples.extend_from_slice(&eligible[..m]);
            positives[i] = (start..start + m).collect();
        } else if !eligible.is_empty() {
            for _ in 0..m {
                samples.push(*eligible.choose(rng).unwrap());
            }
            positives[i] = (start..start + m).collect();
        } else {
            for _ in 0..m {
                samples.push(*outside.choose(rng).unwrap());
            }
        }
        groups.push((start, !positives[i].is_empty()));
    }
    positives.resize(samples.len(), Vec::new());
    if symmetrize {
        for (i, &(start, has)) in groups.iter().enumerate() {
            if !has {
                continue;
            }
            for p in start..start + m {
                positives[p] = std::iter::once(i).chain((start..start + m).filter(|&q| q != p)).collect();
            }
        }
    }
    Ok(ContrastiveBatch {
        samples,
        positives,
        base_count: n,
    })
}
