//! Word-level vocabulary over linearized samples.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::linearize::markers;
use crate::corpus::{linearize_all, DialogSession, TargetKind};
use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const USER_ID: TokenId = 2;
pub const SYSTEM_ID: TokenId = 3;
pub const BOS_BELIEF_ID: TokenId = 4;
pub const EOS_BELIEF_ID: TokenId = 5;
pub const BOS_ACT_ID: TokenId = 6;
pub const EOS_ACT_ID: TokenId = 7;
pub const BOS_RESP_ID: TokenId = 8;
pub const EOS_RESP_ID: TokenId = 9;
pub const EOS_ID: TokenId = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Positions of the closing span markers in a target id sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpanEnds {
    pub belief_end: Option<usize>,
    pub act_end: Option<usize>,
    pub resp_end: Option<usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then corpus words by descending frequency, ties lexicographic.
    pub fn build(sessions: &[DialogSession]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let samples = linearize_all(sessions, TargetKind::All);
        for s in &samples {
            for w in s.context.split_whitespace().chain(s.target.split_whitespace()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        for r in markers::RESERVED {
            counts.remove(r);
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = markers::RESERVED
            .iter()
            .copied()
            .chain(words.into_iter().map(|(w, _)| w))
            .map(String::from)
            .collect();
        Self::from_tokens(tokens).expect("reserved and corpus words are distinct")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in markers::RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Tokenizer(format!("id {i} must be reserved token {r}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Tokenizer(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Tokenizer(format!("id {id} out of range for vocabulary of {}", self.len())))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Stable digest of the token list, used to tie checkpoints to a vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}

/// Finds the closing markers; each may appear at most once and in belief → act → response order.
pub fn locate_span_ends(ids: &[TokenId]) -> Result<SpanEnds> {
    let mut ends = SpanEnds::default();
    let mut last: Option<(usize, &str)> = None;
    for (pos, &id) in ids.iter().enumerate() {
        let (slot, name, rank) = match id {
            EOS_BELIEF_ID => (&mut ends.belief_end, markers::EOS_BELIEF, 0),
            EOS_ACT_ID => (&mut ends.act_end, markers::EOS_ACT, 1),
            EOS_RESP_ID => (&mut ends.resp_end, markers::EOS_RESP, 2),
            _ => continue,
        };
        if slot.is_some() {
            return Err(Error::Tokenizer(format!("duplicate {name} at position {pos}")));
        }
        if let Some((prev_rank, prev)) = last {
            if prev_rank >= rank {
                return Err(Error::Tokenizer(format!("{name} at position {pos} follows {prev}")));
            }
        }
        *slot = Some(pos);
        last = Some((rank, name));
    }
    Ok(ends)
}

/// Which segment each target position belongs to, markers included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Segment {
    Belief,
    Act,
    Response,
    Other,
}

pub fn segment_of_positions(ids: &[TokenId]) -> Vec<Segment> {
    let mut current = Segment::Other;
    ids.iter()
        .map(|&id| {
            let seg = match id {
                BOS_BELIEF_ID => Segment::Belief,
                BOS_ACT_ID => Segment::Act,
                BOS_RESP_ID => Segment::Response,
                _ => current,
            };
            current = match id {
                EOS_BELIEF_ID | EOS_ACT_ID | EOS_RESP_ID => Segment::Other,
                _ => seg,
            };
            seg
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_match_marker_table() {
        let v = Vocabulary::from_tokens(markers::RESERVED.iter().map(|s| s.to_string()).collect()).unwrap();
        assert_eq!(v.id(markers::PAD), PAD_ID);
        assert_eq!(v.id(markers::UNK), UNK_ID);
        assert_eq!(v.id(markers::USER), USER_ID);
        assert_eq!(v.id(markers::SYSTEM), SYSTEM_ID);
        assert_eq!(v.id(markers::BOS_BELIEF), BOS_BELIEF_ID);
        assert_eq!(v.id(markers::EOS_BELIEF), EOS_BELIEF_ID);
        assert_eq!(v.id(markers::BOS_ACT), BOS_ACT_ID);
        assert_eq!(v.id(markers::EOS_ACT), EOS_ACT_ID);
        assert_eq!(v.id(markers::BOS_RESP), BOS_RESP_ID);
        assert_eq!(v.id(markers::EOS_RESP), EOS_RESP_ID);
        assert_eq!(v.id(markers::EOS), EOS_ID);
    }

    #[test]
    fn span_errors() {
        assert!(locate_span_ends(&[4, 5, 6, 5]).is_err());
        assert!(locate_span_ends(&[6, 7, 4, 5]).is_err());
        assert_eq!(locate_span_ends(&[]).unwrap(), SpanEnds::default());
    }

    #[test]
    fn segments_include_markers() {
        let segs = segment_of_positions(&[4, 20, 5, 6, 21, 7, 8, 22, 9]);
        use Segment::*;
        assert_eq!(segs, vec![Belief, Belief, Belief, Act, Act, Act, Response, Response, Response]);
    }
}
