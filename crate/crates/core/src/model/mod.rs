//! Encoder–decoder transformer over word ids, plus the policy-sequence encoder.
//!
//! The decoder input is the target shifted right by one with `<pad>` in front, so
//! the hidden state at target position `t` has seen target tokens `< t` and the
//! whole context. Samples in a batch are packed row-wise; attention never crosses
//! sample boundaries.

mod layers;
mod sequence;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use layers::{causal_mask, Attention, DecoderLayer, Dropout, EncoderLayer, FeedForward, Linear, Norm};
pub use sequence::{PolicyEncoders, SequenceEncoder};

use crate::autodiff::{join_name, no_grad, ParamVisitor, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{SpanEnds, TokenId, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub max_target: usize,
    /// Longest turn history the policy-sequence encoder accepts.
    pub max_turns: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Separate encoders for the prior and posterior policy sequences.
    pub separate_sequence_encoders: bool,
}

impl ModelConfig {
    /// Desk-scale preset.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_context: 192,
            max_target: 64,
            max_turns: 16,
            dropout: 0.0,
            init_std: 0.1,
            seed: 0,
            separate_sequence_encoders: false,
        }
    }

    /// Tiny model for gradient checks and fast unit tests.
    pub fn micro(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_context: 32,
            max_target: 32,
            max_turns: 8,
            dropout: 0.0,
            init_std: 0.3,
            seed: 0,
            separate_sequence_encoders: false,
        }
    }

    /// T5-small-sized preset, kept for reference; far too slow for this engine.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            n_heads: 8,
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_ff: 2048,
            max_context: 512,
            max_target: 128,
            max_turns: 32,
            dropout: 0.1,
            init_std: 0.02,
            seed: 0,
            separate_sequence_encoders: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
            ("max_target", self.max_target),
            ("max_turns", self.max_turns),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("model.init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Teacher-forced forward pass over a packed batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S: Scalar> {
    /// `ΣT × V`.
    pub logits: Tensor<S>,
    /// Final decoder states after the output norm, `ΣT × d`.
    pub hidden: Tensor<S>,
    /// Row range of each sample's target within `logits` / `hidden`.
    pub target_spans: Vec<(usize, usize)>,
    pub context_lens: Vec<usize>,
}

impl<S: Scalar> ForwardTrace<S> {
    /// Hidden state of sample `i` at target position `pos`, as a `1 × d` row.
    pub fn hidden_at(&self, i: usize, pos: usize) -> Result<Tensor<S>> {
        let (s, e) = self.target_spans[i];
        if s + pos >= e {
            return Err(Error::Model(format!("position {pos} outside target of length {}", e - s)));
        }
        self.hidden.slice_rows(s + pos, s + pos + 1)
    }
}

/// Prior and posterior policy vectors of one turn, each `1 × d`.
#[derive(Debug, Clone)]
pub struct PolicyVectors<S: Scalar> {
    pub prior: Tensor<S>,
    pub posterior: Tensor<S>,
    pub turn: usize,
}

/// Reads `h^r` at the belief end and `h^o` at the act end of sample `i`.
pub fn extract_policy_vectors<S: Scalar>(
    trace: &ForwardTrace<S>,
    i: usize,
    ends: &SpanEnds,
    turn: usize,
) -> Result<PolicyVectors<S>> {
    let b = ends
        .belief_end
        .ok_or_else(|| Error::Model("target has no belief segment".into()))?;
    let a = ends
        .act_end
        .ok_or_else(|| Error::Model("target has no act segment".into()))?;
    Ok(PolicyVectors {
        prior: trace.hidden_at(i, b)?,
        posterior: trace.hidden_at(i, a)?,
        turn,
    })
}

/// Output of a greedy continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, including the stop token when it was produced.
    pub ids: Vec<TokenId>,
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct Weights<S: Scalar> {
    pub config: ModelConfig,
    pub embed: Tensor<S>,
    pub enc_pos: Tensor<S>,
    pub dec_pos: Tensor<S>,
    pub encoder: Vec<EncoderLayer<S>>,
    pub enc_norm: Norm<S>,
    pub decoder: Vec<DecoderLayer<S>>,
    pub dec_norm: Norm<S>,
    pub lm_head: Linear<S>,
}

impl<S: Scalar> Weights<S> {
    /// Normal(0, init_std) matrices and embeddings, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let std = c.init_std;
        let d = c.d_model;
        let embed = layers::normal(&mut rng, vec![c.vocab_size, d], std);
        let enc_pos = layers::normal(&mut rng, vec![c.max_context, d], std);
        let dec_pos = layers::normal(&mut rng, vec![c.max_target, d], std);
        let encoder = (0..c.n_enc_layers)
            .map(|_| EncoderLayer::init(&mut rng, d, c.n_heads, c.d_ff, std))
            .collect();
        let decoder = (0..c.n_dec_layers)
            .map(|_| DecoderLayer::init(&mut rng, d, c.n_heads, c.d_ff, std))
            .collect();
        let lm_head = Linear::init(&mut rng, d, c.vocab_size, std);
        Ok(Self {
            config: c.clone(),
            embed,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm: Norm::init(d),
            decoder,
            dec_norm: Norm::init(d),
            lm_head,
        })
    }

    fn check_ids(&self, ids: &[TokenId], what: &str, max: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Model(format!("{what} is empty")));
        }
        if ids.len() > max {
            return Err(Error::Model(format!("{what} length {} exceeds maximum {max}", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Model(format!("{what} id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn embed_packed(&self, seqs: &[&[TokenId]], pos_table: &Tensor<S>) -> Result<(Tensor<S>, Vec<(usize, usize)>)> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            spans.push((ids.len(), ids.len() + s.len()));
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
        }
        let x = self.embed.gather_rows(&ids)?.add(&pos_table.gather_rows(&pos)?)?;
        Ok((x, spans))
    }

    /// Encoder memory for packed contexts.
    pub fn encode(&self, contexts: &[&[TokenId]], drop: &mut Dropout) -> Result<(Tensor<S>, Vec<(usize, usize)>)> {
        for c in contexts {
            self.check_ids(c, "context", self.config.max_context)?;
        }
        let (x, spans) = self.embed_packed(contexts, &self.enc_pos)?;
        let mut x = drop.apply(&x)?;
        for layer in &self.encoder {
            x = layer.forward(&x, &spans, false, drop)?;
        }
        Ok((self.enc_norm.forward(&x)?, spans))
    }

    /// Decoder states (before the output norm) for packed shifted inputs.
    fn decode_states(
        &self,
        inputs: &[&[TokenId]],
        memory: &Tensor<S>,
        mem_spans: &[(usize, usize)],
        drop: &mut Dropout,
    ) -> Result<(Tensor<S>, Vec<(usize, usize)>)> {
        let (y, spans) = self.embed_packed(inputs, &self.dec_pos)?;
        let mut y = drop.apply(&y)?;
        for layer in &self.decoder {
            y = layer.forward(&y, memory, &spans, mem_spans, drop)?;
        }
        Ok((y, spans))
    }

    /// Teacher-forced pass over one `(context, target)` pair.
    pub fn forward(&self, context: &[TokenId], target: &[TokenId]) -> Result<ForwardTrace<S>> {
        self.forward_batch(&[(context, target)], &mut Dropout::off())
    }

    pub fn forward_batch(&self, items: &[(&[TokenId], &[TokenId])], drop: &mut Dropout) -> Result<ForwardTrace<S>> {
        if items.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let contexts: Vec<&[TokenId]> = items.iter().map(|(c, _)| *c).collect();
        let mut shifted = Vec::with_capacity(items.len());
        for (_, t) in items {
            self.check_ids(t, "target", self.config.max_target)?;
            let mut s = Vec::with_capacity(t.len());
            s.push(PAD_ID);
            s.extend_from_slice(&t[..t.len() - 1]);
            shifted.push(s);
        }
        let (memory, mem_spans) = self.encode(&contexts, drop)?;
        let inputs: Vec<&[TokenId]> = shifted.iter().map(Vec::as_slice).collect();
        let (y, spans) = self.decode_states(&inputs, &memory, &mem_spans, drop)?;
        let hidden = self.dec_norm.forward(&y)?;
        let logits = self.lm_head.forward(&hidden)?;
        Ok(ForwardTrace {
            logits,
            hidden,
            target_spans: spans,
            context_lens: contexts.iter().map(|c| c.len()).collect(),
        })
    }

    /// Greedy decoding from an empty prefix.
    pub fn greedy_decode(&self, context: &[TokenId], stop: TokenId, max_len: usize) -> Result<Vec<TokenId>> {
        Ok(self.greedy_continue(context, &[], stop, max_len)?.ids)
    }

    /// Extends `prefix` one argmax token at a time until `stop`, `max_len` new tokens, or the
    /// target length limit. Ties go to the lowest id.
    pub fn greedy_continue(
        &self,
        context: &[TokenId],
        prefix: &[TokenId],
        stop: TokenId,
        max_len: usize,
    ) -> Result<Decoded> {
        no_grad(|| {
            let mut out = Vec::new();
            if max_len == 0 {
                return Ok(Decoded { ids: out, stopped: false });
            }
            let mut drop = Dropout::off();
            let (memory, mem_spans) = self.encode(&[context], &mut drop)?;
            let mut input = Vec::with_capacity(self.config.max_target);
            input.push(PAD_ID);
            input.extend_from_slice(prefix);
            while out.len() < max_len && input.len() <= self.config.max_target {
                let (y, _) = self.decode_states(&[&input], &memory, &mem_spans, &mut drop)?;
                let last = y.slice_rows(y.rows() - 1, y.rows())?;
                let logits = self.lm_head.forward(&self.dec_norm.forward(&last)?)?;
                let next = argmax(logits.data());
                out.push(next);
                if next == stop {
                    return Ok(Decoded { ids: out, stopped: true });
                }
                input.push(next);
            }
            Ok(Decoded { ids: out, stopped: false })
        })
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> ParamVisitor<S> for Weights<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join_name(prefix, "embed"), &self.embed);
        f(&join_name(prefix, "enc_pos"), &self.enc_pos);
        f(&join_name(prefix, "dec_pos"), &self.dec_pos);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit_prefixed(&join_name(prefix, &format!("encoder.{i}")), f);
        }
        self.enc_norm.visit_prefixed(&join_name(prefix, "enc_norm"), f);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit_prefixed(&join_name(prefix, &format!("decoder.{i}")), f);
        }
        self.dec_norm.visit_prefixed(&join_name(prefix, "dec_norm"), f);
        self.lm_head.visit_prefixed(&join_name(prefix, "lm_head"), f);
    }

    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join_name(prefix, "embed"), &mut self.embed);
        f(&join_name(prefix, "enc_pos"), &mut self.enc_pos);
        f(&join_name(prefix, "dec_pos"), &mut self.dec_pos);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_prefixed_mut(&join_name(prefix, &format!("encoder.{i}")), f);
        }
        self.enc_norm.visit_prefixed_mut(&join_name(prefix, "enc_norm"), f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_prefixed_mut(&join_name(prefix, &format!("decoder.{i}")), f);
        }
        self.dec_norm.visit_prefixed_mut(&join_name(prefix, "dec_norm"), f);
        self.lm_head.visit_prefixed_mut(&join_name(prefix, "lm_head"), f);
    }
}
