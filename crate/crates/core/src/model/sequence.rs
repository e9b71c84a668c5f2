use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{normal, Dropout, EncoderLayer};
use super::ModelConfig;
use crate::autodiff::{join_name, ParamVisitor, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One causal transformer layer over a turn-indexed sequence of policy vectors.
#[derive(Debug, Clone)]
pub struct SequenceEncoder<S: Scalar> {
    pub pos: Tensor<S>,
    pub layer: EncoderLayer<S>,
}

impl<S: Scalar> SequenceEncoder<S> {
    pub fn init(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            pos: normal(rng, vec![config.max_turns, d], config.init_std),
            layer: EncoderLayer::init(rng, d, config.n_heads, config.d_ff, config.init_std),
        }
    }

    /// Encodes `history` (`L × d`, one row per turn) and returns the output at the last turn, `1 × d`.
    pub fn encode(&self, history: &Tensor<S>) -> Result<Tensor<S>> {
        let l = history.rows();
        if history.shape().len() != 2 || l == 0 {
            return Err(Error::Model("policy history is empty".into()));
        }
        if l > self.pos.rows() {
            return Err(Error::Model(format!(
                "policy history of {l} turns exceeds maximum {}",
                self.pos.rows()
            )));
        }
        let x = history.add(&self.pos.slice_rows(0, l)?)?;
        let y = self.layer.forward(&x, &[(0, l)], true, &mut Dropout::off())?;
        y.slice_rows(l - 1, l)
    }
}

impl<S: Scalar> ParamVisitor<S> for SequenceEncoder<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join_name(prefix, "pos"), &self.pos);
        self.layer.visit_prefixed(&join_name(prefix, "layer"), f);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join_name(prefix, "pos"), &mut self.pos);
        self.layer.visit_prefixed_mut(&join_name(prefix, "layer"), f);
    }
}

/// Encoders for the prior and posterior policy sequences; shared unless configured otherwise.
#[derive(Debug, Clone)]
pub struct PolicyEncoders<S: Scalar> {
    pub prior: SequenceEncoder<S>,
    pub posterior: Option<SequenceEncoder<S>>,
}

impl<S: Scalar> PolicyEncoders<S> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let prior = SequenceEncoder::init(&mut rng, config);
        let posterior = config
            .separate_sequence_encoders
            .then(|| SequenceEncoder::init(&mut rng, config));
        Ok(Self { prior, posterior })
    }

    pub fn posterior(&self) -> &SequenceEncoder<S> {
        self.posterior.as_ref().unwrap_or(&self.prior)
    }
}

impl<S: Scalar> ParamVisitor<S> for PolicyEncoders<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.prior.visit_prefixed(&join_name(prefix, "prior"), f);
        if let Some(p) = &self.posterior {
            p.visit_prefixed(&join_name(prefix, "posterior"), f);
        }
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.prior.visit_prefixed_mut(&join_name(prefix, "prior"), f);
        if let Some(p) = &mut self.posterior {
            p.visit_prefixed_mut(&join_name(prefix, "posterior"), f);
        }
    }
}
