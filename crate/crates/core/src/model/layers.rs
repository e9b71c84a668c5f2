use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{join_name, ParamVisitor, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

pub(crate) fn normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| S::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::param(shape, data).expect("shape matches data")
}

fn filled<S: Scalar>(shape: Vec<usize>, v: f64) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::param(shape, vec![S::from_f64_lossy(v); n]).expect("shape matches data")
}

/// Inverted dropout driven by an explicit RNG; a no-op without one or at rate 0.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply<S: Scalar>(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let rng = match self.rng.as_deref_mut() {
            Some(r) if self.rate > 0.0 => r,
            _ => return Ok(x.clone()),
        };
        let keep = S::from_f64_lossy(1.0 / (1.0 - self.rate));
        let mask = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.rate { S::zero() } else { keep })
            .collect();
        x.mul(&Tensor::constant(x.shape().to_vec(), mask)?)
    }
}

/// `T × T` additive mask that hides future positions.
pub fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = S::neg_infinity();
        }
    }
    Tensor::constant(vec![t, t], data).expect("square mask")
}

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, std: f64) -> Self {
        Self {
            w: normal(rng, vec![d_in, d_out], std),
            b: filled(vec![1, d_out], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.w)?.add_row(&self.b)
    }
}

impl<S: Scalar> ParamVisitor<S> for Linear<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join_name(prefix, "w"), &self.w);
        f(&join_name(prefix, "b"), &self.b);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join_name(prefix, "w"), &mut self.w);
        f(&join_name(prefix, "b"), &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct Norm<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Norm<S> {
    pub fn init(d: usize) -> Self {
        Self {
            gain: filled(vec![1, d], 1.0),
            bias: filled(vec![1, d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

impl<S: Scalar> ParamVisitor<S> for Norm<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&join_name(prefix, "gain"), &self.gain);
        f(&join_name(prefix, "bias"), &self.bias);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join_name(prefix, "gain"), &mut self.gain);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

/// Row ranges `[start, end)` of the samples packed into one matrix.
pub type Spans = [(usize, usize)];

#[derive(Debug, Clone)]
pub struct Attention<S: Scalar> {
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub o: Linear<S>,
    pub n_heads: usize,
}

impl<S: Scalar> Attention<S> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, n_heads: usize, std: f64) -> Self {
        Self {
            q: Linear::init(rng, d, d, std),
            k: Linear::init(rng, d, d, std),
            v: Linear::init(rng, d, d, std),
            o: Linear::init(rng, d, d, std),
            n_heads,
        }
    }

    /// Multi-head attention of the `q_spans` rows of `xq` over the matching `kv_spans` rows of `xkv`.
    /// Projections run on the packed matrices; scores are computed per sample.
    pub fn forward(
        &self,
        xq: &Tensor<S>,
        xkv: &Tensor<S>,
        q_spans: &Spans,
        kv_spans: &Spans,
        causal: bool,
    ) -> Result<Tensor<S>> {
        let q = self.q.forward(xq)?;
        let k = self.k.forward(xkv)?;
        let v = self.v.forward(xkv)?;
        let d = q.cols();
        let dh = d / self.n_heads;
        let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let rows = |t: &Tensor<S>, (s, e): (usize, usize)| -> Result<Tensor<S>> {
            if s == 0 && e == t.rows() {
                Ok(t.clone())
            } else {
                t.slice_rows(s, e)
            }
        };
        let mut outs = Vec::with_capacity(q_spans.len());
        for (&qs, &ks) in q_spans.iter().zip(kv_spans) {
            let (qi, ki, vi) = (rows(&q, qs)?, rows(&k, ks)?, rows(&v, ks)?);
            let mask = causal.then(|| causal_mask::<S>(qi.rows()));
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let (a, b) = (h * dh, (h + 1) * dh);
                let (qh, kh, vh) = if self.n_heads == 1 {
                    (qi.clone(), ki.clone(), vi.clone())
                } else {
                    (qi.slice_cols(a, b)?, ki.slice_cols(a, b)?, vi.slice_cols(a, b)?)
                };
                let mut scores = qh.matmul_t(&kh)?.scale(scale);
                if let Some(m) = &mask {
                    scores = scores.add(m)?;
                }
                heads.push(scores.softmax()?.matmul(&vh)?);
            }
            outs.push(if heads.len() == 1 { heads.pop().unwrap() } else { Tensor::concat_cols(&heads)? });
        }
        let joined = if outs.len() == 1 { outs.pop().unwrap() } else { Tensor::concat_rows(&outs)? };
        self.o.forward(&joined)
    }
}

impl<S: Scalar> ParamVisitor<S> for Attention<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.q.visit_prefixed(&join_name(prefix, "q"), f);
        self.k.visit_prefixed(&join_name(prefix, "k"), f);
        self.v.visit_prefixed(&join_name(prefix, "v"), f);
        self.o.visit_prefixed(&join_name(prefix, "o"), f);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.q.visit_prefixed_mut(&join_name(prefix, "q"), f);
        self.k.visit_prefixed_mut(&join_name(prefix, "k"), f);
        self.v.visit_prefixed_mut(&join_name(prefix, "v"), f);
        self.o.visit_prefixed_mut(&join_name(prefix, "o"), f);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward<S: Scalar> {
    pub up: Linear<S>,
    pub down: Linear<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, d_ff: usize, std: f64) -> Self {
        Self {
            up: Linear::init(rng, d, d_ff, std),
            down: Linear::init(rng, d_ff, d, std),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.down.forward(&self.up.forward(x)?.gelu())
    }
}

impl<S: Scalar> ParamVisitor<S> for FeedForward<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.up.visit_prefixed(&join_name(prefix, "up"), f);
        self.down.visit_prefixed(&join_name(prefix, "down"), f);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.up.visit_prefixed_mut(&join_name(prefix, "up"), f);
        self.down.visit_prefixed_mut(&join_name(prefix, "down"), f);
    }
}

/// Pre-norm self-attention block followed by a pre-norm feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer<S: Scalar> {
    pub ln1: Norm<S>,
    pub attn: Attention<S>,
    pub ln2: Norm<S>,
    pub ff: FeedForward<S>,
}

impl<S: Scalar> EncoderLayer<S> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, n_heads: usize, d_ff: usize, std: f64) -> Self {
        Self {
            ln1: Norm::init(d),
            attn: Attention::init(rng, d, n_heads, std),
            ln2: Norm::init(d),
            ff: FeedForward::init(rng, d, d_ff, std),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, spans: &Spans, causal: bool, drop: &mut Dropout) -> Result<Tensor<S>> {
        let h = self.ln1.forward(x)?;
        let x = x.add(&drop.apply(&self.attn.forward(&h, &h, spans, spans, causal)?)?)?;
        let h = self.ln2.forward(&x)?;
        x.add(&drop.apply(&self.ff.forward(&h)?)?)
    }
}

impl<S: Scalar> ParamVisitor<S> for EncoderLayer<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.ln1.visit_prefixed(&join_name(prefix, "ln1"), f);
        self.attn.visit_prefixed(&join_name(prefix, "attn"), f);
        self.ln2.visit_prefixed(&join_name(prefix, "ln2"), f);
        self.ff.visit_prefixed(&join_name(prefix, "ff"), f);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.ln1.visit_prefixed_mut(&join_name(prefix, "ln1"), f);
        self.attn.visit_prefixed_mut(&join_name(prefix, "attn"), f);
        self.ln2.visit_prefixed_mut(&join_name(prefix, "ln2"), f);
        self.ff.visit_prefixed_mut(&join_name(prefix, "ff"), f);
    }
}

/// Causal self-attention, cross-attention over the encoder memory, feed-forward; all pre-norm.
#[derive(Debug, Clone)]
pub struct DecoderLayer<S: Scalar> {
    pub ln1: Norm<S>,
    pub self_attn: Attention<S>,
    pub ln2: Norm<S>,
    pub cross_attn: Attention<S>,
    pub ln3: Norm<S>,
    pub ff: FeedForward<S>,
}

impl<S: Scalar> DecoderLayer<S> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, n_heads: usize, d_ff: usize, std: f64) -> Self {
        Self {
            ln1: Norm::init(d),
            self_attn: Attention::init(rng, d, n_heads, std),
            ln2: Norm::init(d),
            cross_attn: Attention::init(rng, d, n_heads, std),
            ln3: Norm::init(d),
            ff: FeedForward::init(rng, d, d_ff, std),
        }
    }

    pub fn forward(
        &self,
        y: &Tensor<S>,
        memory: &Tensor<S>,
        y_spans: &Spans,
        mem_spans: &Spans,
        drop: &mut Dropout,
    ) -> Result<Tensor<S>> {
        let h = self.ln1.forward(y)?;
        let y = y.add(&drop.apply(&self.self_attn.forward(&h, &h, y_spans, y_spans, true)?)?)?;
        let h = self.ln2.forward(&y)?;
        let y = y.add(&drop.apply(&self.cross_attn.forward(&h, memory, y_spans, mem_spans, false)?)?)?;
        let h = self.ln3.forward(&y)?;
        y.add(&drop.apply(&self.ff.forward(&h)?)?)
    }
}

impl<S: Scalar> ParamVisitor<S> for DecoderLayer<S> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.ln1.visit_prefixed(&join_name(prefix, "ln1"), f);
        self.self_attn.visit_prefixed(&join_name(prefix, "self_attn"), f);
        self.ln2.visit_prefixed(&join_name(prefix, "ln2"), f);
        self.cross_attn.visit_prefixed(&join_name(prefix, "cross_attn"), f);
        self.ln3.visit_prefixed(&join_name(prefix, "ln3"), f);
        self.ff.visit_prefixed(&join_name(prefix, "ff"), f);
    }
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.ln1.visit_prefixed_mut(&join_name(prefix, "ln1"), f);
        self.self_attn.visit_prefixed_mut(&join_name(prefix, "self_attn"), f);
        self.ln2.visit_prefixed_mut(&join_name(prefix, "ln2"), f);
        self.cross_attn.visit_prefixed_mut(&join_name(prefix, "cross_attn"), f);
        self.ln3.visit_prefixed_mut(&join_name(prefix, "ln3"), f);
        self.ff.visit_prefixed_mut(&join_name(prefix, "ff"), f);
    }
}
