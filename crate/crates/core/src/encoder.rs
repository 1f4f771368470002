//! Small post-LN transformer bi-encoder.
//!
//! A forward pass returns the pooled `[CLS]` embeddings and, per layer, the
//! attention probabilities before attention dropout. Both views of a batch come
//! from the same parameters with different dropout streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stream_id, DiffTensor, RngStream, MASKED};
use crate::textio::TokenBatch;

const INIT_STREAM: u16 = 0x1a;
const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, width 64, 32 positions, 64-wide embeddings.
    pub fn toy(vocab_size: usize) -> Self {
        Self { layers: 4, heads: 4, width: 64, ffn_width: 128, max_len: 32, embed_dim: 64, vocab_size, dropout: 0.1 }
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers < 2 {
            return fail(format!("layers = {} (need at least 2)", self.layers));
        }
        if self.heads == 0 || !self.heads.is_multiple_of(2) {
            return fail(format!("heads = {} (must be even for head-pair pooling)", self.heads));
        }
        if !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.ffn_width == 0 || self.embed_dim == 0 || self.vocab_size == 0 {
            return fail("ffn_width, embed_dim and vocab_size must be positive".into());
        }
        if self.max_len < 2 {
            return fail(format!("max_len = {} (need at least 2)", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum Mode {
    Train(RngStream),
    Eval,
}

/// Named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: DiffTensor,
}

#[derive(Clone, Debug)]
struct Layer {
    wq: DiffTensor,
    bq: DiffTensor,
    wk: DiffTensor,
    bk: DiffTensor,
    wv: DiffTensor,
    bv: DiffTensor,
    wo: DiffTensor,
    bo: DiffTensor,
    ln1_g: DiffTensor,
    ln1_b: DiffTensor,
    w1: DiffTensor,
    b1: DiffTensor,
    w2: DiffTensor,
    b2: DiffTensor,
    ln2_g: DiffTensor,
    ln2_b: DiffTensor,
}

/// Dense layer + tanh applied to the `[CLS]` hidden state.
#[derive(Clone, Debug)]
pub struct Pooler {
    pub weight: DiffTensor,
    pub bias: DiffTensor,
}

impl Pooler {
    /// `hidden` is `[B, n, d]`; returns `[B, U]`.
    pub fn forward(&self, hidden: &DiffTensor) -> Result<DiffTensor> {
        let s = hidden.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::shape("pool", format!("hidden {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let idx: Vec<usize> = (0..b).flat_map(|i| (0..d).map(move |j| i * n * d + j)).collect();
        let cls = hidden.gather(&idx)?.reshape(&[b, d])?;
        Ok(cls.matmul(&self.weight)?.add(&self.bias)?.tanh())
    }
}

/// Post-softmax attention of one forward pass, one `[B, H, n, n]` tensor per layer.
#[derive(Clone, Debug)]
pub struct AttentionTensor {
    pub layers: Vec<DiffTensor>,
    pub lengths: Vec<usize>,
    pub heads: usize,
    pub seq_len: usize,
}

impl AttentionTensor {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flat offset of `(sample, head, query, key)` inside one layer tensor.
    pub fn offset(&self, sample: usize, head: usize, query: usize, key: usize) -> usize {
        let n = self.seq_len;
        ((sample * self.heads + head) * n + query) * n + key
    }

    /// Values of one sample as a `L × H × n × n` row-major array.
    pub fn sample_values(&self, sample: usize) -> Vec<f64> {
        let block = self.heads * self.seq_len * self.seq_len;
        self.layers
            .iter()
            .flat_map(|l| l.value()[sample * block..(sample + 1) * block].to_vec())
            .collect()
    }
}

pub struct EncoderOutput {
    pub embeddings: DiffTensor,
    pub attention: AttentionTensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: DiffTensor,
    pos_emb: DiffTensor,
    emb_ln_g: DiffTensor,
    emb_ln_b: DiffTensor,
    layers: Vec<Layer>,
    pooler: Pooler,
}

impl Encoder {
    /// Weights `N(0, 0.02)`, biases zero, layer-norm gains one.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, stream_id(INIT_STREAM, 0));
        Self::assemble(config, |name, shape| {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| INIT_STD * rng.normal()).collect()
            };
            DiffTensor::param(shape, values)
        })
    }

    /// Rebuild from named values (checkpoint load). Names and shapes must match `config`.
    pub fn from_named(config: EncoderConfig, named: &[(String, Vec<usize>, Vec<f64>)], trainable: bool) -> Result<Self> {
        config.validate()?;
        let mut it = named.iter();
        let enc = Self::assemble(config, |name, shape| {
            let (n, s, v) = it
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if n != name || s != shape {
                return Err(Error::Checkpoint(format!("expected {name} {shape:?}, found {n} {s:?}")));
            }
            if trainable {
                DiffTensor::param(shape, v.clone())
            } else {
                DiffTensor::constant(shape, v.clone())
            }
        })?;
        if let Some((n, _, _)) = it.next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {n}")));
        }
        Ok(enc)
    }

    fn assemble(config: EncoderConfig, mut make: impl FnMut(&str, &[usize]) -> Result<DiffTensor>) -> Result<Self> {
        let (d, f, u) = (config.width, config.ffn_width, config.embed_dim);
        let tok_emb = make("embeddings.token.weight", &[config.vocab_size, d])?;
        let pos_emb = make("embeddings.position.weight", &[config.max_len, d])?;
        let emb_ln_g = make("embeddings.norm.gamma", &[d])?;
        let emb_ln_b = make("embeddings.norm.beta", &[d])?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut p = |part: &str, shape: &[usize]| make(&format!("layer.{l}.{part}"), shape);
            layers.push(Layer {
                wq: p("attention.query.weight", &[d, d])?,
                bq: p("attention.query.bias", &[d])?,
                wk: p("attention.key.weight", &[d, d])?,
                bk: p("attention.key.bias", &[d])?,
                wv: p("attention.value.weight", &[d, d])?,
                bv: p("attention.value.bias", &[d])?,
                wo: p("attention.output.weight", &[d, d])?,
                bo: p("attention.output.bias", &[d])?,
                ln1_g: p("attention.norm.gamma", &[d])?,
                ln1_b: p("attention.norm.beta", &[d])?,
                w1: p("ffn.inner.weight", &[d, f])?,
                b1: p("ffn.inner.bias", &[f])?,
                w2: p("ffn.outer.weight", &[f, d])?,
                b2: p("ffn.outer.bias", &[d])?,
                ln2_g: p("ffn.norm.gamma", &[d])?,
                ln2_b: p("ffn.norm.beta", &[d])?,
            });
        }
        let pooler = Pooler { weight: make("pooler.weight", &[d, u])?, bias: make("pooler.bias", &[u])? };
        Ok(Self { config, tok_emb, pos_emb, emb_ln_g, emb_ln_b, layers, pooler })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn pooler(&self) -> &Pooler {
        &self.pooler
    }

    /// All parameters in a fixed order (embeddings, layers, pooler).
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &DiffTensor| out.push(Param { name, tensor: t.clone() });
        push("embeddings.token.weight".into(), &self.tok_emb);
        push("embeddings.position.weight".into(), &self.pos_emb);
        push("embeddings.norm.gamma".into(), &self.emb_ln_g);
        push("embeddings.norm.beta".into(), &self.emb_ln_b);
        for (l, layer) in self.layers.iter().enumerate() {
            let parts: [(&str, &DiffTensor); 16] = [
                ("attention.query.weight", &layer.wq),
                ("attention.query.bias", &layer.bq),
                ("attention.key.weight", &layer.wk),
                ("attention.key.bias", &layer.bk),
                ("attention.value.weight", &layer.wv),
                ("attention.value.bias", &layer.bv),
                ("attention.output.weight", &layer.wo),
                ("attention.output.bias", &layer.bo),
                ("attention.norm.gamma", &layer.ln1_g),
                ("attention.norm.beta", &layer.ln1_b),
                ("ffn.inner.weight", &layer.w1),
                ("ffn.inner.bias", &layer.b1),
                ("ffn.outer.weight", &layer.w2),
                ("ffn.outer.bias", &layer.b2),
                ("ffn.norm.gamma", &layer.ln2_g),
                ("ffn.norm.beta", &layer.ln2_b),
            ];
            for (part, t) in parts {
                push(format!("layer.{l}.{part}"), t);
            }
        }
        push("pooler.weight".into(), &self.pooler.weight);
        push("pooler.bias".into(), &self.pooler.bias);
        out
    }

    pub fn named_values(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params().into_iter().map(|p| (p.name, p.tensor.shape().to_vec(), p.tensor.to_vec())).collect()
    }

    /// Deep copy with fresh leaves; `trainable = false` yields a gradient-free replica.
    pub fn replicate(&self, dropout: f64, trainable: bool) -> Result<Self> {
        let config = EncoderConfig { dropout, ..self.config.clone() };
        Self::from_named(config, &self.named_values(), trainable)
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.tensor.zero_grad();
        }
    }

    pub fn encode(&self, batch: &TokenBatch, mode: Mode) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let (b, n, d, h) = (batch.rows(), batch.max_len(), cfg.width, cfg.heads);
        let dh = cfg.head_width();
        if n > cfg.max_len {
            return Err(Error::invalid(format!("batch length {n} exceeds encoder max_len {}", cfg.max_len)));
        }
        let (mut rng, rate) = match mode {
            Mode::Train(rng) => (Some(rng), cfg.dropout),
            Mode::Eval => (None, 0.0),
        };
        let mut drop = |t: DiffTensor| -> Result<DiffTensor> {
            match rng.as_mut() {
                Some(r) if rate > 0.0 => t.dropout(rate, r),
                _ => Ok(t),
            }
        };

        let pos = if n == cfg.max_len {
            self.pos_emb.clone()
        } else {
            self.pos_emb.gather(&(0..n * d).collect::<Vec<_>>())?.reshape(&[n, d])?
        };
        let x = DiffTensor::embedding(&self.tok_emb, batch.ids(), &[b, n])?.add(&pos)?;
        let mut x = drop(x.layer_norm(&self.emb_ln_g, &self.emb_ln_b, LN_EPS)?)?;

        let mask: Vec<f64> = (0..b)
            .flat_map(|i| {
                let s = batch.lengths()[i];
                (0..h * n).flat_map(move |_| (0..n).map(move |k| if k < s { 0.0 } else { MASKED }))
            })
            .collect();
        let scale = 1.0 / (dh as f64).sqrt();
        let split = |t: DiffTensor| -> Result<DiffTensor> { t.reshape(&[b, n, h, dh])?.permute(&[0, 2, 1, 3]) };

        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = split(x.matmul(&layer.wq)?.add(&layer.bq)?)?;
            let k = split(x.matmul(&layer.wk)?.add(&layer.bk)?)?;
            let v = split(x.matmul(&layer.wv)?.add(&layer.bv)?)?;
            let scores = q.matmul(&k.transpose()?)?.scale(scale);
            let probs = scores.softmax(Some(&mask))?;
            attention.push(probs.clone());
            let ctx = drop(probs)?.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
            let attn_out = drop(ctx.matmul(&layer.wo)?.add(&layer.bo)?)?;
            x = x.add(&attn_out)?.layer_norm(&layer.ln1_g, &layer.ln1_b, LN_EPS)?;
            let ff = x.matmul(&layer.w1)?.add(&layer.b1)?.gelu().matmul(&layer.w2)?.add(&layer.b2)?;
            x = x.add(&drop(ff)?)?.layer_norm(&layer.ln2_g, &layer.ln2_b, LN_EPS)?;
        }
        let embeddings = self.pooler.forward(&x)?;
        Ok(EncoderOutput {
            embeddings,
            attention: AttentionTensor { layers: attention, lengths: batch.lengths().to_vec(), heads: h, seq_len: n },
        })
    }
}
