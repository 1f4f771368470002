//! Training loop: joint loss, Adam with linear warmup, EMA, queue updates.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{Encoder, EncoderConfig, Param};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, InfoNceVariant, LossConfig, MiForm, SliceSpec, StepStreams};
use crate::momentum::{MomentumEncoder, NegativeQueue};
use crate::numerics::{stream_id, RngStream};
use crate::textio::{TokenBatch, Vocab};

const SHUFFLE_STREAM: u16 = 0x70;
const VIEW1_STREAM: u16 = 0x71;
const VIEW2_STREAM: u16 = 0x72;
const MOMENTUM_STREAM: u16 = 0x73;
const SAMPLING_STREAM: u16 = 0x74;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `vocab_size` is overwritten from the vocabulary at train time.
    pub encoder: EncoderConfig,
    pub tau: f64,
    pub lambda: f64,
    /// AMI term on; when off the effective λ is 0.
    pub ami: bool,
    /// Momentum encoder and negative queue on.
    pub moco: bool,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub momentum_dropout: f64,
    pub slice: SliceSpec,
    pub samples_per_tile: usize,
    pub variant: InfoNceVariant,
    pub mi_form: MiForm,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for the 4-layer toy encoder.
    pub fn toy() -> Self {
        let encoder = EncoderConfig::toy(0);
        Self {
            slice: SliceSpec::upper_half(encoder.layers),
            encoder,
            tau: 0.05,
            lambda: 2.5e-3,
            ami: true,
            moco: true,
            momentum: 0.995,
            queue_capacity: 384,
            momentum_dropout: 0.3,
            samples_per_tile: 150,
            variant: InfoNceVariant::default(),
            mi_form: MiForm::Log,
            batch_size: 8,
            lr: 1e-3,
            warmup: 20,
            clip_norm: 1.0,
            steps: 200,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Full-scale optimisation settings (BERT-base sized encoder).
    pub fn full_scale() -> Self {
        let encoder = EncoderConfig {
            layers: 12,
            heads: 12,
            width: 768,
            ffn_width: 3072,
            max_len: 32,
            embed_dim: 768,
            vocab_size: 0,
            dropout: 0.1,
        };
        Self {
            slice: SliceSpec::last_layers(12, 4, 2),
            encoder,
            batch_size: 50,
            lr: 3e-5,
            warmup: 250,
            ..Self::toy()
        }
    }

    /// JSON form stored in checkpoint headers.
    pub fn to_meta(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    pub fn from_meta(meta: &serde_json::Value) -> Option<Self> {
        serde_json::from_value(meta.clone()).ok()
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.ami {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.effective_lambda(),
            slice: self.slice,
            samples_per_tile: self.samples_per_tile,
            variant: self.variant,
            mi_form: self.mi_form,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return fail(format!("tau = {} must be > 0", self.tau));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda = {} must be >= 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} outside [0, 1]", self.momentum));
        }
        if !(0.0..1.0).contains(&self.momentum_dropout) {
            return fail(format!("momentum_dropout = {} outside [0, 1)", self.momentum_dropout));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return fail("batch_size and steps must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return fail("lr and clip_norm must be positive".into());
        }
        if self.samples_per_tile < 2 {
            return fail(format!("samples_per_tile = {} (need at least 2)", self.samples_per_tile));
        }
        self.slice
            .tiles(self.encoder.layers, self.encoder.heads)
            .map_err(|e| Error::Config(format!("slice: {e}")))?;
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub infonce: f64,
    pub ami: f64,
    pub mean_mi: f64,
    pub skipped_tiles: usize,
    pub queue_fill: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// L2 norm of all online parameters after the update.
    pub param_norm: f64,
}

pub const METRICS_HEADER: &str = "step\ttotal\tinfonce\tami\tmean_mi\tskipped_tiles\tqueue_fill\tgrad_norm\tlr\tparam_norm";

impl StepMetrics {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.total,
            self.infonce,
            self.ami,
            self.mean_mi,
            self.skipped_tiles,
            self.queue_fill,
            self.grad_norm,
            self.lr,
            self.param_norm
        )
    }
}

/// Full metrics log: `# `-prefixed config lines, the column header, one row per step.
pub fn metrics_tsv(config_lines: &[String], rows: &[StepMetrics]) -> String {
    let mut s = String::new();
    for l in config_lines {
        let _ = writeln!(s, "# {l}");
    }
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.tsv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }
}

/// Linear warmup then constant: `lr · min(1, step / warmup)`, `step` 1-based.
pub fn warmup_lr(lr: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        return lr;
    }
    lr * (step as f64 / warmup as f64).min(1.0)
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &[Param], grads: &[Vec<f64>], state: &mut AdamState, lr_t: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", format!("{} params, {} grads, {} states", params.len(), grads.len(), state.m.len())));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.tensor.numel() != g.len() || g.len() != m.len() {
            return Err(Error::shape("adam_step", format!("{}: {} values, {} grads", p.name, p.tensor.numel(), g.len())));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter().enumerate() {
        let mut w = p.tensor.value_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..w.len() {
            let g = grads[i][k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            w[k] -= lr_t * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Deterministic batch order: a fresh permutation per epoch, drawn from `(seed, epoch)`.
/// The tail of each permutation that does not fill a batch is dropped.
#[derive(Debug)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(len);
        let mut s = Self { len, batch, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.len).collect();
        let mut rng = RngStream::new(self.seed, stream_id(SHUFFLE_STREAM, self.epoch));
        self.order.shuffle(rng.as_rng());
        self.cursor = 0;
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        b
    }
}

pub struct TrainRun {
    pub encoder: Encoder,
    pub metrics: Vec<StepMetrics>,
}

/// Where and how often [`train_with_checkpoints`] writes.
#[derive(Clone, Debug)]
pub struct CheckpointPlan {
    pub path: PathBuf,
    pub meta: serde_json::Value,
}

/// Run `cfg.steps` optimisation steps on `sentences`. `observe` sees every step's metrics as
/// they are produced; an error from it stops training.
pub fn train(
    sentences: &[&str],
    vocab: &Vocab,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainRun> {
    train_with_checkpoints(sentences, vocab, cfg, None, observe)
}

pub fn train_with_checkpoints(
    sentences: &[&str],
    vocab: &Vocab,
    cfg: &TrainConfig,
    plan: Option<&CheckpointPlan>,
    observe: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let needs_negatives = !cfg.variant.positive_only && !cfg.variant.positive_in_denominator;
    if needs_negatives && sentences.len().min(cfg.batch_size) < 2 {
        return Err(Error::Config(format!(
            "{} training sentence(s) with batch size {}: InfoNCE needs at least 2 per batch",
            sentences.len(),
            cfg.batch_size
        )));
    }
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    let online = Encoder::new(enc_cfg.clone(), cfg.seed)?;
    let params = online.params();
    let momentum = if cfg.moco { Some(MomentumEncoder::new(&online, cfg.momentum, cfg.momentum_dropout)?) } else { None };
    let mut queue = cfg.moco.then(|| NegativeQueue::new(cfg.queue_capacity, enc_cfg.embed_dim));
    let mut adam = AdamState::new(&params);
    let mut sampler = BatchSampler::new(sentences.len(), cfg.batch_size, cfg.seed);
    let loss_cfg = cfg.loss_config();
    let save = |step: usize| -> Result<()> {
        match plan {
            Some(p) => Checkpoint::from_encoder(&online, vocab, step, p.meta.clone()).save(&p.path),
            None => Ok(()),
        }
    };

    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx = sampler.next_batch();
        let rows: Vec<&str> = idx.iter().map(|&i| sentences[i]).collect();
        let batch = TokenBatch::tokenize(&rows, vocab, enc_cfg.max_len)?.trimmed();
        let counter = step as u64;
        let streams = StepStreams {
            view1: RngStream::new(cfg.seed, stream_id(VIEW1_STREAM, counter)),
            view2: RngStream::new(cfg.seed, stream_id(VIEW2_STREAM, counter)),
            momentum: RngStream::new(cfg.seed, stream_id(MOMENTUM_STREAM, counter)),
            sampling: RngStream::new(cfg.seed, stream_id(SAMPLING_STREAM, counter)),
        };
        online.zero_grad();
        let out = joint_loss(&batch, &online, momentum.as_ref(), queue.as_ref(), &loss_cfg, streams)?;
        if !out.report.total.is_finite() {
            return Err(Error::NonFinite { index: step, context: "total loss".into() });
        }
        out.total.backward()?;
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| p.tensor.grad()).collect();
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { index: step, context: "gradient norm".into() });
        }
        let lr = warmup_lr(cfg.lr, step, cfg.warmup);
        adam_step(&params, &grads, &mut adam, lr)?;
        if let Some(m) = &momentum {
            m.update(&online)?;
        }
        if let (Some(q), Some(e)) = (queue.as_mut(), out.momentum_embeddings.as_ref()) {
            q.enqueue(e)?;
        }
        let param_norm = params.iter().flat_map(|p| p.tensor.to_vec()).map(|w| w * w).sum::<f64>().sqrt();
        let row = StepMetrics {
            step,
            total: out.report.total,
            infonce: out.report.infonce,
            ami: out.report.ami,
            mean_mi: out.report.mean_mi(),
            skipped_tiles: out.report.skipped_tiles(),
            queue_fill: queue.as_ref().map_or(0, NegativeQueue::len),
            grad_norm,
            lr,
            param_norm,
        };
        observe(&row)?;
        metrics.push(row);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save(step)?;
        }
    }
    save(cfg.steps)?;
    online.zero_grad();
    Ok(TrainRun { encoder: online, metrics })
}
