//! Contrastive (InfoNCE) and attention mutual-information (AMI) objectives.
//!
//! The AMI term runs in four stages: slice each sample's attention tensor into
//! head-pooled tiles, sample the same positions from both views' tiles, estimate
//! MI per tile under a log-normal model (`−½·ln(1 − ρ²)` of the log values), and
//! average over tiles and samples.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionTensor, Encoder, Mode};
use crate::error::{Error, Result};
use crate::momentum::{MomentumEncoder, NegativeQueue};
use crate::numerics::{DiffTensor, RngStream};
use crate::textio::TokenBatch;

/// Floor for `1 − ρ²` before the log.
pub const RHO_EPS: f64 = 1e-6;
/// Floor for attention values before the log transform.
pub const ATTENTION_FLOOR: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 2.5e-3;
pub const DEFAULT_SAMPLES_PER_TILE: usize = 150;

/// Which pairs populate the InfoNCE denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoNceVariant {
    /// In-batch negatives from the other view (`⁺e_j`) instead of the same view (`e_j`).
    pub cross_view: bool,
    /// Add the positive pair to the denominator (the usual softmax form).
    pub positive_in_denominator: bool,
    /// No negatives at all: the loss is `−Σ cos(e_i, ⁺e_i)/τ`.
    pub positive_only: bool,
}

/// Per-tile MI formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiForm {
    /// `−½·ln(max(1 − ρ², ε))`.
    #[default]
    Log,
    /// `−½·(1 − ρ²)`, the return line of the reference pseudocode (ablation only).
    Linear,
}

/// `−Σ_i log[ d(e_i, ⁺e_i) / (Σ_{j≠i} d(e_i, n_j) + Σ_j d(e_i, q_j)) ]` with `d = exp(cos/τ)`.
///
/// `e1`, `e2` are `[B, U]`; `queue` is `[Q, U]` of detached momentum embeddings.
pub fn infonce(
    e1: &DiffTensor,
    e2: &DiffTensor,
    queue: Option<&DiffTensor>,
    tau: f64,
    variant: InfoNceVariant,
) -> Result<DiffTensor> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    if e1.shape() != e2.shape() || e1.shape().len() != 2 || e1.shape()[0] == 0 {
        return Err(Error::shape("infonce", format!("{:?} vs {:?}", e1.shape(), e2.shape())));
    }
    let b = e1.shape()[0];
    let cross = e1.cosine(e2)?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let pos = cross.gather(&diag)?.scale(1.0 / tau);
    if variant.positive_only {
        return Ok(pos.sum().neg());
    }
    let queue = queue.filter(|q| q.shape()[0] > 0);
    if b == 1 && queue.is_none() && !variant.positive_in_denominator {
        return Err(Error::invalid("InfoNCE denominator is empty: one sample, no queue, positive excluded"));
    }

    let mut terms: Vec<DiffTensor> = Vec::with_capacity(3);
    if b > 1 {
        let sims = if variant.cross_view { cross.clone() } else { e1.cosine(e1)? };
        let off_diag: Vec<f64> = (0..b * b).map(|k| if k / b == k % b { 0.0 } else { 1.0 }).collect();
        let off_diag = DiffTensor::constant(&[b, b], off_diag)?;
        terms.push(sims.scale(1.0 / tau).exp().mul(&off_diag)?.sum_last()?);
    }
    if let Some(q) = queue {
        if q.shape().len() != 2 || q.shape()[1] != e1.shape()[1] {
            return Err(Error::shape("infonce", format!("queue {:?} vs embeddings {:?}", q.shape(), e1.shape())));
        }
        terms.push(e1.cosine(q)?.scale(1.0 / tau).exp().sum_last()?);
    }
    if variant.positive_in_denominator {
        terms.push(pos.exp());
    }
    let mut denom = terms[0].clone();
    for t in &terms[1..] {
        denom = denom.add(t)?;
    }
    denom.log().sub(&pos).map(|per_sample| per_sample.sum())
}

/// Which layers and how many adjacent heads form one tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    /// First selected layer, 1-based.
    pub first_layer: usize,
    /// Last selected layer, 1-based, inclusive.
    pub last_layer: usize,
    /// Adjacent heads averaged into one tile (no overlap).
    pub head_group: usize,
}

impl SliceSpec {
    /// The last `count` layers of a `layers`-deep stack.
    pub fn last_layers(layers: usize, count: usize, head_group: usize) -> Self {
        Self { first_layer: layers + 1 - count.min(layers), last_layer: layers, head_group }
    }

    /// Upper half of the stack, head pairs.
    pub fn upper_half(layers: usize) -> Self {
        Self::last_layers(layers, layers / 2, 2)
    }

    pub fn num_layers(&self) -> usize {
        self.last_layer + 1 - self.first_layer
    }

    /// Tile count `R` for a stack of `layers` × `heads`, or an error if the spec does not fit.
    pub fn tiles(&self, layers: usize, heads: usize) -> Result<usize> {
        if self.first_layer < 1 || self.first_layer > self.last_layer || self.last_layer > layers {
            return Err(Error::invalid(format!(
                "layer range {}..={} outside 1..={layers}",
                self.first_layer, self.last_layer
            )));
        }
        if self.head_group == 0 || !heads.is_multiple_of(self.head_group) {
            return Err(Error::invalid(format!("{heads} heads not divisible by head group {}", self.head_group)));
        }
        Ok(self.num_layers() * heads / self.head_group)
    }
}

/// Head-pooled `n × n` tiles of one sample, layer-major then head group.
pub fn slice_attention(att: &AttentionTensor, sample: usize, spec: &SliceSpec) -> Result<Vec<DiffTensor>> {
    let r = spec.tiles(att.num_layers(), att.heads)?;
    if sample >= att.batch() {
        return Err(Error::invalid(format!("sample {sample} outside batch of {}", att.batch())));
    }
    let n = att.seq_len;
    let g = spec.head_group;
    let mut tiles = Vec::with_capacity(r);
    for layer in &att.layers[spec.first_layer - 1..spec.last_layer] {
        for group in 0..att.heads / g {
            let mut acc: Option<DiffTensor> = None;
            for h in group * g..(group + 1) * g {
                let start = att.offset(sample, h, 0, 0);
                let head = layer.gather(&(start..start + n * n).collect::<Vec<_>>())?;
                acc = Some(match acc {
                    None => head,
                    Some(a) => a.add(&head)?,
                });
            }
            tiles.push(acc.expect("head group is non-empty").scale(1.0 / g as f64).reshape(&[n, n])?);
        }
    }
    Ok(tiles)
}

/// `m` flat positions of an `n × n` tile, i.i.d. uniform over the leading `s × s` block.
pub fn sample_indices(n: usize, s: usize, m: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if s < 2 {
        return Err(Error::invalid(format!("valid length {s} < 2 leaves a degenerate attention grid")));
    }
    if s > n {
        return Err(Error::invalid(format!("valid length {s} exceeds sequence length {n}")));
    }
    if m < 2 {
        return Err(Error::invalid(format!("need at least 2 samples per tile, got {m}")));
    }
    Ok((0..m)
        .map(|_| {
            let u = rng.below(s * s);
            (u / s) * n + u % s
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct TilePairSample {
    pub tile: usize,
    pub indices: Vec<usize>,
    pub view1: DiffTensor,
    pub view2: DiffTensor,
}

/// Draw one index set and apply it to both views' tile.
pub fn sample_attention_pairs(
    tile: usize,
    tile_v1: &DiffTensor,
    tile_v2: &DiffTensor,
    s: usize,
    m: usize,
    rng: &mut RngStream,
) -> Result<TilePairSample> {
    let shape = tile_v1.shape();
    if shape.len() != 2 || shape[0] != shape[1] || tile_v2.shape() != shape {
        return Err(Error::shape("sample_attention_pairs", format!("{shape:?} vs {:?}", tile_v2.shape())));
    }
    let indices = sample_indices(shape[0], s, m, rng)?;
    Ok(TilePairSample { tile, view1: tile_v1.gather(&indices)?, view2: tile_v2.gather(&indices)?, indices })
}

#[derive(Clone, Debug)]
pub struct TileMi {
    pub value: DiffTensor,
    pub rho: f64,
    /// Zero variance in either log vector; `value` is the constant 0.
    pub skipped: bool,
}

/// MI between two sampled attention vectors under the log-normal model.
pub fn ami_tile_mi(w1: &DiffTensor, w2: &DiffTensor, form: MiForm) -> Result<TileMi> {
    if w1.shape() != w2.shape() || w1.shape().len() != 1 || w1.numel() < 2 {
        return Err(Error::shape("ami_tile_mi", format!("{:?} vs {:?}", w1.shape(), w2.shape())));
    }
    let m = w1.numel();
    let center = |w: &DiffTensor| -> Result<DiffTensor> {
        let z = w.clamp_min(ATTENTION_FLOOR).log();
        z.sub(&z.mean())
    };
    let (c1, c2) = (center(w1)?, center(w2)?);
    let tiny = |c: &DiffTensor| c.value().iter().map(|v| v * v).sum::<f64>() <= 1e-18 * m as f64;
    if tiny(&c1) || tiny(&c2) {
        return Ok(TileMi { value: DiffTensor::scalar(0.0), rho: 0.0, skipped: true });
    }
    let rho = c1.reshape(&[1, m])?.cosine(&c2.reshape(&[1, m])?)?.reshape(&[])?;
    let one_minus = rho.mul(&rho)?.neg().add_scalar(1.0);
    let value = match form {
        MiForm::Log => one_minus.clamp_min(RHO_EPS).log().scale(-0.5),
        MiForm::Linear => one_minus.scale(-0.5),
    };
    Ok(TileMi { rho: rho.item(), value, skipped: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub sample: usize,
    pub tile: usize,
    pub mi: f64,
    pub rho: f64,
    pub skipped: bool,
}

pub struct AmiOutput {
    pub loss: DiffTensor,
    pub tiles: Vec<TileRecord>,
}

impl AmiOutput {
    pub fn mean_mi(&self) -> f64 {
        if self.tiles.is_empty() {
            return 0.0;
        }
        self.tiles.iter().map(|t| t.mi).sum::<f64>() / self.tiles.len() as f64
    }
}

/// Index sets `[sample][tile]` for a batch with the given valid lengths.
pub fn draw_index_sets(
    lengths: &[usize],
    n: usize,
    tiles: usize,
    m: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<Vec<usize>>>> {
    lengths
        .iter()
        .map(|&s| (0..tiles).map(|_| sample_indices(n, s, m, rng)).collect())
        .collect()
}

/// `−λ / (R·B) · Σ_i Σ_r MI_i^r` with the position sets drawn from `rng`.
pub fn ami_loss(
    w1: &AttentionTensor,
    w2: &AttentionTensor,
    spec: &SliceSpec,
    m: usize,
    lambda: f64,
    form: MiForm,
    rng: &mut RngStream,
) -> Result<AmiOutput> {
    let r = spec.tiles(w1.num_layers(), w1.heads)?;
    let sets = draw_index_sets(&w1.lengths, w1.seq_len, r, m, rng)?;
    ami_loss_with_indices(w1, w2, spec, &sets, lambda, form)
}

/// [`ami_loss`] with explicit position sets `[sample][tile]`.
pub fn ami_loss_with_indices(
    w1: &AttentionTensor,
    w2: &AttentionTensor,
    spec: &SliceSpec,
    index_sets: &[Vec<Vec<usize>>],
    lambda: f64,
    form: MiForm,
) -> Result<AmiOutput> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be >= 0")));
    }
    if w1.lengths != w2.lengths || w1.heads != w2.heads || w1.num_layers() != w2.num_layers() || w1.seq_len != w2.seq_len
    {
        return Err(Error::shape("ami_loss", "attention tensors of the two views differ in layout"));
    }
    let r = spec.tiles(w1.num_layers(), w1.heads)?;
    let b = w1.batch();
    if index_sets.len() != b || index_sets.iter().any(|s| s.len() != r) {
        return Err(Error::shape("ami_loss", format!("index sets must be {b} samples × {r} tiles")));
    }
    // With λ = 0 nothing flows back; work on detached copies to skip the graph.
    let (w1, w2) = if lambda == 0.0 { (detach_all(w1), detach_all(w2)) } else { (w1.clone(), w2.clone()) };

    let mut records = Vec::with_capacity(b * r);
    let mut total: Option<DiffTensor> = None;
    for (i, sets) in index_sets.iter().enumerate() {
        let t1 = slice_attention(&w1, i, spec)?;
        let t2 = slice_attention(&w2, i, spec)?;
        for (tile, idx) in sets.iter().enumerate() {
            let mi = ami_tile_mi(&t1[tile].gather(idx)?, &t2[tile].gather(idx)?, form)?;
            records.push(TileRecord { sample: i, tile, mi: mi.value.item(), rho: mi.rho, skipped: mi.skipped });
            total = Some(match total {
                None => mi.value,
                Some(t) => t.add(&mi.value)?,
            });
        }
    }
    let loss = if lambda == 0.0 {
        DiffTensor::scalar(0.0)
    } else {
        total.expect("batch and tile count are positive").scale(-lambda / (r * b) as f64)
    };
    Ok(AmiOutput { loss, tiles: records })
}

fn detach_all(att: &AttentionTensor) -> AttentionTensor {
    AttentionTensor { layers: att.layers.iter().map(DiffTensor::detach).collect(), ..att.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub slice: SliceSpec,
    pub samples_per_tile: usize,
    pub variant: InfoNceVariant,
    pub mi_form: MiForm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub infonce: f64,
    pub ami: f64,
    pub tiles: Vec<TileRecord>,
}

impl LossReport {
    pub fn mean_mi(&self) -> f64 {
        if self.tiles.is_empty() {
            return 0.0;
        }
        self.tiles.iter().map(|t| t.mi).sum::<f64>() / self.tiles.len() as f64
    }

    pub fn skipped_tiles(&self) -> usize {
        self.tiles.iter().filter(|t| t.skipped).count()
    }

    /// `sample_idx TAB tile_idx TAB mi`, one row per (sample, tile).
    pub fn mi_tsv(&self) -> String {
        let mut s = String::from("sample_idx\ttile_idx\tmi\n");
        for t in &self.tiles {
            let _ = writeln!(s, "{}\t{}\t{}", t.sample, t.tile, t.mi);
        }
        s
    }
}

/// Randomness consumed by one joint-loss evaluation.
#[derive(Clone, Debug)]
pub struct StepStreams {
    pub view1: RngStream,
    pub view2: RngStream,
    pub momentum: RngStream,
    pub sampling: RngStream,
}

pub struct JointOutput {
    pub total: DiffTensor,
    pub report: LossReport,
    /// Momentum-encoder embeddings of this batch, for enqueueing after the update.
    pub momentum_embeddings: Option<DiffTensor>,
}

/// `L_C(E1, E2) + L_D(W1, W2)` for one batch, two online views with independent dropout.
pub fn joint_loss(
    batch: &TokenBatch,
    online: &Encoder,
    momentum: Option<&MomentumEncoder>,
    queue: Option<&NegativeQueue>,
    cfg: &LossConfig,
    streams: StepStreams,
) -> Result<JointOutput> {
    let StepStreams { view1, view2, momentum: mom_stream, mut sampling } = streams;
    let v1 = online.encode(batch, Mode::Train(view1))?;
    let v2 = online.encode(batch, Mode::Train(view2))?;
    let queued = queue.and_then(NegativeQueue::as_tensor);
    let lc = infonce(&v1.embeddings, &v2.embeddings, queued.as_ref(), cfg.tau, cfg.variant)?;
    let ami = ami_loss(
        &v1.attention,
        &v2.attention,
        &cfg.slice,
        cfg.samples_per_tile,
        cfg.lambda,
        cfg.mi_form,
        &mut sampling,
    )?;
    let total = lc.add(&ami.loss)?;
    let momentum_embeddings = match momentum {
        Some(m) => Some(m.encode(batch, Mode::Train(mom_stream))?.embeddings),
        None => None,
    };
    let report = LossReport { total: total.item(), infonce: lc.item(), ami: ami.loss.item(), tiles: ami.tiles };
    Ok(JointOutput { total, report, momentum_embeddings })
}
