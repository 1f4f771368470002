//! EMA replica of the online encoder and the FIFO queue of its embeddings.

use std::collections::VecDeque;

use crate::encoder::{Encoder, EncoderOutput, Mode, Param};
use crate::error::{Error, Result};
use crate::numerics::DiffTensor;
use crate::textio::TokenBatch;

/// Slow copy of the online encoder. Its parameters are constants: only
/// [`MomentumEncoder::ema_update`] writes them.
#[derive(Clone, Debug)]
pub struct MomentumEncoder {
    encoder: Encoder,
    momentum: f64,
}

impl MomentumEncoder {
    pub fn new(online: &Encoder, momentum: f64, dropout: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum factor {momentum} outside [0, 1]")));
        }
        Ok(Self { encoder: online.replicate(dropout, false)?, momentum })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encode(&self, batch: &TokenBatch, mode: Mode) -> Result<EncoderOutput> {
        self.encoder.encode(batch, mode)
    }

    pub fn update(&self, online: &Encoder) -> Result<()> {
        ema_update(&online.params(), &self.encoder.params(), self.momentum)
    }
}

pub fn is_pooler(name: &str) -> bool {
    name.starts_with("pooler.")
}

/// `p_mom ← m·p_mom + (1−m)·p_online` for every parameter except the pooler,
/// which is copied verbatim.
pub fn ema_update(online: &[Param], target: &[Param], m: f64) -> Result<()> {
    if online.len() != target.len() {
        return Err(Error::invalid(format!(
            "ema_update: {} online parameters vs {} momentum parameters",
            online.len(),
            target.len()
        )));
    }
    for (src, dst) in online.iter().zip(target) {
        if src.name != dst.name {
            return Err(Error::invalid(format!("ema_update: parameter {} paired with {}", src.name, dst.name)));
        }
        if src.tensor.shape() != dst.tensor.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("{}: {:?} vs {:?}", src.name, src.tensor.shape(), dst.tensor.shape()),
            ));
        }
        let s = src.tensor.value();
        let mut d = dst.tensor.value_mut();
        if is_pooler(&src.name) {
            d.copy_from_slice(&s);
        } else {
            for (p, &o) in d.iter_mut().zip(s.iter()) {
                *p = m * *p + (1.0 - m) * o;
            }
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO of detached embeddings; the oldest entry is evicted first.
#[derive(Clone, Debug)]
pub struct NegativeQueue {
    capacity: usize,
    width: usize,
    items: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, width: usize) -> Self {
        Self { capacity, width, items: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.width {
            return Err(Error::shape("enqueue", format!("width {} vs queue width {}", embedding.len(), self.width)));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(embedding.to_vec());
        Ok(())
    }

    /// Append every row of a `[B, U]` embedding matrix (values only; no graph link).
    pub fn enqueue(&mut self, embeddings: &DiffTensor) -> Result<()> {
        let s = embeddings.shape();
        if s.len() != 2 || s[1] != self.width {
            return Err(Error::shape("enqueue", format!("{s:?} vs queue width {}", self.width)));
        }
        let v = embeddings.value();
        for row in v.chunks(self.width) {
            self.push(row)?;
        }
        Ok(())
    }

    /// Current contents, oldest first.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.items.iter().cloned().collect()
    }

    /// Contents as a constant `[len, U]` tensor, or `None` when empty.
    pub fn as_tensor(&self) -> Option<DiffTensor> {
        if self.items.is_empty() {
            return None;
        }
        let flat: Vec<f64> = self.items.iter().flatten().copied().collect();
        Some(DiffTensor::constant(&[self.items.len(), self.width], flat).expect("queue rows have queue width"))
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}
