//! Attentive statistics pooling, the embedding decoder and the cosine head.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm1d, Builder, Context, Conv1d, Linear, ParamId, Tape, Var};

pub const ATTENTION_DIM: usize = 128;
pub const EMBEDDING_DIM: usize = 192;
pub const POOL_EPS: f64 = 1e-9;

/// Channel-dependent attention: every channel gets its own softmax weighting
/// over time, computed from a shared tanh bottleneck.
#[derive(Debug, Clone)]
pub struct AttentivePooling {
    pub hidden: Conv1d,
    pub score: Conv1d,
    pub channels: usize,
}

impl AttentivePooling {
    pub fn new(b: &mut Builder<'_>, channels: usize, attention_dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Conv1d::new(b, "pooling.hidden", channels, attention_dim, 1, true)?,
            score: Conv1d::new(b, "pooling.score", attention_dim, channels, 1, true)?,
            channels,
        })
    }

    /// Softmax-over-time attention weights `[B, C, T]`.
    pub fn weights(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let a = self.hidden.forward(tape, h)?;
        let a = tape.tanh(a);
        let e = self.score.forward(tape, a)?;
        Ok(tape.softmax(e))
    }

    /// `[B, C, T] -> [B, 2C]`: weighted means then weighted standard deviations.
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let alpha = self.weights(tape, h)?;
        tape.attentive_stats(h, alpha, POOL_EPS)
    }
}

/// Linear projection to the embedding followed by batch norm.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub linear: Linear,
    pub bn: BatchNorm1d,
}

impl Decoder {
    pub fn new(b: &mut Builder<'_>, stat_dim: usize, embedding_dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(b, "decoder.linear", stat_dim, embedding_dim, true)?,
            bn: BatchNorm1d::new(b, "decoder.bn", embedding_dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, stats: Var, ctx: &mut Context<'_>) -> Result<Var> {
        let y = self.linear.forward(tape, stats)?;
        self.bn.forward(tape, y, ctx)
    }
}

/// Bias-free head whose logits are cosines between the embedding and each
/// class weight row.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub n_classes: usize,
}

impl ClassifierHead {
    pub fn new(b: &mut Builder<'_>, embedding_dim: usize, n_classes: usize) -> Result<Self> {
        let inner = Linear::new(b, "head", embedding_dim, n_classes, false)?;
        Ok(Self {
            weight: inner.weight,
            n_classes,
        })
    }

    /// `[B, D] -> [B, N]` cosines in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape<'_>, embedding: Var) -> Result<Var> {
        let e = tape.l2_normalize(embedding);
        let w = tape.param(self.weight);
        let w = tape.l2_normalize(w);
        tape.matmul_nt(e, w)
    }
}

/// A unit-length speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    vector: Vec<f64>,
}

impl SpeakerEmbedding {
    /// Normalizes `values` to unit length.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Degenerate(format!("cannot normalize an embedding of norm {norm}")));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { vector: values })
    }

    /// Wraps values that are already unit length (e.g. read from a store).
    pub fn from_normalized(vector: Vec<f64>) -> Self {
        Self { vector }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vector
    }
}
