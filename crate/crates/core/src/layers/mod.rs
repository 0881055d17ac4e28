//! Differentiable kernels and the layer set the encoder is assembled from.

mod gemm;
pub mod nn;
mod tape;
mod tensor;


use rand::RngCore;


pub use nn::{BatchNorm1d, Builder, Conv1d, DepthwiseConv1d, Linear, SqueezeExcite, BN_EPS, BN_MOMENTUM};
pub use tape::{BackwardFn, Tape, Var};

pub use tensor::{Gradients, ParamId, ParamStore, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer. Starts at mean 0, var 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Per-forward state: training mutates running statistics and draws dropout
/// masks, evaluation only reads.
pub enum Context<'s> {
    Train {
        stats: &'s mut [BatchNormStats],
        rng: &'s mut dyn RngCore,
    },
    Eval {
        stats: &'s [BatchNormStats],
    },
}

impl Context<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            Context::Train { .. } => Mode::Train,
            Context::Eval { .. } => Mode::Eval,
        }
    }
}

/// Dropout that is the identity outside training.
pub fn dropout(tape: &mut Tape<'_>, x: Var, p: f64, ctx: &mut Context<'_>) -> crate::Result<Var> {
    match ctx {
        Context::Train { rng, .. } => tape.dropout(x, p, &mut **rng),
        Context::Eval { .. } => Ok(x),
    }
}
