//! Parameterized building blocks. Each layer only stores [`ParamId`]s; the
//! values live in the model's [`ParamStore`].

use rand::{Rng, RngCore};

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::{BatchNormStats, Context};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Allocation context used while constructing layers.
pub struct Builder<'a> {
    pub params: &'a mut ParamStore,
    pub stats: &'a mut Vec<BatchNormStats>,
    pub rng: &'a mut dyn RngCore,
}

impl Builder<'_> {
    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let values = (0..len).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params.add(name, Tensor::new(shape, values)?)
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        self.params.add(name, Tensor::filled(shape, value))
    }
}

/// Full convolution `[B, C_in, T] -> [B, C_out, T]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        check_odd(kernel)?;
        let fan_in = in_channels * kernel;
        let weight = b.uniform(&format!("{name}.weight"), vec![out_channels, in_channels, kernel], fan_in)?;
        let bias = if bias {
            Some(b.uniform(&format!("{name}.bias"), vec![out_channels], fan_in)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let bias = self.bias.map(|id| tape.param(id));
        tape.conv1d(x, w, bias)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        check_odd(kernel)?;
        let weight = b.uniform(&format!("{name}.weight"), vec![channels, 1, kernel], kernel)?;
        Ok(Self {
            weight,
            channels,
            kernel,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        tape.conv1d_depthwise(x, w)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the model's running-statistics table.
    pub stats: usize,
    pub channels: usize,
}

impl BatchNorm1d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        let gamma = b.constant(&format!("{name}.weight"), vec![channels], 1.0)?;
        let beta = b.constant(&format!("{name}.bias"), vec![channels], 0.0)?;
        b.stats.push(BatchNormStats::new(name, channels));
        Ok(Self {
            gamma,
            beta,
            stats: b.stats.len() - 1,
            channels,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, ctx: &mut Context<'_>) -> Result<Var> {
        let gamma = tape.param(self.gamma);
        let beta = tape.param(self.beta);
        match ctx {
            Context::Train { stats, .. } => {
                let shape = tape.shape(x);
                let n: usize = shape[0] * shape.get(2).copied().unwrap_or(1);
                if n < 2 {
                    return Err(Error::Shape(format!(
                        "training-mode batchnorm needs at least 2 values per channel, got {n}"
                    )));
                }
                let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                let unbias = n as f64 / (n as f64 - 1.0);
                let s = &mut stats[self.stats];
                for c in 0..self.channels {
                    s.mean[c] = (1.0 - BN_MOMENTUM) * s.mean[c] + BN_MOMENTUM * mean[c];
                    s.var[c] = (1.0 - BN_MOMENTUM) * s.var[c] + BN_MOMENTUM * var[c] * unbias;
                }
                Ok(y)
            }
            Context::Eval { stats } => {
                let s = &stats[self.stats];
                tape.batchnorm_eval(x, gamma, beta, &s.mean, &s.var, BN_EPS)
            }
        }
    }
}

/// `[B, In] -> [B, Out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let weight = b.uniform(&format!("{name}.weight"), vec![out_features, in_features], in_features)?;
        let bias = if bias {
            Some(b.uniform(&format!("{name}.bias"), vec![out_features], in_features)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let bias = self.bias.map(|id| tape.param(id));
        tape.linear(x, w, bias)
    }
}

/// Squeeze-and-excitation over the whole utterance: the time-averaged
/// context drives a per-channel sigmoid gate that rescales every frame.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
}

impl SqueezeExcite {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "SE reduction ratio {reduction} must divide the channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            reduce: Linear::new(b, &format!("{name}.fc1"), channels, hidden, true)?,
            expand: Linear::new(b, &format!("{name}.fc2"), hidden, channels, true)?,
            channels,
        })
    }

    pub fn gate(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let context = tape.mean_time(x)?;
        let h = self.reduce.forward(tape, context)?;
        let h = tape.relu(h);
        let g = self.expand.forward(tape, h)?;
        Ok(tape.sigmoid(g))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let gate = self.gate(tape, x)?;
        tape.scale_channels(x, gate)
    }
}

fn check_odd(kernel: usize) -> Result<()> {
    if kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
    }
    Ok(())
}
