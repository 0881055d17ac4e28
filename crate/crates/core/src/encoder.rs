//! The convolutional encoder: a prologue, `B` mega blocks of `R` separable
//! sub-blocks with squeeze-and-excitation residuals, and an epilogue.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{
    dropout, BatchNorm1d, Builder, Context, Conv1d, DepthwiseConv1d, SqueezeExcite, Tape, Var,
};

pub const PRESETS: [&str; 4] = ["titanet_s", "titanet_m", "titanet_l", "toy"];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub mega_blocks: usize,
    pub repeats: usize,
    pub channels: usize,
    pub mega_kernels: Vec<usize>,
    pub prologue_kernel: usize,
    pub epilogue_kernel: usize,
    pub epilogue_channels: usize,
    pub dropout: f64,
    pub se_reduction: usize,
}

impl EncoderConfig {
    fn family(channels: usize) -> Self {
        Self {
            n_mels: 80,
            mega_blocks: 3,
            repeats: 3,
            channels,
            mega_kernels: vec![7, 11, 15],
            prologue_kernel: 3,
            epilogue_kernel: 1,
            epilogue_channels: 1536,
            dropout: 0.1,
            se_reduction: 8,
        }
    }

    pub fn titanet_s() -> Self {
        Self::family(256)
    }

    pub fn titanet_m() -> Self {
        Self::family(512)
    }

    pub fn titanet_l() -> Self {
        Self::family(1024)
    }

    /// Smallest runnable configuration, for tests and smoke runs.
    pub fn toy() -> Self {
        Self {
            mega_blocks: 1,
            repeats: 1,
            channels: 8,
            mega_kernels: vec![3],
            epilogue_channels: 16,
            ..Self::family(8)
        }
    }

    /// Mid-sized encoder for desk-scale training runs: three mega blocks of
    /// two sub-blocks at 64 channels, with a 256-channel epilogue so a
    /// thirty-epoch run stays within minutes on one CPU core.
    pub fn toy_training() -> Self {
        Self {
            repeats: 2,
            epilogue_channels: 256,
            ..Self::family(64)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "titanet_s" => Ok(Self::titanet_s()),
            "titanet_m" => Ok(Self::titanet_m()),
            "titanet_l" => Ok(Self::titanet_l()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Changes the number of mega blocks, extending the kernel list by
    /// continuing its arithmetic progression (or truncating it).
    pub fn with_blocks(mut self, blocks: usize) -> Self {
        while self.mega_kernels.len() < blocks {
            let next = match self.mega_kernels.as_slice() {
                [.., a, b] => 2 * b - a,
                [a] => a + 4,
                [] => 3,
            };
            self.mega_kernels.push(next);
        }
        self.mega_kernels.truncate(blocks);
        self.mega_blocks = blocks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_mels == 0 || self.channels == 0 || self.epilogue_channels == 0 {
            return fail("feature, channel and epilogue widths must be positive".into());
        }
        if self.repeats == 0 {
            return fail("each mega block needs at least one repeat".into());
        }
        if self.mega_kernels.len() != self.mega_blocks {
            return fail(format!(
                "{} mega kernels given for {} mega blocks",
                self.mega_kernels.len(),
                self.mega_blocks
            ));
        }
        if self.prologue_kernel != 3 || self.epilogue_kernel != 1 {
            return fail("prologue kernel is fixed at 3 and epilogue kernel at 1".into());
        }
        if let Some(k) = self.mega_kernels.iter().find(|k| *k % 2 == 0) {
            return fail(format!("mega kernel {k} is even; kernels must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.se_reduction == 0 || !self.channels.is_multiple_of(self.se_reduction) {
            return fail(format!(
                "SE reduction {} must divide the channel count {}",
                self.se_reduction, self.channels
            ));
        }
        Ok(())
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} kernels {:?} epilogue {}",
            self.mega_blocks, self.repeats, self.channels, self.mega_kernels, self.epilogue_channels
        )
    }
}

/// Convolution followed by batch norm and ReLU, no residual and no dropout.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
}

impl ConvBnRelu {
    fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(b, &format!("{name}.conv"), cin, cout, k, false)?,
            bn: BatchNorm1d::new(b, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, ctx: &mut Context<'_>) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, ctx)?;
        Ok(tape.relu(y))
    }
}

/// Depthwise (k) → pointwise → batch norm → ReLU → dropout.
#[derive(Debug, Clone)]
pub struct SeparableSubBlock {
    pub depthwise: DepthwiseConv1d,
    pub pointwise: Conv1d,
    pub bn: BatchNorm1d,
}

#[derive(Debug, Clone)]
pub struct MegaBlock {
    pub subs: Vec<SeparableSubBlock>,
    pub se: SqueezeExcite,
    pub dropout: f64,
}

impl MegaBlock {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &EncoderConfig, kernel: usize) -> Result<Self> {
        let c = cfg.channels;
        let mut subs = Vec::with_capacity(cfg.repeats);
        for r in 0..cfg.repeats {
            let p = format!("{name}.sub{r}");
            subs.push(SeparableSubBlock {
                depthwise: DepthwiseConv1d::new(b, &format!("{p}.dw"), c, kernel)?,
                pointwise: Conv1d::new(b, &format!("{p}.pw"), c, c, 1, true)?,
                bn: BatchNorm1d::new(b, &format!("{p}.bn"), c)?,
            });
        }
        Ok(Self {
            subs,
            se: SqueezeExcite::new(b, &format!("{name}.se"), c, cfg.se_reduction)?,
            dropout: cfg.dropout,
        })
    }

    /// `relu(x + SE(subs(x)))`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, ctx: &mut Context<'_>) -> Result<Var> {
        let mut y = x;
        for sub in &self.subs {
            y = sub.depthwise.forward(tape, y)?;
            y = sub.pointwise.forward(tape, y)?;
            y = sub.bn.forward(tape, y, ctx)?;
            y = tape.relu(y);
            y = dropout(tape, y, self.dropout, ctx)?;
        }
        let y = self.se.forward(tape, y)?;
        let sum = tape.add(x, y)?;
        Ok(tape.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prologue: ConvBnRelu,
    pub blocks: Vec<MegaBlock>,
    pub epilogue: ConvBnRelu,
}

impl Encoder {
    pub fn new(b: &mut Builder<'_>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let prologue = ConvBnRelu::new(b, "encoder.prologue", config.n_mels, config.channels, config.prologue_kernel)?;
        let blocks = config
            .mega_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| MegaBlock::new(b, &format!("encoder.block{}", i + 1), config, k))
            .collect::<Result<Vec<_>>>()?;
        let epilogue = ConvBnRelu::new(
            b,
            "encoder.epilogue",
            config.channels,
            config.epilogue_channels,
            config.epilogue_kernel,
        )?;
        Ok(Self {
            config: config.clone(),
            prologue,
            blocks,
            epilogue,
        })
    }

    /// `[B, n_mels, T] -> [B, epilogue_channels, T]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, ctx: &mut Context<'_>) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.config.n_mels {
            return Err(Error::Shape(format!(
                "encoder expects [batch, {}, time] features, got {shape:?}",
                self.config.n_mels
            )));
        }
        let mut y = self.prologue.forward(tape, x, ctx)?;
        for block in &self.blocks {
            y = block.forward(tape, y, ctx)?;
        }
        self.epilogue.forward(tape, y, ctx)
    }
}

/// Trainable scalar counts for one configuration, grouped by component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBreakdown {
    pub entries: Vec<(String, usize)>,
    /// Class-logits weights; depends on the training-set class count.
    pub head: usize,
    pub n_classes: usize,
}

impl ParameterBreakdown {
    /// Encoder, pooling and decoder, without the logits head.
    pub fn backbone(&self) -> usize {
        self.entries.iter().map(|(_, n)| n).sum()
    }

    pub fn total(&self) -> usize {
        self.backbone() + self.head
    }
}

impl fmt::Display for ParameterBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.entries {
            writeln!(f, "  {name:<28} {n:>12}")?;
        }
        writeln!(f, "  {:<28} {:>12}", "backbone total", self.backbone())?;
        writeln!(f, "  {:<28} {:>12}", format!("logits head ({} classes)", self.n_classes), self.head)?;
        write!(f, "  {:<28} {:>12}", "total", self.total())
    }
}

/// Closed-form parameter count of a model built from these dimensions.
pub fn parameter_breakdown(
    cfg: &EncoderConfig,
    attention_dim: usize,
    embedding_dim: usize,
    n_classes: usize,
) -> ParameterBreakdown {
    let (c, e) = (cfg.channels, cfg.epilogue_channels);
    let bn = |ch: usize| 2 * ch;
    let mut entries = vec![(
        "encoder.prologue".to_string(),
        cfg.n_mels * c * cfg.prologue_kernel + bn(c),
    )];
    for (i, &k) in cfg.mega_kernels.iter().enumerate() {
        let sub = c * k + c * c + c + bn(c);
        let hidden = c / cfg.se_reduction.max(1);
        let se = c * hidden + hidden + hidden * c + c;
        entries.push((format!("encoder.block{}", i + 1), cfg.repeats * sub + se));
    }
    entries.push(("encoder.epilogue".into(), c * e * cfg.epilogue_kernel + bn(e)));
    entries.push((
        "pooling".into(),
        e * attention_dim + attention_dim + attention_dim * e + e,
    ));
    entries.push((
        "decoder".into(),
        2 * e * embedding_dim + embedding_dim + bn(embedding_dim),
    ));
    ParameterBreakdown {
        entries,
        head: n_classes * embedding_dim,
        n_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_the_family_layout() {
        let l = EncoderConfig::titanet_l();
        assert_eq!((l.mega_blocks, l.repeats, l.channels), (3, 3, 1024));
        assert_eq!(l.mega_kernels, vec![7, 11, 15]);
        assert_eq!(EncoderConfig::titanet_s().channels, 256);
        assert_eq!(EncoderConfig::titanet_m().channels, 512);
        for name in PRESETS {
            EncoderConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(EncoderConfig::preset("titanet_xl").is_err());
    }

    #[test]
    fn block_override_extends_kernels() {
        assert_eq!(EncoderConfig::titanet_s().with_blocks(5).mega_kernels, vec![7, 11, 15, 19, 23]);
        assert_eq!(EncoderConfig::toy().with_blocks(3).mega_kernels, vec![3, 7, 11]);
        assert_eq!(EncoderConfig::titanet_s().with_blocks(2).mega_kernels, vec![7, 11]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = EncoderConfig::toy();
        c.mega_kernels = vec![4];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EncoderConfig::toy();
        c.se_reduction = 3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.mega_blocks = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toy_count_by_hand() {
        // prologue 80·8·3 + 16; block: dw 8·3, pw 64+8, bn 16, se 8+1+8+8;
        // epilogue 8·16 + 32; pooling 16·128+128+128·16+16; decoder 32·192+192+384.
        let b = parameter_breakdown(&EncoderConfig::toy(), 128, 192, 0);
        let hand = (1920 + 16) + (24 + 72 + 16 + 25) + (128 + 32) + (2048 + 128 + 2048 + 16) + (6144 + 192 + 384);
        assert_eq!(b.backbone(), hand);
        assert_eq!(b.head, 0);
    }
}
