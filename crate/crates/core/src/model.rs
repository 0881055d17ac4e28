//! The full speaker model: encoder, attentive pooling, decoder and an
//! optional cosine classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{parameter_breakdown, Encoder, EncoderConfig, ParameterBreakdown};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::layers::{BatchNormStats, Builder, Context, ParamStore, Tape, Tensor, Var};
use crate::pooldec::{AttentivePooling, ClassifierHead, Decoder, SpeakerEmbedding, ATTENTION_DIM, EMBEDDING_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    /// Number of training speakers; 0 builds an inference-only model.
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, n_classes: usize) -> Self {
        Self {
            encoder,
            attention_dim: ATTENTION_DIM,
            embedding_dim: EMBEDDING_DIM,
            n_classes,
        }
    }

    pub fn stat_dim(&self) -> usize {
        2 * self.encoder.epilogue_channels
    }

    pub fn breakdown(&self) -> ParameterBreakdown {
        parameter_breakdown(&self.encoder, self.attention_dim, self.embedding_dim, self.n_classes)
    }
}

/// Layer graph; parameter values live in [`TitaNet::params`].
#[derive(Debug, Clone)]
pub struct Network {
    pub encoder: Encoder,
    pub pooling: AttentivePooling,
    pub decoder: Decoder,
    pub head: Option<ClassifierHead>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub encoded: Var,
    pub pooled: Var,
    /// Decoder output before unit normalization.
    pub embedding: Var,
    pub logits: Option<Var>,
}

impl Network {
    /// `x: [B, n_mels, T]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, ctx: &mut Context<'_>) -> Result<ForwardOutput> {
        let encoded = self.encoder.forward(tape, x, ctx)?;
        let pooled = self.pooling.forward(tape, encoded)?;
        let embedding = self.decoder.forward(tape, pooled, ctx)?;
        let logits = match &self.head {
            Some(head) => Some(head.forward(tape, embedding)?),
            None => None,
        };
        Ok(ForwardOutput {
            encoded,
            pooled,
            embedding,
            logits,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TitaNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stats: Vec<BatchNormStats>,
    pub net: Network,
}

impl TitaNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            rng: &mut rng,
        };
        let encoder = Encoder::new(&mut b, &config.encoder)?;
        let pooling = AttentivePooling::new(&mut b, config.encoder.epilogue_channels, config.attention_dim)?;
        let decoder = Decoder::new(&mut b, config.stat_dim(), config.embedding_dim)?;
        let head = if config.n_classes > 0 {
            Some(ClassifierHead::new(&mut b, config.embedding_dim, config.n_classes)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            stats,
            net: Network {
                encoder,
                pooling,
                decoder,
                head,
            },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn breakdown(&self) -> ParameterBreakdown {
        self.config.breakdown()
    }

    /// Eval-mode forward pass on `[B, n_mels, T]` features.
    pub fn forward_eval<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<ForwardOutput> {
        self.net.forward(tape, x, &mut Context::Eval { stats: &self.stats })
    }

    /// Unit-length embeddings for a batch of equal-length spectrograms.
    pub fn embed_batch(&self, mels: &[&MelSpectrogram]) -> Result<Vec<SpeakerEmbedding>> {
        let x = batch_features(mels, self.config.encoder.n_mels)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(x);
        let out = self.forward_eval(&mut tape, x)?;
        tape.value(out.embedding)
            .chunks(self.config.embedding_dim)
            .map(|row| SpeakerEmbedding::new(row.to_vec()))
            .collect()
    }

    /// Deterministic unit-length embedding of one (normalized) spectrogram.
    pub fn extract_embedding(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        Ok(self.embed_batch(&[mel])?.remove(0))
    }
}

/// Stacks spectrograms into the channel-major `[B, n_mels, T]` layout.
pub fn batch_features(mels: &[&MelSpectrogram], n_mels: usize) -> Result<Tensor> {
    let first = mels
        .first()
        .ok_or_else(|| Error::Shape("empty feature batch".into()))?;
    let t = first.num_frames();
    let mut values = Vec::with_capacity(mels.len() * n_mels * t);
    for mel in mels {
        if mel.n_mels() != n_mels {
            return Err(Error::Shape(format!(
                "model expects {n_mels} mel bins, got {}",
                mel.n_mels()
            )));
        }
        if mel.num_frames() != t {
            return Err(Error::Shape(format!(
                "batched spectrograms must share a length: {} vs {t} frames",
                mel.num_frames()
            )));
        }
        values.extend(mel.to_channels_first());
    }
    Tensor::new([mels.len(), n_mels, t], values)
}
