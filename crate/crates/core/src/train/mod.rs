//! Margin-based speaker classification training at desk scale.

mod loss;
mod optim;
mod synth;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{chunk_training_utterance, normalize_per_frequency, AudioSignal, MelFrontend, MelSpectrogram};
use crate::layers::{BatchNormStats, Context, Tape};
use crate::model::{batch_features, TitaNet};

pub use loss::{aam_loss, AAMConfig, ACOS_CLAMP};
pub use optim::{cosine_annealing_lr, Sgd};
pub use synth::{render_utterance, speaker_label, synth_conversation, Conversation, SpeakerProfile, SyntheticCorpus, Utterance};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of each speaker's files held out for validation.
    pub val_fraction: f64,
    /// Upper bound on the random crop length of a training batch, in frames.
    pub max_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            initial_lr: 0.08,
            min_lr: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            val_fraction: 0.1,
            max_frames: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.min_lr >= 0.0 && self.initial_lr >= self.min_lr) {
            return fail(format!(
                "learning rates must satisfy initial ({}) >= min ({}) >= 0",
                self.initial_lr, self.min_lr
            ));
        }
        if self.batch_size < 2 {
            return fail("batch size must be at least 2 for batch statistics".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("validation fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.max_frames == 0 {
            return fail("max_frames must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        cosine_annealing_lr(step, total_steps, self.initial_lr, self.min_lr)
    }
}

/// One normalized feature matrix with its class index.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub label: usize,
    pub features: MelSpectrogram,
}

/// Normalized log-mel features of one utterance.
pub fn utterance_features(frontend: &MelFrontend, signal: &AudioSignal) -> Result<MelSpectrogram> {
    Ok(normalize_per_frequency(&frontend.compute(signal)?))
}

/// Holds out `round(fraction · n)` files of every speaker (at least one when
/// the speaker has two or more). Returns `(train, validation)` indices.
pub fn split_validation(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let mut held = (fraction * members.len() as f64).round() as usize;
        if fraction > 0.0 && held == 0 && members.len() >= 2 {
            held = 1;
        }
        val.extend_from_slice(&members[..held]);
        train.extend_from_slice(&members[held..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Training examples: long utterances are split into random-length chunks.
pub fn chunked_examples(examples: &[Example], seed: u64) -> Vec<Example> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let chunks = chunk_training_utterance(&ex.features, seed.wrapping_add(i as u64));
        let single = chunks.len() == 1;
        for (c, features) in chunks.into_iter().enumerate() {
            out.push(Example {
                id: if single { ex.id.clone() } else { format!("{}#{c}", ex.id) },
                label: ex.label,
                features,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose weights the model holds after training.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
        for m in &self.epochs {
            let val = m.val_acc.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{:.8},{:.8},{:.6},{val}", m.epoch, m.lr, m.train_loss, m.train_acc);
        }
        s
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Eval-mode classification accuracy. Examples are scored in groups of
/// `batch_size`, each cropped from the start to the group's shortest length.
pub fn classification_accuracy(model: &TitaNet, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for group in examples.chunks(batch_size.max(1)) {
        let len = group.iter().map(|e| e.features.num_frames()).min().unwrap_or(1);
        let crops: Vec<MelSpectrogram> = group.iter().map(|e| e.features.slice_frames(0, len)).collect();
        let refs: Vec<&MelSpectrogram> = crops.iter().collect();
        let x = batch_features(&refs, model.config.encoder.n_mels)?;
        let mut tape = Tape::new(&model.params);
        let x = tape.input(x);
        let out = model.forward_eval(&mut tape, x)?;
        let logits = out.logits.ok_or_else(|| Error::Config("model has no classification head".into()))?;
        let n = model.config.n_classes;
        for (row, ex) in tape.value(logits).chunks(n).zip(group) {
            correct += usize::from(argmax(row) == ex.label);
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Trains with the margin loss, SGD and a cosine schedule. After the last
/// epoch the model holds the weights of the epoch with the best validation
/// accuracy (the last epoch when there is no validation set).
pub fn train(
    model: &mut TitaNet,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    aam: &AAMConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    aam.validate()?;
    let n_classes = model.config.n_classes;
    if n_classes == 0 {
        return Err(Error::Config("model has no classification head".into()));
    }
    if let Some(ex) = train_set.iter().chain(val_set).find(|e| e.label >= n_classes) {
        return Err(Error::Label {
            label: ex.label,
            classes: n_classes,
        });
    }
    if train_set.len() < 2 {
        return Err(Error::Config("need at least two training examples".into()));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd20f_0a7e);
    let mut sgd = Sgd::new(cfg.momentum)?;
    model.params.zero_grad();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Vec<f64>>, Vec<BatchNormStats>)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let epoch_lr = cfg.lr_at(step, total_steps);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut data_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let len = batch
                .iter()
                .map(|&i| train_set[i].features.num_frames())
                .min()
                .unwrap_or(1)
                .min(cfg.max_frames);
            let crops: Vec<MelSpectrogram> = batch
                .iter()
                .map(|&i| {
                    let f = &train_set[i].features;
                    let start = data_rng.random_range(0..=f.num_frames() - len);
                    f.slice_frames(start, len)
                })
                .collect();
            let refs: Vec<&MelSpectrogram> = crops.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set[i].label).collect();
            let x = batch_features(&refs, model.config.encoder.n_mels)?;

            let lr = cfg.lr_at(step, total_steps);
            let grads = {
                let mut tape = Tape::new(&model.params);
                let x = tape.input(x);
                let mut ctx = Context::Train {
                    stats: &mut model.stats,
                    rng: &mut dropout_rng,
                };
                let out = model.net.forward(&mut tape, x, &mut ctx)?;
                let logits = out.logits.expect("head checked above");
                let loss = aam_loss(&mut tape, logits, &labels, aam)?;
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: value });
                }
                loss_sum += value * batch.len() as f64;
                for (row, &y) in tape.value(logits).chunks(n_classes).zip(&labels) {
                    correct += usize::from(argmax(row) == y);
                }
                seen += batch.len();
                tape.backward(loss)?
            };
            model.params.accumulate(&grads);
            sgd.step(&mut model.params, lr);
            step += 1;
        }
        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(classification_accuracy(model, val_set, cfg.batch_size)?)
        };
        let metrics = EpochMetrics {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
        };
        on_epoch(&metrics);
        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        if val_acc.is_some() && best.as_ref().is_none_or(|b| score >= b.0) {
            let values = model.params.iter().map(|(_, p)| p.tensor.values().to_vec()).collect();
            best = Some((score, epoch, values, model.stats.clone()));
        }
        history.push(metrics);
    }
    let best_epoch = match best {
        Some((_, epoch, values, stats)) => {
            for (p, v) in model.params.iter_mut().zip(values) {
                p.tensor.values_mut().copy_from_slice(&v);
            }
            model.stats = stats;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainReport {
        epochs: history,
        best_epoch,
    })
}
