//! Versioned binary model container.
//!
//! Layout (little endian): magic `TNETCKPT`, `u32` version, a length-prefixed
//! UTF-8 `key=value` block (architecture, training settings, metrics,
//! speaker names), the named parameter tensors, then the batch-norm running
//! statistics. Every string is `u32` length-prefixed.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::layers::BatchNormStats;
use crate::model::{ModelConfig, TitaNet};
use crate::train::{AAMConfig, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub stats: Vec<BatchNormStats>,
    pub aam: Option<AAMConfig>,
    pub train: Option<TrainConfig>,
    pub metrics: Vec<(String, f64)>,
    /// Class index → speaker name.
    pub speakers: Vec<String>,
}

impl Checkpoint {
    pub fn from_model(model: &TitaNet) -> Self {
        Self {
            model: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.values().to_vec()))
                .collect(),
            stats: model.stats.clone(),
            aam: None,
            train: None,
            metrics: Vec::new(),
            speakers: Vec::new(),
        }
    }

    /// Copies weights and statistics into a model with the same layout.
    pub fn apply_to(&self, model: &mut TitaNet) -> Result<()> {
        if model.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} parameter tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, shape, _) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Shape(format!("model has no parameter {name:?}")))?;
            let have = model.params.get(id).tensor.shape();
            if have != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name:?}: checkpoint shape {shape:?}, model shape {have:?}"
                )));
            }
        }
        if model.stats.len() != self.stats.len()
            || model
                .stats
                .iter()
                .zip(&self.stats)
                .any(|(a, b)| a.name != b.name || a.mean.len() != b.mean.len())
        {
            return Err(Error::Shape("batch-norm statistics do not match the model layout".into()));
        }
        for (name, _, values) in &self.params {
            let id = model.params.id(name).expect("checked above");
            model.params.get_mut(id).tensor.values_mut().copy_from_slice(values);
        }
        model.stats = self.stats.clone();
        Ok(())
    }

    pub fn to_model(&self) -> Result<TitaNet> {
        let mut model = TitaNet::new(self.model.clone(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    fn header_text(&self) -> String {
        let e = &self.model.encoder;
        let kernels: Vec<String> = e.mega_kernels.iter().map(usize::to_string).collect();
        let mut kv: Vec<(String, String)> = vec![
            ("n_mels".into(), e.n_mels.to_string()),
            ("mega_blocks".into(), e.mega_blocks.to_string()),
            ("repeats".into(), e.repeats.to_string()),
            ("channels".into(), e.channels.to_string()),
            ("mega_kernels".into(), kernels.join(",")),
            ("prologue_kernel".into(), e.prologue_kernel.to_string()),
            ("epilogue_kernel".into(), e.epilogue_kernel.to_string()),
            ("epilogue_channels".into(), e.epilogue_channels.to_string()),
            ("dropout".into(), e.dropout.to_string()),
            ("se_reduction".into(), e.se_reduction.to_string()),
            ("attention_dim".into(), self.model.attention_dim.to_string()),
            ("embedding_dim".into(), self.model.embedding_dim.to_string()),
            ("n_classes".into(), self.model.n_classes.to_string()),
        ];
        if let Some(a) = &self.aam {
            kv.push(("aam.margin".into(), a.margin.to_string()));
            kv.push(("aam.scale".into(), a.scale.to_string()));
        }
        if let Some(t) = &self.train {
            kv.push(("train.epochs".into(), t.epochs.to_string()));
            kv.push(("train.initial_lr".into(), t.initial_lr.to_string()));
            kv.push(("train.min_lr".into(), t.min_lr.to_string()));
            kv.push(("train.momentum".into(), t.momentum.to_string()));
            kv.push(("train.batch_size".into(), t.batch_size.to_string()));
            kv.push(("train.seed".into(), t.seed.to_string()));
            kv.push(("train.val_fraction".into(), t.val_fraction.to_string()));
            kv.push(("train.max_frames".into(), t.max_frames.to_string()));
        }
        for (k, v) in &self.metrics {
            kv.push((format!("metric.{k}"), v.to_string()));
        }
        if !self.speakers.is_empty() {
            kv.push(("speakers".into(), self.speakers.join(",")));
        }
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if let Some(bad) = ckpt.speakers.iter().find(|s| s.contains([',', '\n']) || s.is_empty()) {
        return Err(Error::Config(format!("speaker name {bad:?} cannot be stored")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &ckpt.header_text());
    put_u32(&mut out, ckpt.params.len() as u32);
    for (name, shape, values) in &ckpt.params {
        put_str(&mut out, name);
        put_u32(&mut out, shape.len() as u32);
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        put_f64s(&mut out, values);
    }
    put_u32(&mut out, ckpt.stats.len() as u32);
    for s in &ckpt.stats {
        put_str(&mut out, &s.name);
        put_u32(&mut out, s.mean.len() as u32);
        put_f64s(&mut out, &s.mean);
        put_f64s(&mut out, &s.var);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn header_map(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Checkpoint(format!("header line {l:?} is not key=value")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("header is missing {key}")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("header field {key}={raw:?} is invalid")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing TNETCKPT magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let map = header_map(&r.string("header")?)?;
    let kernels: String = field(&map, "mega_kernels")?;
    let mega_kernels = if kernels.is_empty() {
        Vec::new()
    } else {
        kernels
            .split(',')
            .map(|k| k.parse().map_err(|_| Error::Checkpoint(format!("bad kernel {k:?}"))))
            .collect::<Result<Vec<usize>>>()?
    };
    let encoder = EncoderConfig {
        n_mels: field(&map, "n_mels")?,
        mega_blocks: field(&map, "mega_blocks")?,
        repeats: field(&map, "repeats")?,
        channels: field(&map, "channels")?,
        mega_kernels,
        prologue_kernel: field(&map, "prologue_kernel")?,
        epilogue_kernel: field(&map, "epilogue_kernel")?,
        epilogue_channels: field(&map, "epilogue_channels")?,
        dropout: field(&map, "dropout")?,
        se_reduction: field(&map, "se_reduction")?,
    };
    let model = ModelConfig {
        encoder,
        attention_dim: field(&map, "attention_dim")?,
        embedding_dim: field(&map, "embedding_dim")?,
        n_classes: field(&map, "n_classes")?,
    };
    let aam = if map.contains_key("aam.margin") {
        Some(AAMConfig {
            margin: field(&map, "aam.margin")?,
            scale: field(&map, "aam.scale")?,
        })
    } else {
        None
    };
    let train = if map.contains_key("train.epochs") {
        Some(TrainConfig {
            epochs: field(&map, "train.epochs")?,
            initial_lr: field(&map, "train.initial_lr")?,
            min_lr: field(&map, "train.min_lr")?,
            momentum: field(&map, "train.momentum")?,
            batch_size: field(&map, "train.batch_size")?,
            seed: field(&map, "train.seed")?,
            val_fraction: field(&map, "train.val_fraction")?,
            max_frames: field(&map, "train.max_frames")?,
        })
    } else {
        None
    };
    let metrics = map.keys().filter_map(|k| k.strip_prefix("metric.").map(|name| (k, name)))
        .map(|(k, name)| Ok((name.to_string(), field(&map, k)?)))
        .collect::<Result<Vec<_>>>()?;
    let speakers = map
        .get("speakers")
        .map(|s| s.split(',').map(str::to_string).collect())
        .unwrap_or_default();

    let n_params = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(n_params.min(4096));
    for _ in 0..n_params {
        let name = r.string("parameter name")?;
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape of {name} overflows")))?;
        let values = r.f64s(len, &name)?;
        params.push((name, shape, values));
    }
    let n_stats = r.u32("statistics count")? as usize;
    let mut stats = Vec::with_capacity(n_stats.min(4096));
    for _ in 0..n_stats {
        let name = r.string("statistics name")?;
        let c = r.u32("channels")? as usize;
        let mean = r.f64s(c, &name)?;
        let var = r.f64s(c, &name)?;
        stats.push(BatchNormStats { name, mean, var });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the statistics block",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        params,
        stats,
        aam,
        train,
        metrics,
        speakers,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    super::write_bytes(path, &encode_checkpoint(ckpt)?)
}

/// Reads and validates a checkpoint, returning it with the restored model.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, TitaNet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_checkpoint(&bytes)?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}
