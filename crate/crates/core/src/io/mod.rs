//! On-disk formats: RTTM, manifests, trial and score lists, embedding
//! stores, flat config files and model checkpoints.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::diarize::Segment;
use crate::error::{Error, Result};
use crate::pooldec::{SpeakerEmbedding, EMBEDDING_DIM};
use crate::verify::Trial;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_f64(field: &str, what: &str, source: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(source, line, format!("{what} {field:?} is not a finite number")))
}

/// Meaningful lines with their 1-based numbers; blank lines and `#` comments
/// are skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RttmSegment {
    pub session: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

impl RttmSegment {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }

    pub fn to_segment(&self) -> Segment {
        Segment::new(self.onset, self.end(), self.speaker.clone())
    }
}

/// `SPEAKER` lines grouped by session; other record types are ignored.
pub fn parse_rttm_str(text: &str, source: &str) -> Result<BTreeMap<String, Vec<RttmSegment>>> {
    let mut out: BTreeMap<String, Vec<RttmSegment>> = BTreeMap::new();
    for (n, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(Error::parse(
                source,
                n,
                format!("SPEAKER line has {} fields, expected 10", fields.len()),
            ));
        }
        let onset = parse_f64(fields[3], "onset", source, n)?;
        let duration = parse_f64(fields[4], "duration", source, n)?;
        if onset < 0.0 {
            return Err(Error::parse(source, n, format!("negative onset {onset}")));
        }
        if duration <= 0.0 {
            return Err(Error::parse(source, n, format!("non-positive duration {duration}")));
        }
        out.entry(fields[1].to_string()).or_default().push(RttmSegment {
            session: fields[1].to_string(),
            onset,
            duration,
            speaker: fields[7].to_string(),
        });
    }
    Ok(out)
}

pub fn parse_rttm(path: &Path) -> Result<BTreeMap<String, Vec<RttmSegment>>> {
    parse_rttm_str(&read_text(path)?, &path.display().to_string())
}

/// Times use the shortest representation that parses back to the same value.
pub fn format_rttm(segments: &[RttmSegment]) -> String {
    let mut s = String::new();
    for seg in segments {
        let _ = writeln!(
            s,
            "SPEAKER {} 1 {} {} <NA> <NA> {} <NA> <NA>",
            seg.session, seg.onset, seg.duration, seg.speaker
        );
    }
    s
}

pub fn write_rttm(path: &Path, segments: &[RttmSegment]) -> Result<()> {
    write_bytes(path, format_rttm(segments).as_bytes())
}

/// RTTM records for labelled segments of one session.
pub fn segments_to_rttm(session: &str, segments: &[Segment]) -> Vec<RttmSegment> {
    segments
        .iter()
        .filter(|s| s.end > s.start)
        .map(|s| RttmSegment {
            session: session.to_string(),
            onset: s.start,
            duration: s.end - s.start,
            speaker: s.speaker.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration: f64,
    pub speaker: String,
}

/// `path<TAB>duration<TAB>speaker` rows. Relative paths are resolved
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest_str(&text, &path.display().to_string(), base)
}

pub fn parse_manifest_str(text: &str, source: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    content_lines(text)
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    source,
                    n,
                    format!("expected path<TAB>duration<TAB>speaker, found {} fields", fields.len()),
                ));
            }
            let duration = parse_f64(fields[1], "duration", source, n)?;
            let raw = PathBuf::from(fields[0]);
            Ok(ManifestEntry {
                path: if raw.is_relative() { base.join(raw) } else { raw },
                duration,
                speaker: fields[2].to_string(),
            })
        })
        .collect()
}

/// Writes rows with paths made relative to the manifest's directory where
/// possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut s = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        let _ = writeln!(s, "{}\t{}\t{}", p.display(), e.duration, e.speaker);
    }
    write_bytes(path, s.as_bytes())
}

/// Utterance key used across stores and trial lists: the file stem.
pub fn utterance_id(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// `<0|1> <enroll> <test>` lines.
pub fn parse_trials_str(text: &str, source: &str) -> Result<Vec<Trial>> {
    content_lines(text)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::parse(source, n, format!("expected 3 fields, found {}", f.len())));
            }
            let target = match f[0] {
                "1" => true,
                "0" => false,
                other => return Err(Error::parse(source, n, format!("label {other:?} is not 0 or 1"))),
            };
            Ok(Trial {
                enroll: f[1].to_string(),
                test: f[2].to_string(),
                target,
            })
        })
        .collect()
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials_str(&read_text(path)?, &path.display().to_string())
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    write_bytes(path, s.as_bytes())
}

/// `<enroll> <test> <score>` lines.
pub fn format_scores(trials: &[Trial], scores: &[f64]) -> String {
    let mut s = String::new();
    for (t, score) in trials.iter().zip(scores) {
        let _ = writeln!(s, "{} {} {score:.6}", t.enroll, t.test);
    }
    s
}

/// Records of `[u32 id length][id bytes][192 × f64]`, little endian.
pub fn encode_embeddings(entries: &[(String, SpeakerEmbedding)]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(entries.len() * (8 + 8 * EMBEDDING_DIM));
    for (id, e) in entries {
        if e.dim() != EMBEDDING_DIM {
            return Err(Error::Shape(format!(
                "embedding {id:?} has {} dims; the store holds {EMBEDDING_DIM}",
                e.dim()
            )));
        }
        let len = u32::try_from(id.len()).map_err(|_| Error::Config(format!("utterance id too long: {id}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in e.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8], source: &str) -> Result<Vec<(String, SpeakerEmbedding)>> {
    let bad = |offset: usize, what: &str| Error::Parse {
        source_name: source.to_string(),
        line: offset,
        detail: format!("{what} at byte offset {offset}"),
    };
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let head = bytes.get(pos..pos + 4).ok_or_else(|| bad(pos, "truncated id length"))?;
        let len = u32::from_le_bytes(head.try_into().expect("4 bytes")) as usize;
        pos += 4;
        let id = bytes.get(pos..pos + len).ok_or_else(|| bad(pos, "truncated id"))?;
        let id = std::str::from_utf8(id).map_err(|_| bad(pos, "id is not UTF-8"))?.to_string();
        pos += len;
        let body = bytes
            .get(pos..pos + 8 * EMBEDDING_DIM)
            .ok_or_else(|| bad(pos, "truncated embedding"))?;
        let vector = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * EMBEDDING_DIM;
        out.push((id, SpeakerEmbedding::from_normalized(vector)));
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, entries: &[(String, SpeakerEmbedding)]) -> Result<()> {
    write_bytes(path, &encode_embeddings(entries)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, SpeakerEmbedding)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, &path.display().to_string())
}

/// Expands a flat `key=value` file into command-line arguments:
/// `key=value` becomes `--key value`, a bare `key` becomes `--key`.
pub fn config_file_args(path: &Path) -> Result<Vec<String>> {
    parse_config_str(&read_text(path)?, &path.display().to_string())
}

pub fn parse_config_str(text: &str, source: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (n, line) in content_lines(text) {
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (line, None),
        };
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::parse(source, n, format!("invalid key {key:?}")));
        }
        args.push(format!("--{}", key.replace('_', "-")));
        if let Some(v) = value {
            args.push(v.to_string());
        }
    }
    Ok(args)
}
