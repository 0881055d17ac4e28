//! Diarization with oracle speech regions: windowed embeddings, spectral
//! clustering, hypothesis assembly and DER scoring.

mod cluster;
mod der;

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{normalize_per_frequency, plan_windows, AudioSignal, MelFrontend, MelSpectrogram};
use crate::model::TitaNet;
use crate::pooldec::SpeakerEmbedding;

pub use cluster::{
    binarize, canonical_labels, cosine_affinity, kmeans, laplacian, nme_sc_cluster, nme_sc_cluster_seeded,
    sorted_eigen, AffinityMatrix, ClusterResult, KMeansResult, NmeTrace, KMEANS_RESTARTS, MAX_P,
};
pub use der::{compute_der, hungarian, optimal_mapping, DerConfig, DerResult, Segment};

/// Window/shift preset by recording condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Telephonic,
    NonTelephonic,
}

impl Domain {
    pub fn window(self) -> f64 {
        match self {
            Domain::Telephonic => 1.5,
            Domain::NonTelephonic => 3.0,
        }
    }

    pub fn shift(self) -> f64 {
        match self {
            Domain::Telephonic => 0.75,
            Domain::NonTelephonic => 1.75,
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "telephonic" => Ok(Domain::Telephonic),
            "nontelephonic" => Ok(Domain::NonTelephonic),
            other => Err(Error::Config(format!(
                "unknown domain {other:?}; expected telephonic or nontelephonic"
            ))),
        }
    }
}

/// Merges segment times into sorted, disjoint speech regions.
pub fn speech_regions(segments: &[Segment]) -> Vec<(f64, f64)> {
    let mut spans: Vec<(f64, f64)> = segments.iter().filter(|s| s.end > s.start).map(|s| (s.start, s.end)).collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in spans {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

const EMBED_BATCH: usize = 32;

/// One unit embedding per planned window. Windows too short to hold a
/// single analysis frame are dropped, together with their span.
pub fn embed_windows(
    model: &TitaNet,
    frontend: &MelFrontend,
    audio: &AudioSignal,
    speech_regions: &[(f64, f64)],
    domain: Domain,
) -> Result<(Vec<SpeakerEmbedding>, Vec<(f64, f64)>)> {
    if speech_regions.is_empty() {
        return Err(Error::Degenerate("no speech regions to embed".into()));
    }
    let plan = plan_windows(speech_regions, domain.window(), domain.shift())?;
    let mut feats: Vec<(MelSpectrogram, (f64, f64))> = Vec::new();
    for &(start, end) in &plan.spans {
        let clip = audio.slice_seconds(start, end);
        match frontend.compute(&clip) {
            Ok(mel) => feats.push((normalize_per_frequency(&mel), (start, end))),
            Err(Error::SignalTooShort { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if feats.is_empty() {
        return Err(Error::Degenerate("every speech window is shorter than one frame".into()));
    }
    let mut embeddings: Vec<Option<SpeakerEmbedding>> = vec![None; feats.len()];
    // Batch windows of equal length; the rest go one at a time.
    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.sort_by_key(|&i| (feats[i].0.num_frames(), i));
    for group in order.chunk_by(|&a, &b| feats[a].0.num_frames() == feats[b].0.num_frames()) {
        for batch in group.chunks(EMBED_BATCH) {
            let mels: Vec<&MelSpectrogram> = batch.iter().map(|&i| &feats[i].0).collect();
            for (&i, e) in batch.iter().zip(model.embed_batch(&mels)?) {
                embeddings[i] = Some(e);
            }
        }
    }
    let spans = feats.iter().map(|f| f.1).collect();
    Ok((embeddings.into_iter().map(|e| e.expect("every window embedded")).collect(), spans))
}

/// Speaker-labelled segments of one session.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiarizationHypothesis {
    pub segments: Vec<Segment>,
}

pub fn speaker_name(label: usize) -> String {
    format!("speaker_{label}")
}

const TOUCH: f64 = 1e-9;

/// Cuts consecutive overlapping spans at the midpoint of their overlap,
/// merges touching same-label pieces and clips to the speech regions.
pub fn assemble_hypothesis(labels: &[usize], spans: &[(f64, f64)], speech_regions: &[(f64, f64)]) -> Result<DiarizationHypothesis> {
    if labels.len() != spans.len() {
        return Err(Error::Shape(format!("{} labels for {} spans", labels.len(), spans.len())));
    }
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| spans[a].0.total_cmp(&spans[b].0).then(a.cmp(&b)));
    let mut pieces: Vec<(f64, f64, usize)> = Vec::with_capacity(spans.len());
    for (pos, &i) in order.iter().enumerate() {
        let (mut start, mut end) = spans[i];
        if pos > 0 {
            let prev = spans[order[pos - 1]];
            if prev.1 > start {
                start = 0.5 * (start.max(prev.0) + prev.1.min(end));
            }
        }
        if let Some(&next) = order.get(pos + 1) {
            let next = spans[next];
            if next.0 < end {
                end = 0.5 * (next.0.max(spans[i].0) + end.min(next.1));
            }
        }
        if end > start {
            pieces.push((start, end, labels[i]));
        }
    }
    let mut merged: Vec<(f64, f64, usize)> = Vec::new();
    for p in pieces {
        match merged.last_mut() {
            Some(last) if last.2 == p.2 && p.0 <= last.1 + TOUCH => last.1 = last.1.max(p.1),
            _ => merged.push(p),
        }
    }
    let mut segments = Vec::new();
    for (start, end, label) in merged {
        for &(ra, rb) in speech_regions {
            let (a, b) = (start.max(ra), end.min(rb));
            if b > a {
                segments.push(Segment::new(a, b, speaker_name(label)));
            }
        }
    }
    segments.sort_by(|x, y| x.start.total_cmp(&y.start));
    Ok(DiarizationHypothesis { segments })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiarizeConfig {
    pub domain: Domain,
    pub max_speakers: usize,
    pub known_k: Option<usize>,
    pub seed: u64,
}

impl Default for DiarizeConfig {
    fn default() -> Self {
        Self {
            domain: Domain::Telephonic,
            max_speakers: 8,
            known_k: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiarizationOutput {
    pub hypothesis: DiarizationHypothesis,
    pub cluster: ClusterResult,
    pub spans: Vec<(f64, f64)>,
}

/// Full pipeline for one recording with oracle speech regions.
pub fn diarize_session(
    model: &TitaNet,
    frontend: &MelFrontend,
    audio: &AudioSignal,
    speech_regions: &[(f64, f64)],
    cfg: &DiarizeConfig,
) -> Result<DiarizationOutput> {
    let (embeddings, spans) = embed_windows(model, frontend, audio, speech_regions, cfg.domain)?;
    let affinity = cosine_affinity(&embeddings);
    let cluster = nme_sc_cluster_seeded(&affinity, cfg.max_speakers, cfg.known_k, cfg.seed)?;
    let hypothesis = assemble_hypothesis(&cluster.labels, &spans, speech_regions)?;
    Ok(DiarizationOutput {
        hypothesis,
        cluster,
        spans,
    })
}
