//! Synthetic "speakers": each has a fixed pitch, formant envelope and speaking
//! rate, rendered as voiced syllables with per-utterance variation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diarize::Segment;
use crate::error::{Error, Result};
use crate::features::{write_wav, AudioSignal, SAMPLE_RATE};
use crate::io::ManifestEntry;

/// Corpus description; everything is a deterministic function of it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub seed: u64,
    /// Index of the first utterance per speaker; a second corpus with the
    /// same seed and a later offset yields new recordings of the same voices.
    pub first_utterance: usize,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utterances_per_speaker: 50,
            min_duration: 1.5,
            max_duration: 2.0,
            seed: 0,
            first_utterance: 0,
        }
    }
}

/// Generative parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub name: String,
    pub f0: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// Syllables per second.
    pub syllable_rate: f64,
    /// Spectral tilt in dB per octave above f0.
    pub tilt: f64,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub signal: AudioSignal,
}

const F1_RANGE: (f64, f64) = (300.0, 850.0);
const F2_RANGE: (f64, f64) = (900.0, 2300.0);
const F3_RANGE: (f64, f64) = (2400.0, 3400.0);
const MAX_HARMONIC_HZ: f64 = 5000.0;
const BLOCK: usize = 160;

fn grid(range: (f64, f64), i: usize, n: usize) -> f64 {
    if n <= 1 {
        return (range.0 + range.1) / 2.0;
    }
    range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
}

impl SyntheticCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(Error::Config("corpus needs at least one speaker and utterance".into()));
        }
        if !(self.min_duration >= 0.1 && self.max_duration >= self.min_duration) {
            return Err(Error::Config(format!(
                "utterance durations [{}, {}] are invalid",
                self.min_duration, self.max_duration
            )));
        }
        Ok(())
    }

    /// Speaker parameters are spread over stratified grids with independent
    /// permutations, so no two speakers share pitch, formants or rate.
    pub fn speakers(&self) -> Vec<SpeakerProfile> {
        let n = self.n_speakers;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5eed);
        let mut perm = || {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        };
        let (p1, p2, p3, pr, pt) = (perm(), perm(), perm(), perm(), perm());
        (0..n)
            .map(|i| SpeakerProfile {
                name: speaker_label(i),
                f0: grid((90.0, 260.0), i, n),
                formants: [grid(F1_RANGE, p1[i], n), grid(F2_RANGE, p2[i], n), grid(F3_RANGE, p3[i], n)],
                bandwidths: [80.0, 120.0, 180.0],
                syllable_rate: grid((3.0, 6.0), pr[i], n),
                tilt: grid((-9.0, -3.0), pt[i], n),
            })
            .collect()
    }

    /// Utterances in speaker-major order.
    pub fn generate(&self) -> Result<Vec<Utterance>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.n_speakers * self.utterances_per_speaker);
        for (s, profile) in self.speakers().iter().enumerate() {
            for u in self.first_utterance..self.first_utterance + self.utterances_per_speaker {
                let seed = self.seed.wrapping_mul(1_000_003).wrapping_add((s * 100_003 + u) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let duration = rng.random_range(self.min_duration..=self.max_duration);
                out.push(Utterance {
                    id: format!("{}-{u:04}", profile.name),
                    speaker: s,
                    signal: render_utterance(profile, duration, &mut rng),
                });
            }
        }
        Ok(out)
    }

    /// Writes one WAV per utterance under `dir` and returns the manifest rows.
    pub fn write(&self, dir: &Path) -> Result<Vec<ManifestEntry>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generate()?
            .into_iter()
            .map(|utt| {
                let path: PathBuf = dir.join(format!("{}.wav", utt.id));
                write_wav(&path, &utt.signal)?;
                Ok(ManifestEntry {
                    path,
                    duration: utt.signal.duration(),
                    speaker: speaker_label(utt.speaker),
                })
            })
            .collect()
    }
}

pub fn speaker_label(index: usize) -> String {
    format!("spk{index:03}")
}

/// Alternating two-speaker recording with silent gaps between turns and
/// turn-level reference segments.
#[derive(Debug, Clone)]
pub struct Conversation {
    pub signal: AudioSignal,
    pub reference: Vec<Segment>,
}

/// Renders a conversation of roughly `duration` seconds between the given
/// speakers, with turns of 2–4 s separated by 0.2–0.6 s of silence.
pub fn synth_conversation(speakers: &[&SpeakerProfile], duration: f64, seed: u64) -> Result<Conversation> {
    if speakers.len() < 2 {
        return Err(Error::Config("a conversation needs at least two speakers".into()));
    }
    let sr = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut reference = Vec::new();
    let mut t = rng.random_range(0.2..0.6);
    let mut turn = 0;
    while t < duration {
        let profile = speakers[turn % speakers.len()];
        let len = rng.random_range(2.0..4.0);
        let start = (t * sr).round() as usize;
        let clip = render_utterance(profile, len, &mut rng);
        samples.resize(start, 0.0);
        samples.extend_from_slice(&clip.samples);
        let end = samples.len() as f64 / sr;
        reference.push(Segment::new(start as f64 / sr, end, profile.name.clone()));
        t = end + rng.random_range(0.2..0.6);
        turn += 1;
    }
    samples.resize((t * sr).round() as usize, 0.0);
    Ok(Conversation {
        signal: AudioSignal {
            samples,
            sample_rate: SAMPLE_RATE,
        },
        reference,
    })
}

/// Harmonic amplitude from a sum of resonances with a spectral tilt.
fn envelope(profile: &SpeakerProfile, formants: &[f64; 3], f: f64) -> f64 {
    let res: f64 = formants
        .iter()
        .zip(&profile.bandwidths)
        .map(|(fc, bw)| 1.0 / (1.0 + ((f - fc) / bw).powi(2)))
        .sum();
    let octaves = (f / profile.f0).log2().max(0.0);
    (0.05 + res) * 10f64.powf(profile.tilt * octaves / 20.0)
}

/// Voiced syllables separated by short pauses, peak-normalized to 0.5.
pub fn render_utterance(profile: &SpeakerProfile, duration: f64, rng: &mut ChaCha8Rng) -> AudioSignal {
    let sr = SAMPLE_RATE as f64;
    let n = (duration * sr).round() as usize;
    let mut samples = vec![0.0; n];
    let jitter: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pos = (rng.random_range(0.0..0.05) * sr) as usize;
    while pos < n {
        let syl_len = ((rng.random_range(0.8..1.2) / profile.syllable_rate) * sr) as usize;
        let end = (pos + syl_len).min(n);
        let f0 = profile.f0 * (1.0 + 0.03 * jitter.sample(rng)).clamp(0.9, 1.1);
        let glide = rng.random_range(-0.06..0.06);
        let formants = profile
            .formants
            .map(|f| f * (1.0 + 0.03 * jitter.sample(rng)).clamp(0.92, 1.08));
        let gain = rng.random_range(0.6..1.0);
        render_syllable(profile, &formants, f0, glide, gain, &mut samples[pos..end]);
        pos = end + (rng.random_range(0.03..0.12) * sr) as usize;
    }
    let noise = Normal::new(0.0, 0.003).expect("positive std");
    samples.iter_mut().for_each(|s| *s += noise.sample(rng));
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s *= 0.5 / peak);
    }
    AudioSignal {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

/// Harmonic series `Σ a_h sin(hφ)` under a Hann envelope. `sin(hφ)` comes
/// from the Chebyshev recurrence and amplitudes are refreshed per block.
fn render_syllable(profile: &SpeakerProfile, formants: &[f64; 3], f0: f64, glide: f64, gain: f64, out: &mut [f64]) {
    let sr = SAMPLE_RATE as f64;
    let len = out.len();
    if len < 2 {
        return;
    }
    let mut phase = 0.0;
    let mut amps: Vec<f64> = Vec::new();
    for (i, slot) in out.iter_mut().enumerate() {
        let progress = i as f64 / len as f64;
        let pitch = f0 * (1.0 + glide * (progress - 0.5));
        if i % BLOCK == 0 {
            let count = (MAX_HARMONIC_HZ / pitch).floor() as usize;
            amps = (1..=count).map(|h| envelope(profile, formants, h as f64 * pitch)).collect();
        }
        phase = (phase + 2.0 * PI * pitch / sr) % (2.0 * PI);
        let (s1, c) = phase.sin_cos();
        let two_c = 2.0 * c;
        let (mut prev, mut cur) = (0.0, s1);
        let mut acc = 0.0;
        for a in &amps {
            acc += a * cur;
            let next = two_c * cur - prev;
            prev = cur;
            cur = next;
        }
        let window = 0.5 - 0.5 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
        *slot += gain * window * acc;
    }
}
