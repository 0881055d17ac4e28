//! Audio ingestion, log-mel features, training chunks and diarization windows.

mod wav;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub use wav::{encode_wav, load_wav, parse_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
pub const NORM_EPS: f64 = 1e-5;
/// Training chunk durations in seconds.
pub const CHUNK_DURATIONS: [f64; 3] = [1.5, 2.0, 3.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples in `[start, end)` seconds, clipped to the signal.
    pub fn slice_seconds(&self, start: f64, end: f64) -> AudioSignal {
        let sr = self.sample_rate as f64;
        let a = ((start * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end * sr).round().max(0.0) as usize).clamp(a, self.samples.len());
        AudioSignal {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    /// Seconds.
    pub win_length: f64,
    /// Seconds.
    pub hop_length: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            win_length: 0.025,
            hop_length: 0.010,
            n_fft: 512,
            n_mels: 80,
            log_floor: 1e-10,
        }
    }
}

impl FrameConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_length * sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_length * sample_rate as f64).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if self.hop_length <= 0.0 || self.hop_samples(sample_rate) == 0 {
            return Err(Error::Config("hop length must be positive".into()));
        }
        let win = self.win_samples(sample_rate);
        if win == 0 || win > self.n_fft {
            return Err(Error::Config(format!(
                "window of {win} samples must be non-empty and fit in n_fft = {}",
                self.n_fft
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    /// `1 + ⌊(n − win)/hop⌋` frames for `n ≥ win` samples, else 0.
    pub fn num_frames(&self, n_samples: usize, sample_rate: u32) -> usize {
        let win = self.win_samples(sample_rate);
        if n_samples < win {
            0
        } else {
            1 + (n_samples - win) / self.hop_samples(sample_rate)
        }
    }
}

/// `T × n_mels` log-mel energies, frames in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_mels: usize,
    /// Frame centers in seconds.
    pub frame_times: Vec<f64>,
    /// Hop and window length, seconds.
    pub hop: f64,
    pub win: f64,
}

impl MelSpectrogram {
    pub fn from_values(values: Vec<f64>, n_mels: usize, hop: f64, win: f64) -> Result<Self> {
        if n_mels == 0 || values.is_empty() || !values.len().is_multiple_of(n_mels) {
            return Err(Error::Shape(format!(
                "{} values do not form whole frames of {n_mels} mel bins",
                values.len()
            )));
        }
        let frames = values.len() / n_mels;
        let frame_times = (0..frames).map(|t| t as f64 * hop + win / 2.0).collect();
        Ok(Self {
            values,
            n_mels,
            frame_times,
            hop,
            win,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.values.len() / self.n_mels
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_mels + m]
    }

    /// Covered audio span: `(T − 1)·hop + win` seconds.
    pub fn duration(&self) -> f64 {
        (self.num_frames().saturating_sub(1)) as f64 * self.hop + self.win
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> MelSpectrogram {
        MelSpectrogram {
            values: self.values[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            n_mels: self.n_mels,
            frame_times: self.frame_times[start..start + len].to_vec(),
            hop: self.hop,
            win: self.win,
        }
    }

    /// Channel-major copy `[n_mels][T]`, the encoder's input layout.
    pub fn to_channels_first(&self) -> Vec<f64> {
        let t = self.num_frames();
        let mut out = vec![0.0; self.values.len()];
        for (ti, frame) in self.values.chunks(self.n_mels).enumerate() {
            for (m, v) in frame.iter().enumerate() {
                out[m * t + ti] = *v;
            }
        }
        out
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with peaks equally spaced on the mel scale between
/// 0 Hz and Nyquist, evaluated at the FFT bin frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_bins: usize,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self {
            weights,
            n_bins,
            centers: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.centers.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Peak frequency of each filter in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable log-mel front end (FFT plan, window and filterbank).
#[derive(Clone)]
pub struct MelFrontend {
    cfg: FrameConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate(SAMPLE_RATE)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            window: hann_window(cfg.win_samples(SAMPLE_RATE)),
            filterbank: MelFilterbank::new(cfg.n_mels, cfg.n_fft, SAMPLE_RATE),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, signal: &AudioSignal) -> Result<MelSpectrogram> {
        if signal.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate {} Hz; the pipeline requires {SAMPLE_RATE} Hz (no resampling)",
                signal.sample_rate
            )));
        }
        let win = self.window.len();
        let hop = self.cfg.hop_samples(SAMPLE_RATE);
        let frames = self.cfg.num_frames(signal.samples.len(), SAMPLE_RATE);
        if frames == 0 {
            return Err(Error::SignalTooShort {
                got: signal.samples.len(),
                min: win,
            });
        }
        let n_mels = self.cfg.n_mels;
        let n_bins = self.filterbank.n_bins();
        let mut values = vec![0.0; frames * n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..frames {
            let frame = &signal.samples[t * hop..t * hop + win];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(if i < win { frame[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut values[t * n_mels..(t + 1) * n_mels];
            self.filterbank.apply(&power, row);
            row.iter_mut().for_each(|v| *v = (*v + self.cfg.log_floor).ln());
        }
        MelSpectrogram::from_values(values, n_mels, self.cfg.hop_length, self.cfg.win_length)
    }
}

/// One-shot log-mel spectrogram. Frames start at sample 0 with no centering.
pub fn compute_mel_spectrogram(signal: &AudioSignal, cfg: &FrameConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(*cfg)?.compute(signal)
}

/// Standardizes every mel bin over time: `(x − mean) / (std + 1e-5)`.
pub fn normalize_per_frequency(mel: &MelSpectrogram) -> MelSpectrogram {
    let (t, m) = (mel.num_frames(), mel.n_mels);
    let mut out = mel.clone();
    for bin in 0..m {
        let mean = (0..t).map(|i| mel.values[i * m + bin]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (mel.values[i * m + bin] - mean).powi(2)).sum::<f64>() / t as f64;
        let denom = var.sqrt() + NORM_EPS;
        for i in 0..t {
            out.values[i * m + bin] = (mel.values[i * m + bin] - mean) / denom;
        }
    }
    out
}

fn frames_spanning(seconds: f64, mel: &MelSpectrogram) -> usize {
    if seconds + 1e-9 < mel.win {
        0
    } else {
        1 + ((seconds - mel.win) / mel.hop + 1e-9).floor() as usize
    }
}

/// Splits utterances longer than 3 s into consecutive random-length chunks.
pub fn chunk_training_utterance(mel: &MelSpectrogram, rng_seed: u64) -> Vec<MelSpectrogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    chunk_with_draws(mel, || CHUNK_DURATIONS[rng.random_range(0..CHUNK_DURATIONS.len())])
}

/// Chunking driven by an explicit duration source.
///
/// A chunk of `d` seconds covers the frames lying entirely inside that span of
/// audio; the next chunk starts `d` seconds later. A draw that does not fit is
/// replaced by the longest allowed duration that does; once none fits the
/// remainder is dropped.
pub fn chunk_with_draws(mel: &MelSpectrogram, mut draw: impl FnMut() -> f64) -> Vec<MelSpectrogram> {
    let longest = CHUNK_DURATIONS[CHUNK_DURATIONS.len() - 1];
    let total = mel.num_frames();
    if total <= frames_spanning(longest, mel) {
        return vec![mel.clone()];
    }
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let fits = |d: f64| start + frames_spanning(d, mel) <= total;
        let wanted = draw();
        let d = if fits(wanted) {
            wanted
        } else {
            match CHUNK_DURATIONS.iter().rev().find(|&&d| fits(d)) {
                Some(&d) => d,
                None => break,
            }
        };
        chunks.push(mel.slice_frames(start, frames_spanning(d, mel)));
        start += (d / mel.hop).round() as usize;
        if start >= total {
            break;
        }
    }
    chunks
}

/// Sliding windows over speech regions.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub window: f64,
    pub shift: f64,
    pub spans: Vec<(f64, f64)>,
}

const TIME_EPS: f64 = 1e-9;

/// Within each region, spans start at the region start and advance by
/// `shift`. A leftover tail of at least half a window gets its own short span;
/// a shorter one extends the last full span to the region end.
pub fn plan_windows(speech_regions: &[(f64, f64)], window: f64, shift: f64) -> Result<WindowPlan> {
    if window <= 0.0 || shift <= 0.0 {
        return Err(Error::Config(format!(
            "window ({window}) and shift ({shift}) must be positive"
        )));
    }
    if shift > window {
        return Err(Error::Config(format!("shift {shift} exceeds window {window}")));
    }
    let mut spans = Vec::new();
    for &(start, end) in speech_regions {
        if end - start <= TIME_EPS {
            continue;
        }
        if end - start <= window + TIME_EPS {
            spans.push((start, end));
            continue;
        }
        let mut s = start;
        let mut last_full = (start, start + window);
        while s + window <= end + TIME_EPS {
            last_full = (s, (s + window).min(end));
            spans.push(last_full);
            s += shift;
        }
        let remainder = end - last_full.1;
        if remainder > TIME_EPS {
            if remainder >= 0.5 * window - TIME_EPS {
                spans.push((last_full.0 + shift, end));
            } else if let Some(last) = spans.last_mut() {
                last.1 = end;
            }
        }
    }
    Ok(WindowPlan { window, shift, spans })
}
