//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono audio.

use std::fs;
use std::path::Path;

use super::AudioSignal;
use crate::error::{Error, Result};

fn wav_err(chunk: &str, detail: impl Into<String>) -> Error {
    Error::WavParse {
        chunk: chunk.to_string(),
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Decodes a PCM 16-bit mono WAVE byte stream, scaling samples by 1/32768.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioSignal> {
    if bytes.len() < 12 {
        return Err(wav_err("RIFF", format!("header needs 12 bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(wav_err("RIFF", "missing `RIFF` magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(wav_err("RIFF", "form type is not `WAVE`"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let name = String::from_utf8_lossy(id).into_owned();
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| wav_err(&name, format!("declares {size} bytes but the file ends early")))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(wav_err("fmt ", format!("expected at least 16 bytes, found {}", body.len())));
                }
                fmt = Some((u16_at(body, 0), u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }

    let (format, channels, sample_rate, bits) = fmt.ok_or_else(|| wav_err("fmt ", "chunk is missing"))?;
    if format != 1 {
        return Err(Error::UnsupportedFormat(format!("WAVE format tag {format}, only PCM (1) is supported")));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels, only mono is supported")));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples, only 16-bit is supported")));
    }
    if sample_rate == 0 {
        return Err(wav_err("fmt ", "sample rate is zero"));
    }
    let data = data.ok_or_else(|| wav_err("data", "chunk is missing"))?;
    if data.len() % 2 != 0 {
        return Err(wav_err("data", "odd byte count for 16-bit samples"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|p| i16::from_le_bytes([p[0], p[1]]) as f64 / 32768.0)
        .collect();
    Ok(AudioSignal { samples, sample_rate })
}

/// Quantizes to 16-bit PCM (`round(x·32768)`, saturating) and serializes.
pub fn encode_wav(signal: &AudioSignal) -> Vec<u8> {
    let data_len = signal.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &signal.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    crate::io::write_bytes(path.as_ref(), &encode_wav(signal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_round_trips() {
        let sig = AudioSignal::new(vec![0.0; 16000], 16000).unwrap();
        let back = parse_wav(&encode_wav(&sig)).unwrap();
        assert_eq!(back.samples.len(), 16000);
        assert!(back.samples.iter().all(|s| *s == 0.0));
        assert_eq!(back.sample_rate, 16000);
    }

    #[test]
    fn most_negative_sample_is_minus_one() {
        let mut bytes = encode_wav(&AudioSignal::new(vec![0.0; 2], 16000).unwrap());
        let n = bytes.len();
        bytes[n - 2..].copy_from_slice(&(-32768i16).to_le_bytes());
        let sig = parse_wav(&bytes).unwrap();
        assert_eq!(sig.samples[1], -1.0);
    }

    #[test]
    fn sine_peak_survives_quantization() {
        let samples: Vec<f64> = (0..16000)
            .map(|i| (16384.0 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).round() / 32768.0)
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        write_wav(&path, &AudioSignal::new(samples, 16000).unwrap()).unwrap();
        let sig = load_wav(&path).unwrap();
        let peak = sig.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6, "peak {peak}");
    }

    #[test]
    fn malformed_headers_name_the_chunk() {
        let err = parse_wav(b"RIFX\0\0\0\0WAVE").unwrap_err().to_string();
        assert!(err.contains("RIFF"), "{err}");

        let mut bytes = encode_wav(&AudioSignal::new(vec![0.0; 4], 16000).unwrap());
        bytes.truncate(bytes.len() - 3);
        let err = parse_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("data"), "{err}");

        let mut bytes = encode_wav(&AudioSignal::new(vec![0.0; 4], 16000).unwrap());
        bytes[16..20].copy_from_slice(&8u32.to_le_bytes());
        assert!(parse_wav(&bytes).is_err());
    }

    #[test]
    fn stereo_and_8_bit_are_unsupported() {
        let mut bytes = encode_wav(&AudioSignal::new(vec![0.0; 4], 16000).unwrap());
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(parse_wav(&bytes), Err(Error::UnsupportedFormat(_))));
        let mut bytes = encode_wav(&AudioSignal::new(vec![0.0; 4], 16000).unwrap());
        bytes[34..36].copy_from_slice(&8u16.to_le_bytes());
        assert!(matches!(parse_wav(&bytes), Err(Error::UnsupportedFormat(_))));
    }
}
