//! RIFF/WAVE PCM s16le mono 16 kHz reader and writer.

use std::fs;
use std::path::Path;

use super::{WaveformUtterance, SAMPLE_RATE};
use crate::error::{Error, Result};

const PCM_FORMAT: u16 = 1;

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Reads a PCM 16-bit mono 16 kHz WAV file; samples are scaled by 1/32768.
///
/// The utterance id is the file name; the speaker id is the parent
/// directory name (empty if none).
pub fn read_wav_pcm16(path: impl AsRef<Path>) -> Result<WaveformUtterance> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = decode(&bytes).map_err(|(field, detail)| Error::WavFormat {
        path: path.to_path_buf(),
        field,
        detail,
    })?;
    let utterance_id = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let speaker_id = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(WaveformUtterance::new(samples, speaker_id, utterance_id))
}

fn decode(bytes: &[u8]) -> std::result::Result<Vec<f32>, (&'static str, String)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(("riff", "missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(("wave", "missing WAVE form type".into()));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or(("chunk", format!("chunk {:?} truncated", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(("fmt", format!("fmt chunk too small ({size} bytes)")));
                }
                let f = &bytes[body..end];
                let format = le_u16(&f[0..2]);
                let channels = le_u16(&f[2..4]);
                let rate = le_u32(&f[4..8]);
                let bits = le_u16(&f[14..16]);
                if format != PCM_FORMAT {
                    return Err(("codec", format!("format tag {format}, expected PCM (1)")));
                }
                if channels != 1 {
                    return Err(("channels", format!("{channels} channels, expected mono")));
                }
                if rate != SAMPLE_RATE {
                    return Err(("sample_rate", format!("{rate} Hz, expected {SAMPLE_RATE} Hz")));
                }
                if bits != 16 {
                    return Err(("bits_per_sample", format!("{bits} bits, expected 16")));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(("fmt", "data chunk before fmt chunk".into()));
                }
                if size % 2 != 0 {
                    return Err(("data", format!("odd data size {size} for 16-bit samples")));
                }
                return Ok(bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect());
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    Err(("data", "no data chunk".into()))
}

/// Writes samples in `[-1, 1]` as PCM s16le mono 16 kHz, scaling by 32767
/// and clamping.
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(samples)).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode(samples: &[f32]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
