//! Waveform ingestion, normalization, cropping, the synthetic corpus and
//! trial lists.

mod manifest;
pub mod synth;
mod trials;
mod wav;

pub use manifest::{CorpusManifest, ManifestRecord};
pub use synth::{synth_corpus_generate, synthesize, SynthConfig, VoiceProfile};
pub use trials::{generate_trials, parse_trial_list, parse_trials, write_trial_list, Trial, TrialLabel};
pub use wav::{read_wav_pcm16, write_wav_pcm16};

use rand::Rng;

use crate::error::{Error, Result};

/// The only sample rate the toolkit accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Default training crop: 3.9 s at 16 kHz.
pub const DEFAULT_CROP_SAMPLES: usize = 62_400;

/// Mono PCM utterance at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformUtterance {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub utterance_id: String,
}

/// Result of peak normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Samples were divided by this peak magnitude.
    Scaled(f32),
    /// All samples were zero; nothing changed.
    Degenerate,
}

impl Normalization {
    pub fn is_degenerate(self) -> bool {
        matches!(self, Normalization::Degenerate)
    }
}

impl WaveformUtterance {
    pub fn new(samples: Vec<f32>, speaker_id: impl Into<String>, utterance_id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
            speaker_id: speaker_id.into(),
            utterance_id: utterance_id.into(),
        }
    }

    pub fn normalize_by_max(&mut self) -> Normalization {
        normalize_by_max(&mut self.samples)
    }
}

/// Divides every sample by the largest absolute sample.
pub fn normalize_by_max(samples: &mut [f32]) -> Normalization {
    let peak = samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return Normalization::Degenerate;
    }
    samples.iter_mut().for_each(|v| *v /= peak);
    Normalization::Scaled(peak)
}

/// Uniformly placed window of exactly `length` samples. Utterances shorter
/// than `length` are tiled.
pub fn random_crop<R: Rng + ?Sized>(samples: &[f32], length: usize, rng: &mut R) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::EmptySequence("cannot crop a zero-length utterance".into()));
    }
    if samples.len() < length {
        return Ok(tile(samples, length));
    }
    let start = rng.gen_range(0..=samples.len() - length);
    Ok(samples[start..start + length].to_vec())
}

/// Centered window of `length` samples, tiling short utterances.
pub fn center_crop(samples: &[f32], length: usize) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::EmptySequence("cannot crop a zero-length utterance".into()));
    }
    if samples.len() < length {
        return Ok(tile(samples, length));
    }
    let start = (samples.len() - length) / 2;
    Ok(samples[start..start + length].to_vec())
}

fn tile(samples: &[f32], length: usize) -> Vec<f32> {
    samples.iter().copied().cycle().take(length).collect()
}
