//! Synthetic source-filter speakers.
//!
//! Each speaker has a fixed fundamental frequency and three formant
//! resonances. An utterance is a harmonic series at the speaker's F0 (with a
//! small per-utterance offset) whose partial amplitudes follow a glottal
//! roll-off shaped by the formant envelope, modulated by a slow syllabic
//! envelope, plus white noise at a per-utterance SNR.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::wav::encode;
use super::{CorpusManifest, ManifestRecord, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

const F0_RANGE: (f64, f64) = (80.0, 300.0);
const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 900.0), (900.0, 2400.0), (2400.0, 3600.0)];
const BANDWIDTH_RANGE: (f64, f64) = (60.0, 200.0);
pub const F0_JITTER: f64 = 0.01;
const SNR_DB_RANGE: (f64, f64) = (20.0, 30.0);
const MAX_PARTIAL_HZ: f64 = 7600.0;
const PEAK_LEVEL: f64 = 0.9;

/// A synthetic speaker's voice.
#[derive(Debug, Clone, PartialEq)]
pub struct VoiceProfile {
    pub f0_hz: f64,
    /// `(center_hz, bandwidth_hz)` per formant.
    pub formants: [(f64, f64); 3],
}

impl VoiceProfile {
    /// Profile of speaker `index` under `seed`.
    pub fn draw(seed: u64, index: usize) -> Self {
        let mut r = rng::stream(seed, &[tag::SPEAKER, index as u64]);
        let f0_hz = r.gen_range(F0_RANGE.0..F0_RANGE.1);
        let formants = FORMANT_RANGES.map(|(lo, hi)| {
            (
                r.gen_range(lo..hi),
                r.gen_range(BANDWIDTH_RANGE.0..BANDWIDTH_RANGE.1),
            )
        });
        Self { f0_hz, formants }
    }

    /// Magnitude of the formant filter at `f` Hz.
    pub fn envelope(&self, f: f64) -> f64 {
        self.formants
            .iter()
            .map(|&(fc, bw)| {
                let r = f / fc;
                1.0 / ((1.0 - r * r).powi(2) + (f * bw / (fc * fc)).powi(2)).sqrt()
            })
            .product()
    }
}

/// Per-utterance draw: the realized F0 and the samples.
#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub f0_hz: f64,
    pub samples: Vec<f32>,
}

/// Renders utterance `utt` of `speaker` (samples peak at 0.9).
pub fn synthesize(
    profile: &VoiceProfile,
    seed: u64,
    speaker: usize,
    utt: usize,
    num_samples: usize,
) -> SyntheticUtterance {
    let mut r = rng::stream(seed, &[tag::UTTERANCE, speaker as u64, utt as u64]);
    let f0 = profile.f0_hz * (1.0 + r.gen_range(-F0_JITTER..F0_JITTER));
    let fs = SAMPLE_RATE as f64;
    let mut voiced = vec![0.0f64; num_samples];
    let mut h = 1;
    while h as f64 * f0 < MAX_PARTIAL_HZ {
        let f = h as f64 * f0;
        let amp = profile.envelope(f) / h as f64;
        let phase: f64 = r.gen_range(0.0..2.0 * PI);
        // phasor recursion: z_{n+1} = z_n · e^{iω}
        let (sw, cw) = (2.0 * PI * f / fs).sin_cos();
        let (mut s, mut c) = phase.sin_cos();
        for v in voiced.iter_mut() {
            *v += amp * s;
            let ns = s * cw + c * sw;
            c = c * cw - s * sw;
            s = ns;
        }
        h += 1;
    }
    let rate_hz = r.gen_range(2.0..5.0);
    let env_phase: f64 = r.gen_range(0.0..2.0 * PI);
    for (n, v) in voiced.iter_mut().enumerate() {
        let m = (PI * rate_hz * n as f64 / fs + env_phase).sin();
        *v *= 0.3 + 0.7 * m * m;
    }
    let rms = (voiced.iter().map(|v| v * v).sum::<f64>() / num_samples.max(1) as f64).sqrt();
    let snr_db = r.gen_range(SNR_DB_RANGE.0..SNR_DB_RANGE.1);
    let sigma = rms * 10f64.powf(-snr_db / 20.0);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for v in voiced.iter_mut() {
            *v += noise.sample(&mut r);
        }
    }
    let peak = voiced.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { PEAK_LEVEL / peak } else { 0.0 };
    SyntheticUtterance {
        f0_hz: f0,
        samples: voiced.iter().map(|&v| (v * gain) as f32).collect(),
    }
}

/// Arguments of [`synth_corpus_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn num_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn speaker_id(index: usize) -> String {
        format!("spk{index:03}")
    }

    pub fn utterance_id(speaker: usize, utt: usize) -> String {
        format!("{}/utt{utt:03}.wav", Self::speaker_id(speaker))
    }
}

/// Writes `n_speakers × utts_per_speaker` WAV files under `out_dir`
/// (`spkNNN/uttNNN.wav`) and returns their manifest. The manifest is not
/// written; see [`CorpusManifest::save`].
pub fn synth_corpus_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    if cfg.n_speakers < 2 {
        return Err(Error::Config(format!(
            "need at least 2 speakers to form nontarget trials, got {}",
            cfg.n_speakers
        )));
    }
    if cfg.utts_per_speaker == 0 || cfg.num_samples() == 0 {
        return Err(Error::Config("utterance count and duration must be positive".into()));
    }
    let n = cfg.num_samples();
    let mut records = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for s in 0..cfg.n_speakers {
        let profile = VoiceProfile::draw(cfg.seed, s);
        let dir = out_dir.join(SynthConfig::speaker_id(s));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for u in 0..cfg.utts_per_speaker {
            let utt = synthesize(&profile, cfg.seed, s, u, n);
            let id = SynthConfig::utterance_id(s, u);
            let path = out_dir.join(&id);
            fs::write(&path, encode(&utt.samples)).map_err(|e| Error::io(&path, e))?;
            records.push(ManifestRecord {
                utterance_id: id.clone(),
                speaker_id: SynthConfig::speaker_id(s),
                path: id,
                num_samples: n,
            });
        }
    }
    Ok(CorpusManifest::new(records, out_dir))
}
