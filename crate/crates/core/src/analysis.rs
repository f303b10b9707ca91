//! Spectral analysis of learned first-layer filters.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE;
use crate::error::{Error, Result};

pub const DFT_SIZE: usize = 256;
pub const N_BINS: usize = DFT_SIZE / 2 + 1;
pub const DB_FLOOR: f64 = -120.0;

pub fn bin_hz(k: usize) -> f64 {
    k as f64 * SAMPLE_RATE as f64 / DFT_SIZE as f64
}

/// `|DFT_256(filter)|` at bins `0..=128`, zero-padding the filter.
pub fn dft_magnitude_256(filter: &[f64]) -> Result<Vec<f64>> {
    if filter.is_empty() {
        return Err(Error::EmptySequence("filter".into()));
    }
    if filter.len() > DFT_SIZE {
        return Err(Error::Config(format!(
            "filter of length {} exceeds the {DFT_SIZE}-point transform",
            filter.len()
        )));
    }
    Ok((0..N_BINS)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in filter.iter().enumerate() {
                // reduce k·n mod N first so the angle stays small and exact
                let a = -2.0 * PI * ((k * n) % DFT_SIZE) as f64 / DFT_SIZE as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re.hypot(im)
        })
        .collect())
}

pub fn to_db(v: f64) -> f64 {
    if v > 0.0 {
        (20.0 * v.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Cumulative frequency response of one filter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfrResult {
    pub source: String,
    pub freqs_hz: Vec<f64>,
    pub cfr_linear: Vec<f64>,
    pub cfr_db: Vec<f64>,
}

impl CfrResult {
    fn from_linear(source: impl Into<String>, cfr_linear: Vec<f64>) -> Self {
        Self {
            source: source.into(),
            freqs_hz: (0..cfr_linear.len()).map(bin_hz).collect(),
            cfr_db: cfr_linear.iter().map(|&v| to_db(v)).collect(),
            cfr_linear,
        }
    }

    /// Bin-wise sum of two results' linear responses.
    pub fn combine(&self, other: &CfrResult, source: impl Into<String>) -> Result<Self> {
        if self.cfr_linear.len() != other.cfr_linear.len() {
            return Err(Error::Shape("CFR bin counts differ".into()));
        }
        let sum = self.cfr_linear.iter().zip(&other.cfr_linear).map(|(a, b)| a + b).collect();
        Ok(Self::from_linear(source, sum))
    }
}

/// `Σ_k |F_k| / ‖F_k‖₂` over the 129 one-sided bins. All-zero filters are skipped.
pub fn cfr(filters: &[Vec<f64>], source: impl Into<String>) -> Result<CfrResult> {
    let source = source.into();
    let mut acc = vec![0.0; N_BINS];
    let mut used = 0;
    for (i, f) in filters.iter().enumerate() {
        let mag = dft_magnitude_256(f)?;
        let norm = mag.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            log::warn!("{source}: filter {i} is all zero, skipped");
            continue;
        }
        for (a, m) in acc.iter_mut().zip(&mag) {
            *a += m / norm;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Contract(format!("{source}: every filter is zero")));
    }
    Ok(CfrResult::from_linear(source, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessStats {
    pub peak_minus_mean_db: f64,
    pub stddev_db: f64,
    pub argmax_hz: f64,
}

/// dB statistics over bins whose frequency lies in `[lo_hz, hi_hz]`.
pub fn flatness_stats(c: &CfrResult, lo_hz: f64, hi_hz: f64) -> Result<FlatnessStats> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    if !(0.0..=nyquist).contains(&lo_hz) || !(0.0..=nyquist).contains(&hi_hz) {
        return Err(Error::Config(format!("band [{lo_hz}, {hi_hz}] outside [0, {nyquist}] Hz")));
    }
    let band: Vec<(f64, f64)> = c
        .freqs_hz
        .iter()
        .zip(&c.cfr_db)
        .filter(|(f, _)| **f >= lo_hz && **f <= hi_hz)
        .map(|(&f, &d)| (f, d))
        .collect();
    if band.is_empty() {
        return Err(Error::EmptySequence(format!("no CFR bins in [{lo_hz}, {hi_hz}] Hz")));
    }
    let n = band.len() as f64;
    let mean = band.iter().map(|b| b.1).sum::<f64>() / n;
    let var = band.iter().map(|b| (b.1 - mean).powi(2)).sum::<f64>() / n;
    let (argmax_hz, peak) = band
        .iter()
        .copied()
        .fold((band[0].0, f64::NEG_INFINITY), |best, b| if b.1 > best.1 { b } else { best });
    Ok(FlatnessStats {
        peak_minus_mean_db: peak - mean,
        stddev_db: var.sqrt(),
        argmax_hz,
    })
}

/// `freq_hz,cfr_linear,cfr_db,source` rows for every result.
pub fn write_cfr_csv(path: impl AsRef<Path>, results: &[CfrResult]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("freq_hz,cfr_linear,cfr_db,source\n");
    for r in results {
        for ((f, l), d) in r.freqs_hz.iter().zip(&r.cfr_linear).zip(&r.cfr_db) {
            writeln!(out, "{f},{l},{d},{}", r.source).unwrap();
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
