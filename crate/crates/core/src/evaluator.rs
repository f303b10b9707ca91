//! Verification metrics: trial scoring, EER, minDCF and bootstrap intervals.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{cosine_score, SpeakerEmbedding};
use crate::audio::Trial;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Scores with their target (`true`) / nontarget labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialScoreSet {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl TrialScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), targets.len())));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i}")));
        }
        Ok(Self { scores, targets })
    }

    /// From separate target and nontarget score lists.
    pub fn from_classes(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = targets.iter().map(|_| true).chain(nontargets.iter().map(|_| false)).collect();
        Self::new(scores, labels)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.len() - self.n_target()
    }

    fn require_both(&self) -> Result<()> {
        if self.n_target() == 0 || self.n_nontarget() == 0 {
            return Err(Error::Scoring(format!(
                "need targets and nontargets, got {} and {}",
                self.n_target(),
                self.n_nontarget()
            )));
        }
        Ok(())
    }
}

/// Cosine score per trial, in trial order.
pub fn score_trials(trials: &[Trial], embeddings: &HashMap<String, SpeakerEmbedding>) -> Result<TrialScoreSet> {
    let mut scores = Vec::with_capacity(trials.len());
    for (i, t) in trials.iter().enumerate() {
        let line = if t.line > 0 { t.line } else { i + 1 };
        let get = |id: &str| {
            embeddings
                .get(id)
                .ok_or_else(|| Error::Scoring(format!("trial line {line}: no embedding for {id}")))
        };
        let s = cosine_score(get(&t.enroll)?, get(&t.test)?)
            .map_err(|e| Error::Scoring(format!("trial line {line}: {e}")))?;
        scores.push(s);
    }
    TrialScoreSet::new(scores, trials.iter().map(|t| t.label.is_target()).collect())
}

/// One operating point: accept when `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

/// Operating points at every distinct score (ascending) plus `+∞`.
pub fn roc_points(s: &TrialScoreSet) -> Result<Vec<OperatingPoint>> {
    s.require_both()?;
    let (nt, nn) = (s.n_target() as f64, s.n_nontarget() as f64);
    let mut order: Vec<(f64, bool)> = s.scores.iter().copied().zip(s.targets.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    // targets strictly below and nontargets at or above the current threshold
    let (mut below_t, mut above_n) = (0usize, s.n_nontarget());
    let mut i = 0;
    while i < order.len() {
        let theta = order[i].0;
        out.push(OperatingPoint {
            threshold: theta,
            frr: below_t as f64 / nt,
            far: above_n as f64 / nn,
        });
        while i < order.len() && order[i].0 == theta {
            if order[i].1 {
                below_t += 1;
            } else {
                above_n -= 1;
            }
            i += 1;
        }
    }
    out.push(OperatingPoint {
        threshold: f64::INFINITY,
        frr: 1.0,
        far: 0.0,
    });
    Ok(out)
}

/// Equal error rate and its threshold, interpolating linearly between the two
/// operating points that straddle `FRR = FAR`.
pub fn compute_eer(s: &TrialScoreSet) -> Result<(f64, f64)> {
    let pts = roc_points(s)?;
    let i = pts.iter().position(|p| p.frr >= p.far).expect("the +inf point always qualifies");
    let q = pts[i];
    if q.frr == q.far || i == 0 {
        let thr = if q.threshold.is_finite() { q.threshold } else { pts[i - 1].threshold };
        return Ok((q.frr, thr));
    }
    let p = pts[i - 1];
    let t = (p.far - p.frr) / ((q.frr - p.frr) - (q.far - p.far));
    let eer = p.frr + t * (q.frr - p.frr);
    let thr = if q.threshold.is_finite() {
        p.threshold + t * (q.threshold - p.threshold)
    } else {
        p.threshold
    };
    Ok((eer, thr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfConfig {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.01,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!("invalid detection cost config {self:?}")));
        }
        Ok(())
    }

    /// Unnormalized cost at one operating point.
    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa
    }

    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum normalized detection cost over all operating points and its threshold.
pub fn compute_mindcf(s: &TrialScoreSet, cfg: &DcfConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let pts = roc_points(s)?;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in &pts {
        let c = cfg.cost(p.frr, p.far);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok((best.0 / cfg.normalizer(), best.1))
}

/// Percentile interval of the EER over `n_resamples` bootstrap resamples of
/// whole trials. Single-class resamples are skipped.
pub fn bootstrap_eer_ci(s: &TrialScoreSet, n_resamples: usize, confidence: f64, seed: u64) -> Result<(f64, f64)> {
    if n_resamples < 100 {
        return Err(Error::Config(format!("need at least 100 resamples, got {n_resamples}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence {confidence} outside (0, 1)")));
    }
    s.require_both()?;
    let n = s.len();
    let eers: Vec<Option<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, &[tag::BOOTSTRAP, r as u64]);
            let mut scores = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n {
                let k = g.gen_range(0..n);
                scores.push(s.scores[k]);
                targets.push(s.targets[k]);
            }
            let set = TrialScoreSet { scores, targets };
            compute_eer(&set).ok().map(|e| e.0)
        })
        .collect();
    let mut eers: Vec<f64> = eers.into_iter().flatten().collect();
    if eers.is_empty() {
        return Err(Error::Scoring("every bootstrap resample was single-class".into()));
    }
    eers.sort_by(f64::total_cmp);
    let alpha = 1.0 - confidence;
    Ok((percentile(&eers, alpha / 2.0), percentile(&eers, 1.0 - alpha / 2.0)))
}

/// Linear-interpolated quantile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl EvalReport {
    pub fn compute(s: &TrialScoreSet, dcf: &DcfConfig, n_resamples: usize, confidence: f64, seed: u64) -> Result<Self> {
        let (eer, eer_threshold) = compute_eer(s)?;
        let (min_dcf, dcf_threshold) = compute_mindcf(s, dcf)?;
        let (ci_low, ci_high) = bootstrap_eer_ci(s, n_resamples, confidence, seed)?;
        Ok(Self {
            eer,
            eer_threshold,
            min_dcf,
            dcf_threshold,
            ci_low,
            ci_high,
            n_target: s.n_target(),
            n_nontarget: s.n_nontarget(),
        })
    }
}

/// `label,enroll,test,score` with six decimals.
pub fn write_scores_csv(path: impl AsRef<Path>, trials: &[Trial], s: &TrialScoreSet) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label,enroll,test,score\n");
    for (t, v) in trials.iter().zip(&s.scores) {
        writeln!(out, "{},{},{},{:.6}", t.label.as_digit(), t.enroll, t.test, v).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_roc_csv(path: impl AsRef<Path>, points: &[OperatingPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        writeln!(out, "{},{:.6},{:.6}", p.threshold, p.far, p.frr).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
