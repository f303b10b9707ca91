use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::CorpusManifest;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }

    pub fn as_digit(self) -> u8 {
        match self {
            TrialLabel::Target => 1,
            TrialLabel::Nontarget => 0,
        }
    }
}

/// One verification trial: do `enroll` and `test` share a speaker?
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub label: TrialLabel,
    pub enroll: String,
    pub test: String,
    /// 1-based source line, 0 for generated trials.
    pub line: usize,
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.label.as_digit(), self.enroll, self.test)
    }
}

/// Parses `<0|1> <enroll-id> <test-id>` lines. Blank lines are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [label, enroll, test] = fields[..] else {
            return Err(Error::Parse {
                line,
                detail: format!("expected 3 fields, found {}", fields.len()),
            });
        };
        let label = match label {
            "1" => TrialLabel::Target,
            "0" => TrialLabel::Nontarget,
            other => {
                return Err(Error::Parse {
                    line,
                    detail: format!("unknown label {other:?}, expected 0 or 1"),
                })
            }
        };
        out.push(Trial {
            label,
            enroll: enroll.to_string(),
            test: test.to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn parse_trial_list(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text)
}

pub fn write_trial_list(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for t in trials {
        text.push_str(&t.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Draws `n` trials alternating target and nontarget. Target trials pair two
/// distinct utterances of one speaker; nontarget trials pair utterances of
/// two distinct speakers.
pub fn generate_trials(manifest: &CorpusManifest, n: usize, seed: u64) -> Result<Vec<Trial>> {
    let speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::Config("trial generation needs at least 2 speakers".into()));
    }
    let mut by_speaker: Vec<Vec<&str>> = vec![Vec::new(); speakers.len()];
    for r in &manifest.records {
        let c = manifest.class_of(&r.speaker_id).expect("speaker indexed");
        by_speaker[c].push(&r.utterance_id);
    }
    let multi: Vec<usize> = (0..speakers.len()).filter(|&s| by_speaker[s].len() >= 2).collect();
    let mut r = rng::stream(seed, &[tag::TRIALS]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let want_target = i % 2 == 0 && !multi.is_empty();
        let trial = if want_target {
            let s = multi[r.gen_range(0..multi.len())];
            let utts = &by_speaker[s];
            let a = r.gen_range(0..utts.len());
            let mut b = r.gen_range(0..utts.len() - 1);
            if b >= a {
                b += 1;
            }
            Trial {
                label: TrialLabel::Target,
                enroll: utts[a].to_string(),
                test: utts[b].to_string(),
                line: 0,
            }
        } else {
            let sa = r.gen_range(0..speakers.len());
            let mut sb = r.gen_range(0..speakers.len() - 1);
            if sb >= sa {
                sb += 1;
            }
            let ua = &by_speaker[sa];
            let ub = &by_speaker[sb];
            Trial {
                label: TrialLabel::Nontarget,
                enroll: ua[r.gen_range(0..ua.len())].to_string(),
                test: ub[r.gen_range(0..ub.len())].to_string(),
                line: 0,
            }
        };
        out.push(trial);
    }
    Ok(out)
}
