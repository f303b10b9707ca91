use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use yvector::aggregator::{read_embedding_table, write_embedding_table, write_embeddings_csv, SpeakerEmbedding};
use yvector::analysis::{cfr as cfr_of, flatness_stats, write_cfr_csv, CfrResult};
use yvector::audio::{generate_trials, parse_trial_list, read_wav_pcm16, synth_corpus_generate, write_trial_list};
use yvector::audio::{CorpusManifest, SynthConfig};
use yvector::encoder::EncoderConfig;
use yvector::evaluator::{roc_points, score_trials, write_roc_csv, write_scores_csv, EvalReport};
use yvector::model::SpeakerNet;
use yvector::trainer::{
    eval_input, evaluate_accuracy, strict_from_env, train_epoch, Checkpoint, TrainState, TrainingCorpus,
};
use yvector::Error;

use crate::config::RunConfig;
use crate::CliError;

const OUTPUTS: &str = "outputs.json";

#[derive(Debug, Default, Serialize, Deserialize)]
struct OutputEntry {
    path: String,
    bytes: u64,
    command: String,
}

/// Records produced files in `<dir>/outputs.json`, keeping earlier entries.
struct Outputs {
    dir: PathBuf,
    command: &'static str,
    entries: Vec<OutputEntry>,
}

impl Outputs {
    fn open(dir: &Path, command: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(OUTPUTS);
        let entries = match fs::read_to_string(&p) {
            Ok(t) => serde_json::from_str(&t).map_err(Error::from)?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            entries,
        })
    }

    fn add(&mut self, name: &str) -> Result<(), CliError> {
        let p = self.dir.join(name);
        let bytes = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        self.entries.retain(|e| e.path != name);
        self.entries.push(OutputEntry {
            path: name.to_string(),
            bytes,
            command: self.command.to_string(),
        });
        Ok(())
    }

    fn save(&self) -> Result<(), CliError> {
        let p = self.dir.join(OUTPUTS);
        let text = serde_json::to_string_pretty(&self.entries).map_err(Error::from)?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(())
    }
}

fn must_exist(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Runtime(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        )))
    }
}

pub fn synth(speakers: usize, utts: usize, seconds: f64, seed: u64, n_trials: usize, out: &Path) -> Result<(), CliError> {
    if speakers < 2 {
        return Err(CliError::usage(format!(
            "--speakers {speakers}: at least 2 speakers are needed to form nontarget trials"
        )));
    }
    if utts == 0 || !(seconds > 0.0) || n_trials == 0 {
        return Err(CliError::usage("--utts, --seconds and --trials must be positive"));
    }
    let cfg = SynthConfig {
        n_speakers: speakers,
        utts_per_speaker: utts,
        duration_s: seconds,
        seed,
    };
    let mut outputs = Outputs::open(out, "synth")?;
    let manifest = synth_corpus_generate(&cfg, out)?;
    manifest.save(out.join("manifest.json"))?;
    let trials = generate_trials(&manifest, n_trials, seed)?;
    write_trial_list(out.join("trials.txt"), &trials)?;
    for r in &manifest.records {
        outputs.add(&r.path)?;
    }
    outputs.add("manifest.json")?;
    outputs.add("trials.txt")?;
    outputs.save()?;
    log::info!("wrote {} utterances and {} trials to {}", manifest.len(), trials.len(), out.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn train(cfg: RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let manifest_path = cfg.require(cfg.manifest.as_ref(), "manifest")?;
    let out = cfg.require(cfg.out_dir.as_ref(), "output directory (--out)")?;
    must_exist(&manifest_path, "manifest")?;
    if let Some(r) = resume {
        must_exist(r, "checkpoint")?;
    }
    let manifest = CorpusManifest::load(&manifest_path)?;
    let corpus = TrainingCorpus::load(&manifest)?;

    let (mut net, mut state) = match resume {
        Some(r) => Checkpoint::load(r)?.restore()?,
        None => {
            let model = cfg.model(corpus.n_classes)?;
            let net = SpeakerNet::new(model, cfg.seed)?;
            let state = TrainState::new(&net);
            (net, state)
        }
    };
    if net.config.n_classes != corpus.n_classes {
        return Err(CliError::Runtime(Error::Config(format!(
            "checkpoint has {} classes but the corpus has {} speakers",
            net.config.n_classes, corpus.n_classes
        ))));
    }
    let min = net.config.min_samples();
    if cfg.train.crop_samples() < min || cfg.eval_samples < min {
        return Err(CliError::usage(format!(
            "crop of {} and eval length of {} samples must both be at least {min} for this model",
            cfg.train.crop_samples(),
            cfg.eval_samples
        )));
    }

    let mut outputs = Outputs::open(&out, "train")?;
    write_json(&out.join("config.json"), &cfg)?;
    outputs.add("config.json")?;
    let log_path = out.join("train.jsonl");
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut write_line = |v: serde_json::Value| -> yvector::Result<()> {
        writeln!(log, "{v}").map_err(|e| Error::io(&log_path, e))
    };

    let strict = strict_from_env();
    let snapshot = cfg.snapshot();
    let start = state.epoch;
    while state.epoch < cfg.train.epochs {
        let m = train_epoch(&mut net, &mut state, &corpus, &cfg.train, strict, |b| {
            write_line(json!({"kind": "batch", "epoch": b.epoch, "step": b.step, "lr": b.lr, "loss": b.loss, "acc": b.acc}))
        })?;
        write_line(json!({
            "kind": "epoch", "epoch": m.epoch, "mean_loss": m.mean_loss,
            "accuracy": m.accuracy, "batches": m.batches, "lr": m.lr,
        }))?;
        log::info!("epoch {} loss {:.4} acc {:.3}", m.epoch, m.mean_loss, m.accuracy);
        let last = state.epoch == cfg.train.epochs;
        if state.epoch % cfg.save_every == 0 || last {
            let ck = Checkpoint::capture(&net, &state, &cfg.train, snapshot.clone());
            let name = format!("checkpoint-epoch{:04}.yvec", state.epoch);
            ck.save(out.join(&name))?;
            ck.save(out.join("checkpoint.yvec"))?;
            outputs.add(&name)?;
            outputs.add("checkpoint.yvec")?;
        }
    }
    if state.epoch == start {
        log::warn!("checkpoint is already at epoch {}; nothing to train", state.epoch);
        Checkpoint::capture(&net, &state, &cfg.train, snapshot).save(out.join("checkpoint.yvec"))?;
        outputs.add("checkpoint.yvec")?;
    }
    let acc = evaluate_accuracy(&net, &corpus, cfg.eval_samples)?;
    write_line(json!({"kind": "final", "epoch": state.epoch, "step": state.step, "train_accuracy": acc}))?;
    drop(write_line);
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    outputs.add("train.jsonl")?;
    write_json(
        &out.join("summary.json"),
        &json!({"epochs": state.epoch, "steps": state.step, "train_accuracy": acc}),
    )?;
    outputs.add("summary.json")?;
    outputs.save()?;
    log::info!("training accuracy {acc:.4} after {} steps", state.step);
    Ok(())
}

pub fn embed(cfg: RunConfig) -> Result<(), CliError> {
    let ck_path = cfg.require(cfg.checkpoint.as_ref(), "checkpoint")?;
    let manifest_path = cfg.require(cfg.manifest.as_ref(), "manifest")?;
    let out = cfg.require(cfg.out_dir.as_ref(), "output directory (--out)")?;
    must_exist(&ck_path, "checkpoint")?;
    must_exist(&manifest_path, "manifest")?;
    let (net, _) = Checkpoint::load(&ck_path)?.restore()?;
    let manifest = CorpusManifest::load(&manifest_path)?;
    let rows = manifest
        .records
        .par_iter()
        .map(|r| {
            let u = read_wav_pcm16(manifest.resolve(r))?;
            let x = eval_input(&u.samples, cfg.eval_samples)?;
            Ok(SpeakerEmbedding {
                utterance_id: r.utterance_id.clone(),
                vector: net.embed(&x)?,
            })
        })
        .collect::<yvector::Result<Vec<_>>>()?;
    let mut outputs = Outputs::open(&out, "embed")?;
    write_embedding_table(out.join("embeddings.bin"), &rows)?;
    write_embeddings_csv(out.join("embeddings.csv"), &rows)?;
    outputs.add("embeddings.bin")?;
    outputs.add("embeddings.csv")?;
    outputs.save()?;
    log::info!("embedded {} utterances", rows.len());
    Ok(())
}

pub fn eval(cfg: RunConfig, embeddings: &Path) -> Result<(), CliError> {
    let trials_path = cfg.require(cfg.trials.as_ref(), "trial list")?;
    let out = cfg.require(cfg.out_dir.as_ref(), "output directory (--out)")?;
    must_exist(embeddings, "embedding table")?;
    must_exist(&trials_path, "trial list")?;
    let table: HashMap<String, SpeakerEmbedding> = read_embedding_table(embeddings)?
        .into_iter()
        .map(|e| (e.utterance_id.clone(), e))
        .collect();
    let trials = parse_trial_list(&trials_path)?;
    let scores = score_trials(&trials, &table)?;
    let report = EvalReport::compute(&scores, &cfg.dcf, cfg.bootstrap_resamples, cfg.confidence, cfg.seed)?;
    let mut outputs = Outputs::open(&out, "eval")?;
    write_json(&out.join("report.json"), &report)?;
    write_scores_csv(out.join("scores.csv"), &trials, &scores)?;
    write_roc_csv(out.join("roc.csv"), &roc_points(&scores)?)?;
    for f in ["report.json", "scores.csv", "roc.csv"] {
        outputs.add(f)?;
    }
    outputs.save()?;
    log::info!(
        "EER {:.4} [{:.4}, {:.4}], minDCF {:.4} over {} trials",
        report.eer,
        report.ci_low,
        report.ci_high,
        report.min_dcf,
        trials.len()
    );
    Ok(())
}

fn same_geometry(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    let g = |e: &EncoderConfig| e.branches.iter().map(|b| (b.kernel, b.stride, b.dm_kernel, b.dm_stride)).collect::<Vec<_>>();
    g(a) == g(b)
}

pub fn cfr(cfg: RunConfig, preset: Option<&str>, band_lo: f64, band_hi: f64) -> Result<(), CliError> {
    let ck_path = cfg.require(cfg.checkpoint.as_ref(), "checkpoint")?;
    let out = cfg.require(cfg.out_dir.as_ref(), "output directory (--out)")?;
    must_exist(&ck_path, "checkpoint")?;
    let ck = Checkpoint::load(&ck_path)?;
    if let Some(p) = preset {
        let want = EncoderConfig::preset(p).map_err(CliError::usage)?;
        if !same_geometry(&want, &ck.header.model.encoder) {
            return Err(CliError::Runtime(Error::Config(format!(
                "checkpoint encoder geometry does not match preset {p}"
            ))));
        }
    }
    let (net, _) = ck.restore()?;
    let mut results: Vec<CfrResult> = Vec::new();
    for (source, filters) in net.encoder.first_layer_filters(&net.params) {
        results.push(cfr_of(&filters, source)?);
    }
    let pooled = results[1..]
        .iter()
        .try_fold(results[0].clone(), |acc, r| acc.combine(r, "pooled"))?;
    let pooled = CfrResult {
        source: "pooled".into(),
        ..pooled
    };
    results.push(pooled);

    let mut outputs = Outputs::open(&out, "cfr")?;
    let mut stats = Vec::new();
    for r in &results {
        let name = format!("cfr_{}.csv", r.source);
        write_cfr_csv(out.join(&name), std::slice::from_ref(r))?;
        outputs.add(&name)?;
        let s = flatness_stats(r, band_lo, band_hi)?;
        stats.push(json!({
            "source": r.source, "band_lo_hz": band_lo, "band_hi_hz": band_hi,
            "peak_minus_mean_db": s.peak_minus_mean_db, "stddev_db": s.stddev_db, "argmax_hz": s.argmax_hz,
        }));
    }
    write_json(&out.join("cfr_stats.json"), &stats)?;
    outputs.add("cfr_stats.json")?;
    outputs.save()?;
    Ok(())
}
