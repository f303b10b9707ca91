//! Speaker-classification training with SGD momentum and checkpoints.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointHeader, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{center_crop, normalize_by_max, random_crop, read_wav_pcm16, CorpusManifest, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::SpeakerNet;
use crate::nn::Session;
use crate::numerics::{sgd_momentum_step, Tensor};
use crate::rng::{self, tag};

/// Environment variable forcing the single-lane schedule.
pub const STRICT_ENV: &str = "YVEC_STRICT_DETERMINISM";

pub fn strict_from_env() -> bool {
    std::env::var(STRICT_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub utterances_per_epoch: usize,
    pub l2_lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            decay_factor: 0.5,
            decay_every_epochs: 60,
            epochs: 300,
            batch_size: 96,
            crop_seconds: 3.9,
            utterances_per_epoch: 240_000,
            l2_lambda: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.decay_factor, self.crop_seconds];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("lr0, decay_factor and crop_seconds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.l2_lambda < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and l2_lambda be nonnegative".into()));
        }
        if self.decay_every_epochs == 0 || self.batch_size == 0 || self.utterances_per_epoch == 0 {
            return Err(Error::Config("decay interval, batch size and epoch size must be positive".into()));
        }
        if self.batch_size > self.utterances_per_epoch {
            return Err(Error::Config(format!(
                "batch_size {} exceeds utterances_per_epoch {}",
                self.batch_size, self.utterances_per_epoch
            )));
        }
        Ok(())
    }

    pub fn crop_samples(&self) -> usize {
        (self.crop_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.utterances_per_epoch.div_ceil(self.batch_size)
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every_epochs⌋`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every_epochs) as i32)
}

/// Decoded training waveforms with dense class labels.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    pub ids: Vec<String>,
    pub waves: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl TrainingCorpus {
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let mut out = Self {
            ids: Vec::with_capacity(manifest.len()),
            waves: Vec::with_capacity(manifest.len()),
            labels: Vec::with_capacity(manifest.len()),
            n_classes: manifest.num_classes(),
        };
        for r in &manifest.records {
            let u = read_wav_pcm16(manifest.resolve(r))?;
            out.ids.push(r.utterance_id.clone());
            out.waves.push(u.samples);
            out.labels.push(manifest.class_of(&r.speaker_id).expect("speaker indexed"));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}

/// Fixed-length, peak-normalized evaluation input.
pub fn eval_input(samples: &[f32], len: usize) -> Result<Vec<f32>> {
    let mut x = center_crop(samples, len)?;
    normalize_by_max(&mut x);
    Ok(x)
}

/// Optimizer and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub velocity: Vec<Tensor<f32>>,
}

impl TrainState {
    pub fn new(net: &SpeakerNet<f32>) -> Self {
        Self {
            epoch: 0,
            step: 0,
            velocity: net.params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub batches: usize,
    pub lr: f64,
}

struct ExampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Tensor<f32>>>,
}

fn run_example(
    net: &SpeakerNet<f32>,
    corpus: &TrainingCorpus,
    cfg: &TrainConfig,
    index: usize,
    path: [u64; 3],
    inv_batch: f64,
) -> Result<ExampleResult> {
    let [epoch, batch, slot] = path;
    let mut crop_rng = rng::stream(cfg.seed, &[tag::CROP, epoch, batch, slot]);
    let mut x = random_crop(&corpus.waves[index], cfg.crop_samples(), &mut crop_rng)?;
    normalize_by_max(&mut x);
    let label = corpus.labels[index];
    let mut s = Session::training(&net.params, rng::stream(cfg.seed, &[tag::DROPOUT, epoch, batch, slot]));
    let out = net.example_loss(&mut s, &x, label)?;
    let loss = s.graph.value(out.loss).item() as f64;
    let scaled = s.graph.scale(out.loss, inv_batch);
    s.graph.backward(scaled)?;
    let grads = s.param_grads().into_iter().map(|g| g.cloned()).collect();
    Ok(ExampleResult {
        loss,
        correct: out.predicted == label,
        grads,
    })
}

fn accumulate(total: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>]) {
    for (t, g) in total.iter_mut().zip(grads) {
        if let Some(g) = g {
            t.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
        }
    }
}

/// One training step on the given corpus indices; returns `(mean loss, accuracy)`.
pub fn train_step(
    net: &mut SpeakerNet<f32>,
    state: &mut TrainState,
    corpus: &TrainingCorpus,
    cfg: &TrainConfig,
    indices: &[usize],
    batch: usize,
    strict: bool,
) -> Result<(f64, f64)> {
    let epoch = state.epoch;
    let b = indices.len();
    let inv_b = 1.0 / b as f64;
    let mut grads = net.params.zeros_like();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let lanes = if strict { 1 } else { rayon::current_num_threads().max(1) };
    let net_ref: &SpeakerNet<f32> = net;
    for (c, chunk) in indices.chunks(lanes).enumerate() {
        let job = |(j, &idx): (usize, &usize)| {
            let slot = (c * lanes + j) as u64;
            run_example(net_ref, corpus, cfg, idx, [epoch as u64, batch as u64, slot], inv_b)
        };
        let results: Vec<Result<ExampleResult>> = if strict {
            chunk.iter().enumerate().map(job).collect()
        } else {
            chunk.par_iter().enumerate().map(job).collect()
        };
        for r in results {
            let r = r?;
            loss_sum += r.loss;
            correct += r.correct as usize;
            accumulate(&mut grads, &r.grads);
        }
    }
    let mut loss = loss_sum * inv_b;
    if cfg.l2_lambda > 0.0 {
        let mut s = Session::differentiable(&net.params);
        let pen = net.aggregator.l2_penalty(&mut s, cfg.l2_lambda)?;
        loss += s.graph.value(pen).item() as f64;
        s.graph.backward(pen)?;
        let g: Vec<_> = s.param_grads().into_iter().map(|g| g.cloned()).collect();
        accumulate(&mut grads, &g);
    }
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NanLoss { epoch, batch });
    }
    let lr = lr_at_epoch(cfg, epoch);
    sgd_momentum_step(net.params.tensors_mut(), &grads, &mut state.velocity, lr, cfg.momentum)?;
    state.step += 1;
    Ok((loss, correct as f64 * inv_b))
}

/// Indices drawn (with replacement) for `epoch`.
pub fn epoch_sample(cfg: &TrainConfig, corpus_len: usize, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut r = rng::stream(cfg.seed, &[tag::SAMPLING, epoch as u64]);
    (0..cfg.utterances_per_epoch).map(|_| r.gen_range(0..corpus_len)).collect()
}

/// Runs epoch `state.epoch` and advances it. `on_batch` sees every step.
pub fn train_epoch(
    net: &mut SpeakerNet<f32>,
    state: &mut TrainState,
    corpus: &TrainingCorpus,
    cfg: &TrainConfig,
    strict: bool,
    mut on_batch: impl FnMut(&BatchRecord) -> Result<()>,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if corpus.n_classes != net.aggregator.n_classes {
        return Err(Error::Config(format!(
            "corpus has {} speakers but the model has {} classes",
            corpus.n_classes, net.aggregator.n_classes
        )));
    }
    let epoch = state.epoch;
    let lr = lr_at_epoch(cfg, epoch);
    let order = epoch_sample(cfg, corpus.len(), epoch);
    let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0usize);
    for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (loss, acc) = train_step(net, state, corpus, cfg, idx, batch, strict)?;
        loss_sum += loss * idx.len() as f64;
        acc_sum += acc * idx.len() as f64;
        n += idx.len();
        on_batch(&BatchRecord {
            epoch,
            step: state.step,
            lr,
            loss,
            acc,
        })?;
    }
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch,
        mean_loss: loss_sum / n as f64,
        accuracy: acc_sum / n as f64,
        batches: order.len().div_ceil(cfg.batch_size),
        lr,
    })
}

/// Inference-mode classification accuracy over fixed-length center crops.
pub fn evaluate_accuracy(net: &SpeakerNet<f32>, corpus: &TrainingCorpus, len: usize) -> Result<f64> {
    let mut correct = 0;
    for (w, &y) in corpus.waves.iter().zip(&corpus.labels) {
        correct += (net.predict(&eval_input(w, len)?)? == y) as usize;
    }
    Ok(correct as f64 / corpus.len().max(1) as f64)
}
