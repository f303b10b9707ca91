//! TDNN frame aggregator, statistics pooling, embedding head and scoring.

mod export;

pub use export::{
    read_embedding_table, read_embeddings_json, write_embedding_table, write_embeddings_csv, write_embeddings_json,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, ConvBlock, ParamId, ParamStore, Session};
use crate::numerics::{Activation, Real, Tensor, Var};

pub const STAT_POOL_EPS: f64 = 1e-10;

fn default_contexts() -> Vec<Vec<i64>> {
    vec![vec![-2, -1, 0, 1, 2], vec![-2, 0, 2], vec![-3, 0, 3], vec![0], vec![0]]
}

fn default_widths() -> Vec<usize> {
    vec![512, 512, 512, 512, 1500]
}

fn default_512() -> usize {
    512
}

fn default_slope() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdnnConfig {
    /// Frame offsets per layer; evenly spaced and symmetric around 0.
    #[serde(default = "default_contexts")]
    pub contexts: Vec<Vec<i64>>,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_512")]
    pub embedding_dim: usize,
    /// Width of the second fully connected layer (training only).
    #[serde(default = "default_512")]
    pub hidden_dim: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

impl Default for TdnnConfig {
    fn default() -> Self {
        Self {
            contexts: default_contexts(),
            widths: default_widths(),
            embedding_dim: 512,
            hidden_dim: 512,
            leaky_slope: 0.2,
        }
    }
}

/// `(kernel, dilation)` realizing an evenly spaced symmetric context.
pub fn context_geometry(offsets: &[i64]) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("context {offsets:?} must be evenly spaced and symmetric around 0"));
    let mut o = offsets.to_vec();
    o.sort_unstable();
    o.dedup();
    if o.is_empty() || o.len() != offsets.len() {
        return Err(bad());
    }
    if o.len() == 1 {
        return if o[0] == 0 { Ok((1, 1)) } else { Err(bad()) };
    }
    let step = o[1] - o[0];
    if o.windows(2).any(|w| w[1] - w[0] != step) || o[0] != -o[o.len() - 1] {
        return Err(bad());
    }
    Ok((o.len(), step as usize))
}

impl TdnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.len() != self.widths.len() || self.contexts.is_empty() {
            return Err(Error::Config(format!(
                "{} TDNN contexts for {} widths",
                self.contexts.len(),
                self.widths.len()
            )));
        }
        for c in &self.contexts {
            context_geometry(c)?;
        }
        if self.widths.contains(&0) || self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("TDNN widths and embedding dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Frames consumed by the contexts: `T' = T - span`.
    pub fn context_span(&self) -> usize {
        self.contexts
            .iter()
            .map(|c| (c.iter().max().unwrap() - c.iter().min().unwrap()) as usize)
            .sum()
    }

    pub fn pooled_dim(&self) -> usize {
        2 * self.widths.last().copied().unwrap_or(0)
    }

    /// Every width divided by `divisor`, rounded up.
    pub fn scaled(&self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("width divisor must be positive".into()));
        }
        let d = |c: usize| c.div_ceil(divisor);
        Ok(Self {
            widths: self.widths.iter().map(|&w| d(w)).collect(),
            embedding_dim: d(self.embedding_dim),
            hidden_dim: d(self.hidden_dim),
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmSoftmaxConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AmSoftmaxConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin: 0.35 }
    }
}

impl AmSoftmaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "am-softmax needs s > 0 and 0 <= m < 1, got s={} m={}",
                self.scale, self.margin
            )));
        }
        Ok(())
    }
}

/// TDNN layers, pooling and the fully connected head.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub config: TdnnConfig,
    pub layers: Vec<ConvBlock>,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    /// `[C, hidden_dim]` class directions for the margin loss.
    pub class_weight: ParamId,
    pub n_classes: usize,
}

impl Aggregator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: TdnnConfig,
        in_channels: usize,
        n_classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let act = Activation::LeakyRelu(config.leaky_slope);
        let mut layers = Vec::with_capacity(config.widths.len());
        let mut cin = in_channels;
        for (i, (ctx, &w)) in config.contexts.iter().zip(&config.widths).enumerate() {
            let (k, dil) = context_geometry(ctx)?;
            layers.push(ConvBlock::new(store, &format!("tdnn{i}"), cin, w, k, 1, dil, act, rng)?);
            cin = w;
        }
        let pooled = config.pooled_dim();
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        let fc1_weight = store.add("head.fc1.weight", fan_in_uniform(&[e, pooled], pooled, rng))?;
        let fc1_bias = store.add("head.fc1.bias", Tensor::zeros(&[e]))?;
        let fc2_weight = store.add("head.fc2.weight", fan_in_uniform(&[h, e], e, rng))?;
        let fc2_bias = store.add("head.fc2.bias", Tensor::zeros(&[h]))?;
        let class_weight = store.add("head.classes", fan_in_uniform(&[n_classes, h], h, rng))?;
        Ok(Self {
            config,
            layers,
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
            class_weight,
            n_classes,
        })
    }

    /// `[F_enc, T]` → `[D_last, T - span]`. Dropout is not used here.
    pub fn tdnn_forward<T: Real>(&self, s: &mut Session<'_, T>, frames: Var) -> Result<Var> {
        let t = s.graph.value(frames).shape().get(1).copied().unwrap_or(0);
        let span = self.config.context_span();
        if t <= span {
            return Err(Error::InputTooShort {
                layer: "tdnn".into(),
                len: t,
                required: span + 1,
            });
        }
        let mut x = frames;
        for l in &self.layers {
            x = l.forward(s, x, 0.0)?;
        }
        Ok(x)
    }

    pub fn stat_pool<T: Real>(&self, s: &mut Session<'_, T>, frames: Var) -> Result<Var> {
        s.graph.stat_pool(frames, STAT_POOL_EPS)
    }

    /// Pre-activation output of the first fully connected layer.
    pub fn embed<T: Real>(&self, s: &mut Session<'_, T>, pooled: Var) -> Result<Var> {
        let (w, b) = (s.param(self.fc1_weight), s.param(self.fc1_bias));
        s.graph.linear(pooled, w, Some(b))
    }

    /// Features fed to the margin loss: `LReLU(fc2(LReLU(embedding)))`.
    pub fn classifier_features<T: Real>(&self, s: &mut Session<'_, T>, embedding: Var) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let x = s.graph.leaky_relu(embedding, slope);
        let (w, b) = (s.param(self.fc2_weight), s.param(self.fc2_bias));
        let x = s.graph.linear(x, w, Some(b))?;
        Ok(s.graph.leaky_relu(x, slope))
    }

    pub fn am_softmax_loss<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        features: Var,
        labels: &[usize],
        cfg: AmSoftmaxConfig,
    ) -> Result<Var> {
        let w = s.param(self.class_weight);
        s.graph.am_softmax(features, w, labels, cfg.scale, cfg.margin)
    }

    /// `λ·(‖W_fc1‖² + ‖W_fc2‖²)`.
    pub fn l2_penalty<T: Real>(&self, s: &mut Session<'_, T>, lambda: f64) -> Result<Var> {
        let w1 = s.param(self.fc1_weight);
        let w2 = s.param(self.fc2_weight);
        let a = s.graph.sum_squares(w1);
        let b = s.graph.sum_squares(w2);
        let total = s.graph.add(a, b)?;
        Ok(s.graph.scale(total, lambda))
    }
}

/// An utterance-level speaker vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub utterance_id: String,
    pub vector: Vec<f32>,
}

impl SpeakerEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Cosine similarity, computed in double precision.
pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.vector.len() != b.vector.len() {
        return Err(Error::Scoring(format!(
            "{} has dimension {} but {} has {}",
            a.utterance_id,
            a.vector.len(),
            b.utterance_id,
            b.vector.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    for (e, n) in [(a, na), (b, nb)] {
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Scoring(format!("embedding of {} has norm {n}", e.utterance_id)));
        }
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
