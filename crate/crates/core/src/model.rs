//! The full network: waveform encoder, TDNN aggregator and training head.

use serde::{Deserialize, Serialize};

use crate::aggregator::{AmSoftmaxConfig, Aggregator, TdnnConfig};
use crate::encoder::{EncoderConfig, WaveformEncoder};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::numerics::{cosine_matrix, Real, Tensor, Var};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub tdnn: TdnnConfig,
    #[serde(default)]
    pub am_softmax: AmSoftmaxConfig,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn preset(name: &str, n_classes: usize) -> Result<Self> {
        Ok(Self {
            encoder: EncoderConfig::preset(name)?,
            tdnn: TdnnConfig::default(),
            am_softmax: AmSoftmaxConfig::default(),
            n_classes,
        })
    }

    /// Every layer width divided by `divisor`, rounded up.
    pub fn scaled(&self, divisor: usize) -> Result<Self> {
        Ok(Self {
            encoder: self.encoder.scaled(divisor)?,
            tdnn: self.tdnn.scaled(divisor)?,
            ..self.clone()
        })
    }

    /// Smallest waveform length that survives every layer.
    pub fn min_samples(&self) -> usize {
        let need = self.tdnn.context_span() + 1;
        let mut len = 1;
        while self.encoder.shape_chain(len).map_or(true, |c| c.frames() < need) {
            len *= 2;
            if len > 1 << 24 {
                return usize::MAX;
            }
        }
        let (mut lo, mut hi) = (len / 2, len);
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.encoder.shape_chain(mid).is_some_and(|c| c.frames() >= need) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Outputs of one training example's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ExampleOutput {
    pub loss: Var,
    pub predicted: usize,
}

#[derive(Debug, Clone)]
pub struct SpeakerNet<T: Real> {
    pub config: ModelConfig,
    pub encoder: WaveformEncoder,
    pub aggregator: Aggregator,
    pub params: ParamStore<T>,
}

impl<T: Real> SpeakerNet<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.am_softmax.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[tag::INIT]);
        let encoder = WaveformEncoder::new(config.encoder.clone(), &mut params, &mut r)?;
        let aggregator = Aggregator::new(
            config.tdnn.clone(),
            encoder.output_channels(),
            config.n_classes,
            &mut params,
            &mut r,
        )?;
        Ok(Self {
            config,
            encoder,
            aggregator,
            params,
        })
    }

    /// Rebuilds the architecture for `config` and installs `tensors` by name.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameters, checkpoint has {}",
                net.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = net
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            let slot = net.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, architecture expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(net)
    }

    pub fn waveform<'p>(s: &mut Session<'p, T>, samples: &[f32]) -> Result<Var> {
        let data = samples.iter().map(|&v| T::lit(v as f64)).collect();
        Ok(s.input(Tensor::new(vec![1, samples.len()], data)?))
    }

    pub fn embedding_var(&self, s: &mut Session<'_, T>, samples: &[f32]) -> Result<Var> {
        let wave = Self::waveform(s, samples)?;
        let frames = self.encoder.forward(s, wave)?;
        let frames = self.aggregator.tdnn_forward(s, frames)?;
        let pooled = self.aggregator.stat_pool(s, frames)?;
        self.aggregator.embed(s, pooled)
    }

    /// Inference-mode embedding.
    pub fn embed(&self, samples: &[f32]) -> Result<Vec<f32>> {
        let mut s = Session::inference(&self.params);
        let e = self.embedding_var(&mut s, samples)?;
        let out = s.graph.value(e);
        out.check_finite("embedding")?;
        Ok(out.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Margin loss for one labelled example plus the cosine-argmax prediction.
    pub fn example_loss(&self, s: &mut Session<'_, T>, samples: &[f32], label: usize) -> Result<ExampleOutput> {
        let e = self.embedding_var(s, samples)?;
        let f = self.aggregator.classifier_features(s, e)?;
        let loss = self.aggregator.am_softmax_loss(s, f, &[label], self.config.am_softmax)?;
        let predicted = self.predict_from(s, f);
        Ok(ExampleOutput { loss, predicted })
    }

    fn predict_from(&self, s: &Session<'_, T>, features: Var) -> usize {
        let f = s.graph.value(features).data();
        let w = s.params().get(self.aggregator.class_weight).data();
        let cos = cosine_matrix(f, w, f.len());
        cos.iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (j, &c)| if c > best.1 { (j, c) } else { best })
            .0
    }

    /// Inference-mode class prediction.
    pub fn predict(&self, samples: &[f32]) -> Result<usize> {
        let mut s = Session::inference(&self.params);
        let e = self.embedding_var(&mut s, samples)?;
        let f = self.aggregator.classifier_features(&mut s, e)?;
        Ok(self.predict_from(&s, f))
    }
}
