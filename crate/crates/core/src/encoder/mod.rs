//! Multi-scale waveform encoder.

mod config;

pub use config::{conv_len, BranchSpec, DownsampleSpec, EncoderConfig, ShapeChain, PRESET_NAMES};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, ConvBlock, ParamId, ParamStore, Session};
use crate::numerics::{Activation, Graph, Real, Tensor, Var};

/// `σ(W1·mean_t(X) + b1) ⊙ X`, one gate per channel.
pub fn recalibrate_frequency<T: Real>(g: &mut Graph<T>, x: Var, w1: Var, b1: Var) -> Result<Var> {
    let pooled = g.avgpool_time(x)?;
    let z = g.linear(pooled, w1, Some(b1))?;
    let gate = g.sigmoid(z);
    g.mul(x, gate)
}

/// `σ(w2ᵀ·X_t + b2) ⊙ X_t`, one gate per frame. `w2` is stored as `[1, F]`.
pub fn recalibrate_time<T: Real>(g: &mut Graph<T>, x: Var, w2: Var, b2: Var) -> Result<Var> {
    let z = g.linear(x, w2, Some(b2))?;
    let gate = g.sigmoid(z);
    g.mul(x, gate)
}

/// Max-pools each map by its factor, truncates to the last map's length and
/// stacks them along channels.
pub fn multilevel_aggregate<T: Real>(g: &mut Graph<T>, maps: &[Var], factors: &[usize]) -> Result<Var> {
    if maps.len() != factors.len() || maps.is_empty() {
        return Err(Error::Config(format!(
            "{} maps with {} pooling factors",
            maps.len(),
            factors.len()
        )));
    }
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    let last = g.value(*maps.last().unwrap()).shape()[1];
    let mut pooled = Vec::with_capacity(maps.len());
    for (i, (&m, &f)) in maps.iter().zip(factors).enumerate() {
        let p = if f > 1 { g.maxpool1d(m, f, f)? } else { m };
        let t = g.value(p).shape()[1];
        if t < last {
            return Err(Error::Config(format!(
                "map {i} pools to {t} frames with factor {f}, fewer than the final {last}"
            )));
        }
        pooled.push(g.narrow_time(p, last)?);
    }
    g.concat_rows(&pooled)
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub filter: ConvBlock,
    pub dm: ConvBlock,
}

#[derive(Debug, Clone, Copy)]
pub struct TfseParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct DownsampleBlock {
    pub conv: ConvBlock,
    pub tfse: Option<TfseParams>,
}

impl DownsampleBlock {
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let y = self.conv.forward(s, x, dropout)?;
        let Some(p) = self.tfse else { return Ok(y) };
        let (w1, b1, w2, b2) = (s.param(p.w1), s.param(p.b1), s.param(p.w2), s.param(p.b2));
        let y = recalibrate_frequency(&mut s.graph, y, w1, b1)?;
        recalibrate_time(&mut s.graph, y, w2, b2)
    }
}

/// Intermediate results of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Dimension-match outputs before truncation.
    pub branches: Vec<Var>,
    pub concat: Var,
    pub downsample: Vec<Var>,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct WaveformEncoder {
    pub config: EncoderConfig,
    pub branches: Vec<Branch>,
    pub blocks: Vec<DownsampleBlock>,
}

impl WaveformEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let relu = Activation::Relu;
        let mut branches = Vec::with_capacity(config.branches.len());
        for (i, b) in config.branches.iter().enumerate() {
            let name = format!("encoder.branch{i}");
            let filter = ConvBlock::new(store, &format!("{name}.filter"), 1, b.filter_channels, b.kernel, b.stride, 1, relu, rng)?;
            let dm = ConvBlock::new(
                store,
                &format!("{name}.dm"),
                b.filter_channels,
                b.dm_channels,
                b.dm_kernel,
                b.dm_stride,
                1,
                relu,
                rng,
            )?;
            branches.push(Branch { filter, dm });
        }
        let mut blocks = Vec::with_capacity(config.downsample_blocks.len());
        let mut cin = config.concat_channels();
        for (i, d) in config.downsample_blocks.iter().enumerate() {
            let name = format!("encoder.ds{i}");
            let conv = ConvBlock::new(store, &name, cin, d.channels, d.kernel, d.stride, 1, relu, rng)?;
            let tfse = if config.tfse_enabled {
                let f = d.channels;
                Some(TfseParams {
                    w1: store.add(format!("{name}.tfse.w1"), fan_in_uniform(&[f, f], f, rng))?,
                    b1: store.add(format!("{name}.tfse.b1"), Tensor::zeros(&[f]))?,
                    w2: store.add(format!("{name}.tfse.w2"), fan_in_uniform(&[1, f], f, rng))?,
                    b2: store.add(format!("{name}.tfse.b2"), Tensor::zeros(&[1]))?,
                })
            } else {
                None
            };
            blocks.push(DownsampleBlock { conv, tfse });
            cin = d.channels;
        }
        Ok(Self { config, branches, blocks })
    }

    /// Parallel branches, truncated to the shortest and concatenated.
    pub fn multi_scale_filter<T: Real>(&self, s: &mut Session<'_, T>, wave: Var) -> Result<(Vec<Var>, Var)> {
        let p = self.config.dropout_rate;
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let y = b.filter.forward(s, wave, p)?;
            outs.push(b.dm.forward(s, y, p)?);
        }
        let t = outs.iter().map(|&v| s.graph.value(v).shape()[1]).min().expect("at least one branch");
        let mut cut = Vec::with_capacity(outs.len());
        for &v in &outs {
            cut.push(s.graph.narrow_time(v, t)?);
        }
        let concat = if cut.len() == 1 { cut[0] } else { s.graph.concat_rows(&cut)? };
        Ok((outs, concat))
    }

    pub fn forward_traced<T: Real>(&self, s: &mut Session<'_, T>, wave: Var) -> Result<EncoderTrace> {
        let (branches, concat) = self.multi_scale_filter(s, wave)?;
        let mut x = concat;
        let mut downsample = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(s, x, self.config.dropout_rate)?;
            downsample.push(x);
        }
        let output = if self.config.multilevel_aggregation {
            multilevel_aggregate(&mut s.graph, &downsample, &self.config.aggregation_factors())?
        } else {
            x
        };
        Ok(EncoderTrace {
            branches,
            concat,
            downsample,
            output,
        })
    }

    /// `[1, L]` waveform to `[F_enc, T_enc]` frames.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, wave: Var) -> Result<Var> {
        Ok(self.forward_traced(s, wave)?.output)
    }

    pub fn output_channels(&self) -> usize {
        self.config.output_channels()
    }

    /// First-layer kernels per branch as `(label, filters)`.
    pub fn first_layer_filters<T: Real>(&self, store: &ParamStore<T>) -> Vec<(String, Vec<Vec<f64>>)> {
        self.branches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let w = store.get(b.filter.weight);
                let k = w.shape()[2];
                let filters = w.data().chunks(k).map(|f| f.iter().map(|v| v.as_f64()).collect()).collect();
                (format!("branch{i}"), filters)
            })
            .collect()
    }

    /// Replaces every first-layer kernel with a unit impulse.
    pub fn set_impulse_filters<T: Real>(&self, store: &mut ParamStore<T>) {
        for b in &self.branches {
            let w = store.get_mut(b.filter.weight);
            let k = w.shape()[2];
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = if i % k == 0 { T::one() } else { T::zero() };
            }
        }
    }
}

