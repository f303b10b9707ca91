//! Named parameters, forward sessions and the shared convolution block.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Real, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

/// Uniform in `±1/√fan_in`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// One forward pass: a graph plus lazily bound parameter leaves.
pub struct Session<'p, T: Real> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

impl<'p, T: Real> Session<'p, T> {
    /// Dropout off, no parameter gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            track_grads: false,
            training: false,
            rng: None,
        }
    }

    /// Dropout on (driven by `rng`), parameter gradients recorded.
    pub fn training(params: &'p ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Self {
            track_grads: true,
            training: true,
            rng: Some(rng),
            ..Self::inference(params)
        }
    }

    /// Dropout off but parameter gradients recorded.
    pub fn differentiable(params: &'p ParamStore<T>) -> Self {
        Self {
            track_grads: true,
            ..Self::inference(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => self.graph.dropout(x, rate, true, rng),
            _ => self.graph.dropout(x, rate, false, &mut rand::rngs::mock::StepRng::new(0, 0)),
        }
    }

    /// Gradients of every parameter bound in this session, by parameter index.
    pub fn param_grads(&self) -> Vec<Option<&Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v)))
            .collect()
    }
}

/// `activation(Norm(Dropout(Conv(x))))` with channel layer normalization.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: ParamId,
    pub shift: ParamId,
    pub stride: usize,
    pub dilation: usize,
    pub activation: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || dilation == 0 {
            return Err(Error::Config(format!("{name}: all conv dimensions must be positive")));
        }
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.conv.weight"),
            fan_in_uniform(&[out_channels, in_channels, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.conv.bias"), Tensor::zeros(&[out_channels]))?;
        let gain = store.add(format!("{name}.norm.gain"), Tensor::full(&[out_channels], T::one()))?;
        let shift = store.add(format!("{name}.norm.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            gain,
            shift,
            stride,
            dilation,
            activation,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.conv1d(x, w, Some(b), self.stride, self.dilation, &self.name)?;
        let y = s.dropout(y, dropout)?;
        let g = s.param(self.gain);
        let sh = s.param(self.shift);
        let y = s.graph.layer_norm_channels(y, g, sh, LAYER_NORM_EPS)?;
        Ok(s.graph.activation(y, self.activation))
    }

    pub fn kernel_size<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[2]
    }

    /// Receptive span of one output frame in input samples.
    pub fn span<T: Real>(&self, store: &ParamStore<T>) -> usize {
        (self.kernel_size(store) - 1) * self.dilation + 1
    }
}
