//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]. Node creation order is a
//! topological order, so [`Graph::backward`] walks the tape once in reverse.
//! Leaves created with `requires_grad` accumulate their gradients across
//! repeated backward calls until [`Graph::zero_grad`] is called.
//!
//! Layouts are channels-first: a feature map is `[F, T]`, a conv kernel is
//! `[C_out, C_in, K]`, a dense weight is `[D_out, D_in]`.

use rand::Rng;

use crate::error::{Error, Result};

use super::real::{gemm, MatRef};
use super::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a broadcast operand of [`Graph::mul`] lines up with `[F, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[F, 1]`: one value per row, repeated across time.
    Rows,
    /// `[1, T]`: one value per column, repeated across channels.
    Cols,
}

enum Op<T> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        /// im2col buffer `[C_in·K, L_out]`, kept only when the weight needs a gradient.
        cols: Vec<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPoolTime {
        input: Var,
    },
    Relu {
        input: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Mul {
        a: Var,
        b: Var,
        mode: Broadcast,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    NarrowTime {
        input: Var,
    },
    StatPool {
        input: Var,
        mean: Vec<T>,
        std: Vec<T>,
    },
    AmSoftmax {
        input: Var,
        weight: Var,
        labels: Vec<usize>,
        scale: T,
        xhat: Vec<T>,
        xnorm: Vec<T>,
        what: Vec<T>,
        wnorm: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Elementwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---- operations -------------------------------------------------------

    /// Valid-mode strided, dilated 1-d convolution of `[C_in, L]` by
    /// `[C_out, C_in, K]`, giving `[C_out, (L - span) / stride + 1]` with
    /// `span = (K - 1)·dilation + 1`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        layer: &str,
    ) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Config(format!(
                "{layer}: stride and dilation must be positive"
            )));
        }
        let (cin, len) = match self.value(input).shape() {
            [c, l] => (*c, *l),
            s => return Err(Error::Shape(format!("{layer}: conv input must be [C, L], got {s:?}"))),
        };
        let (cout, wcin, k) = match self.value(weight).shape() {
            [o, i, k] => (*o, *i, *k),
            s => return Err(Error::Shape(format!("{layer}: conv kernel must be [C_out, C_in, K], got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "{layer}: kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "{layer}: bias shape {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let span = (k - 1) * dilation + 1;
        if len < span {
            return Err(Error::InputTooShort {
                layer: layer.to_string(),
                len,
                required: span,
            });
        }
        let lout = (len - span) / stride + 1;
        let x = self.value(input).data();
        let rows = cin * k;
        let mut cols = vec![T::zero(); rows * lout];
        for ci in 0..cin {
            for kk in 0..k {
                let base = ci * len + kk * dilation;
                let dst = &mut cols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
                if stride == 1 {
                    dst.copy_from_slice(&x[base..base + lout]);
                } else {
                    for (t, d) in dst.iter_mut().enumerate() {
                        *d = x[base + t * stride];
                    }
                }
            }
        }
        let mut out = vec![T::zero(); cout * lout];
        gemm(
            MatRef::new(self.value(weight).data(), cout, rows),
            MatRef::new(&cols, rows, lout),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, &bias) in out.chunks_mut(lout).zip(bv) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let keep_cols = self.requires_grad(weight);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let value = Tensor::new(vec![cout, lout], out)?;
        Ok(self.push(
            value,
            &inputs,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                dilation,
                cols: if keep_cols { cols } else { Vec::new() },
            },
        ))
    }

    /// Per-channel windowed maximum over time. Ties resolve to the first index.
    pub fn maxpool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::Config("maxpool window and stride must be positive".into()));
        }
        let (c, len) = self.dims2(input)?;
        if len < window {
            return Err(Error::InputTooShort {
                layer: "maxpool1d".into(),
                len,
                required: window,
            });
        }
        let lout = (len - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * lout);
        let mut argmax = Vec::with_capacity(c * lout);
        for ch in 0..c {
            let row = &x[ch * len..(ch + 1) * len];
            for t in 0..lout {
                let start = t * stride;
                let mut best = start;
                for i in start + 1..start + window {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(ch * len + best);
            }
        }
        let value = Tensor::new(vec![c, lout], out)?;
        Ok(self.push(value, &[input], Op::MaxPool { input, argmax }))
    }

    /// Mean over the time axis: `[F, T] -> [F, 1]`.
    pub fn avgpool_time(&mut self, input: Var) -> Result<Var> {
        let (f, t) = self.dims2(input)?;
        if t == 0 {
            return Err(Error::EmptySequence("avgpool_time".into()));
        }
        let inv = T::one() / T::lit(t as f64);
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(t)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![f, 1], out)?;
        Ok(self.push(value, &[input], Op::AvgPoolTime { input }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::LeakyRelu(s) => self.leaky_relu(input, s),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.map(input, |x| x.max(T::zero()));
        self.push(v, &[input], Op::Relu { input })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let v = self.map(input, |x| if x > T::zero() { x } else { x * slope });
        self.push(v, &[input], Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let v = self.map(input, sigmoid);
        self.push(v, &[input], Op::Sigmoid { input })
    }

    fn map(&self, input: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(input);
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    /// Normalizes every frame (column) of `[F, T]` over its `F` channels, then
    /// applies the per-channel affine `gain`, `bias`. `eps` sits inside the root.
    pub fn layer_norm_channels(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (f, t) = self.dims2(input)?;
        if self.value(gain).len() != f || self.value(bias).len() != f {
            return Err(Error::Shape(format!(
                "layer norm over {f} channels given gain {:?} / bias {:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let x = self.value(input).data();
        let inv_f = T::one() / T::lit(f as f64);
        let mut mean = vec![T::zero(); t];
        for row in x.chunks(t) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_f);
        let mut var = vec![T::zero(); t];
        for row in x.chunks(t) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_f + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); f * t];
        let mut out = vec![T::zero(); f * t];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for ch in 0..f {
            let row = &x[ch * t..(ch + 1) * t];
            let xh = &mut xhat[ch * t..(ch + 1) * t];
            let o = &mut out[ch * t..(ch + 1) * t];
            for i in 0..t {
                xh[i] = (row[i] - mean[i]) * inv_std[i];
                o[i] = xh[i] * g[ch] + b[ch];
            }
        }
        let shape = self.value(input).shape().to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[input, gain, bias],
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// `weight · input + bias` with `input` a vector `[D_in]` or a column
    /// batch `[D_in, N]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let in_shape = self.value(input).shape().to_vec();
        let (din, n) = self.dims2(input)?;
        let (dout, wdin) = match self.value(weight).shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Shape(format!("linear weight must be [D_out, D_in], got {s:?}"))),
        };
        if wdin != din {
            return Err(Error::Shape(format!(
                "linear weight expects {wdin} inputs, got {din}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != dout {
                return Err(Error::Shape(format!(
                    "linear bias has {} entries, expected {dout}",
                    self.value(b).len()
                )));
            }
        }
        let mut out = vec![T::zero(); dout * n];
        gemm(
            MatRef::new(self.value(weight).data(), dout, din),
            MatRef::new(self.value(input).data(), din, n),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(n).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = if in_shape.len() == 1 { vec![dout] } else { vec![dout, n] };
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, &inputs, Op::Linear { input, weight, bias }))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(input).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = self.value(input);
        let out = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, &[input], Op::Dropout { input, mask }))
    }

    /// Elementwise product of `a: [F, T]` with `b` of shape `[F, T]`, `[F, 1]`
    /// (or `[F]`), or `[1, T]`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (f, t) = self.dims2(a)?;
        let (bf, bt) = self.dims2(b)?;
        let mode = if (bf, bt) == (f, t) {
            Broadcast::Same
        } else if (bf, bt) == (f, 1) {
            Broadcast::Rows
        } else if (bf, bt) == (1, t) {
            Broadcast::Cols
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} against {:?}",
                self.value(b).shape(),
                self.value(a).shape()
            )));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); f * t];
        for r in 0..f {
            for c in 0..t {
                let bb = match mode {
                    Broadcast::Same => bv[r * t + c],
                    Broadcast::Rows => bv[r],
                    Broadcast::Cols => bv[c],
                };
                out[r * t + c] = av[r * t + c] * bb;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b, mode }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let v = self.map(input, |x| x * factor);
        self.push(v, &[input], Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[input], Op::Sum { input })
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s = self.value(input).sum_squares();
        self.push(Tensor::scalar(s), &[input], Op::SumSquares { input })
    }

    /// Stacks `[F_i, T]` maps along channels into `[ΣF_i, T]`.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (_, t) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let (f, vt) = self.dims2(v)?;
            if vt != t {
                return Err(Error::Shape(format!(
                    "concat along channels needs equal lengths, got {t} and {vt}"
                )));
            }
            rows += f;
            out.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::new(vec![rows, t], out)?;
        Ok(self.push(
            value,
            inputs,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Keeps the first `len` frames of `[F, T]`.
    pub fn narrow_time(&mut self, input: Var, len: usize) -> Result<Var> {
        let (f, t) = self.dims2(input)?;
        if len == 0 || len > t {
            return Err(Error::Shape(format!("cannot narrow {t} frames to {len}")));
        }
        if len == t {
            return Ok(input);
        }
        let x = self.value(input).data();
        let out = x.chunks(t).flat_map(|row| row[..len].iter().copied()).collect();
        let value = Tensor::new(vec![f, len], out)?;
        Ok(self.push(value, &[input], Op::NarrowTime { input }))
    }

    /// Per-channel mean and population standard deviation over time,
    /// `[D, T] -> [2D]`.
    pub fn stat_pool(&mut self, input: Var, eps: f64) -> Result<Var> {
        let (d, t) = self.dims2(input)?;
        if t == 0 {
            return Err(Error::EmptySequence("stat_pool".into()));
        }
        let inv_t = T::one() / T::lit(t as f64);
        let eps = T::lit(eps);
        let x = self.value(input).data();
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        for row in x.chunks(t) {
            let m = row.iter().copied().sum::<T>() * inv_t;
            let v = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_t;
            mean.push(m);
            std.push((v + eps).sqrt());
        }
        let mut out = mean.clone();
        out.extend_from_slice(&std);
        let value = Tensor::vector(out);
        Ok(self.push(value, &[input], Op::StatPool { input, mean, std }))
    }

    /// Mean additive-margin softmax loss.
    ///
    /// `input` holds one feature row per example (`[B, D]`, or `[D]` for a
    /// single example) and `weight` one row per class (`[C, D]`). Both are
    /// length-normalized, so logits are `scale·cos θ_j`, with `scale·margin`
    /// subtracted from the labelled class.
    pub fn am_softmax(
        &mut self,
        input: Var,
        weight: Var,
        labels: &[usize],
        scale: f64,
        margin: f64,
    ) -> Result<Var> {
        let (b, d) = match self.value(input).shape() {
            [d] => (1, *d),
            [b, d] => (*b, *d),
            s => return Err(Error::Shape(format!("am-softmax features must be [B, D], got {s:?}"))),
        };
        let (c, wd) = match self.value(weight).shape() {
            [c, d] => (*c, *d),
            s => return Err(Error::Shape(format!("am-softmax class weights must be [C, D], got {s:?}"))),
        };
        if wd != d {
            return Err(Error::Shape(format!(
                "feature dimension {d} does not match class weight dimension {wd}"
            )));
        }
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        if scale <= 0.0 {
            return Err(Error::Config(format!("am-softmax scale must be positive, got {scale}")));
        }
        let (xhat, xnorm) = normalize_rows(self.value(input).data(), b, d);
        let (what, wnorm) = normalize_rows(self.value(weight).data(), c, d);
        let mut cos = vec![T::zero(); b * c];
        gemm(MatRef::new(&xhat, b, d), MatRef::new(&what, c, d).t(), &mut cos, false);
        let s = T::lit(scale);
        let sm = T::lit(scale * margin);
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<T> = (0..c)
                .map(|j| {
                    let v = s * cos[i * c + j];
                    if j == y {
                        v - sm
                    } else {
                        v
                    }
                })
                .collect();
            let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = z.iter().map(|&v| (v - zmax).exp()).sum();
            total += if z[y] == zmax {
                // keeps tiny losses representable when the label dominates
                let rest: T = (0..c).filter(|&j| j != y).map(|j| (z[j] - zmax).exp()).sum();
                rest.ln_1p()
            } else {
                zmax - z[y] + denom.ln()
            };
            for j in 0..c {
                probs[i * c + j] = (z[j] - zmax).exp() / denom;
            }
        }
        let loss = total / T::lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            &[input, weight],
            Op::AmSoftmax {
                input,
                weight,
                labels: labels.to_vec(),
                scale: s,
                xhat,
                xnorm,
                what,
                wnorm,
                probs,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf reachable
    /// from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let $d = grads[v.0]
                        .get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                dilation,
                cols,
            } => {
                let (cout, lout) = (node.value.shape()[0], node.value.shape()[1]);
                let wshape = nodes[weight.0].value.shape();
                let (cin, k) = (wshape[1], wshape[2]);
                let rows = cin * k;
                with_grad!(*weight, |dw| {
                    gemm(
                        MatRef::new(g, cout, lout),
                        MatRef::new(cols, rows, lout).t(),
                        dw,
                        true,
                    );
                });
                if let Some(b) = bias {
                    with_grad!(*b, |db| {
                        for (d, row) in db.iter_mut().zip(g.chunks(lout)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    });
                }
                with_grad!(*input, |dx| {
                    let len = nodes[input.0].value.shape()[1];
                    let mut dcols = vec![T::zero(); rows * lout];
                    gemm(
                        MatRef::new(nodes[weight.0].value.data(), cout, rows).t(),
                        MatRef::new(g, cout, lout),
                        &mut dcols,
                        false,
                    );
                    for ci in 0..cin {
                        for kk in 0..k {
                            let base = ci * len + kk * dilation;
                            let src = &dcols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
                            if *stride == 1 {
                                dx[base..base + lout]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, &v)| *d += v);
                            } else {
                                for (t, &v) in src.iter().enumerate() {
                                    dx[base + t * stride] += v;
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                with_grad!(*input, |dx| {
                    for (&j, &v) in argmax.iter().zip(g) {
                        dx[j] += v;
                    }
                });
            }
            Op::AvgPoolTime { input } => {
                let t = nodes[input.0].value.shape()[1];
                let inv = T::one() / T::lit(t as f64);
                with_grad!(*input, |dx| {
                    for (row, &gv) in dx.chunks_mut(t).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::Relu { input } => {
                let x = nodes[input.0].value.data();
                with_grad!(*input, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LeakyRelu { input, slope } => {
                let x = nodes[input.0].value.data();
                with_grad!(*input, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        *d += if xv > T::zero() { gv } else { gv * *slope };
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                with_grad!(*input, |dx| {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                        *d += gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (f, t) = nodes[input.0].value.dims2().expect("rank checked");
                let gv = nodes[gain.0].value.data();
                with_grad!(*gain, |dg| {
                    for ch in 0..f {
                        dg[ch] += (0..t).map(|i| g[ch * t + i] * xhat[ch * t + i]).sum::<T>();
                    }
                });
                with_grad!(*bias, |db| {
                    for (d, row) in db.iter_mut().zip(g.chunks(t)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                });
                with_grad!(*input, |dx| {
                    let mut s1 = vec![T::zero(); t];
                    let mut s2 = vec![T::zero(); t];
                    for ch in 0..f {
                        for i in 0..t {
                            let dxh = g[ch * t + i] * gv[ch];
                            s1[i] += dxh;
                            s2[i] += dxh * xhat[ch * t + i];
                        }
                    }
                    let fl = T::lit(f as f64);
                    let inv_f = T::one() / fl;
                    for ch in 0..f {
                        for i in 0..t {
                            let dxh = g[ch * t + i] * gv[ch];
                            dx[ch * t + i] +=
                                inv_std[i] * inv_f * (fl * dxh - s1[i] - xhat[ch * t + i] * s2[i]);
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (din, n) = nodes[input.0].value.dims2().expect("rank checked");
                let dout = nodes[weight.0].value.shape()[0];
                with_grad!(*weight, |dw| {
                    gemm(
                        MatRef::new(g, dout, n),
                        MatRef::new(nodes[input.0].value.data(), din, n).t(),
                        dw,
                        true,
                    );
                });
                if let Some(b) = bias {
                    with_grad!(*b, |db| {
                        for (d, row) in db.iter_mut().zip(g.chunks(n)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    });
                }
                with_grad!(*input, |dx| {
                    gemm(
                        MatRef::new(nodes[weight.0].value.data(), dout, din).t(),
                        MatRef::new(g, dout, n),
                        dx,
                        true,
                    );
                });
            }
            Op::Dropout { input, mask } => {
                with_grad!(*input, |dx| {
                    for ((d, &m), &gv) in dx.iter_mut().zip(mask).zip(g) {
                        *d += gv * m;
                    }
                });
            }
            Op::Mul { a, b, mode } => {
                let (f, t) = nodes[a.0].value.dims2().expect("rank checked");
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let bat = |r: usize, c: usize| match mode {
                    Broadcast::Same => bv[r * t + c],
                    Broadcast::Rows => bv[r],
                    Broadcast::Cols => bv[c],
                };
                with_grad!(*a, |da| {
                    for r in 0..f {
                        for c in 0..t {
                            da[r * t + c] += g[r * t + c] * bat(r, c);
                        }
                    }
                });
                with_grad!(*b, |db| {
                    for r in 0..f {
                        for c in 0..t {
                            let v = g[r * t + c] * av[r * t + c];
                            match mode {
                                Broadcast::Same => db[r * t + c] += v,
                                Broadcast::Rows => db[r] += v,
                                Broadcast::Cols => db[c] += v,
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                with_grad!(*a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                });
                with_grad!(*b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                });
            }
            Op::Scale { input, factor } => {
                with_grad!(*input, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor);
                });
            }
            Op::Sum { input } => {
                with_grad!(*input, |dx| {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            Op::SumSquares { input } => {
                let x = nodes[input.0].value.data();
                let two = T::lit(2.0);
                with_grad!(*input, |dx| {
                    dx.iter_mut().zip(x).for_each(|(d, &v)| *d += two * v * g[0]);
                });
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.len();
                    with_grad!(v, |dx| {
                        dx.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &gv)| *d += gv);
                    });
                    offset += n;
                }
            }
            Op::NarrowTime { input } => {
                let t = nodes[input.0].value.shape()[1];
                let len = node.value.shape()[1];
                with_grad!(*input, |dx| {
                    for (drow, grow) in dx.chunks_mut(t).zip(g.chunks(len)) {
                        drow[..len].iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::StatPool { input, mean, std } => {
                let (d, t) = nodes[input.0].value.dims2().expect("rank checked");
                let x = nodes[input.0].value.data();
                let inv_t = T::one() / T::lit(t as f64);
                with_grad!(*input, |dx| {
                    for ch in 0..d {
                        let gm = g[ch] * inv_t;
                        let gs = g[d + ch] * inv_t / std[ch];
                        for i in 0..t {
                            dx[ch * t + i] += gm + gs * (x[ch * t + i] - mean[ch]);
                        }
                    }
                });
            }
            Op::AmSoftmax {
                input,
                weight,
                labels,
                scale,
                xhat,
                xnorm,
                what,
                wnorm,
                probs,
            } => {
                let b = labels.len();
                let d = nodes[input.0].value.len() / b;
                let c = wnorm.len();
                // dL/dcos = scale · (p − onehot) / B
                let coef = g[0] * *scale / T::lit(b as f64);
                let mut dcos = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dcos[i * c + y] -= T::one();
                }
                dcos.iter_mut().for_each(|v| *v *= coef);
                with_grad!(*input, |dx| {
                    let mut dxh = vec![T::zero(); b * d];
                    gemm(MatRef::new(&dcos, b, c), MatRef::new(what, c, d), &mut dxh, false);
                    unnormalize_grad(&dxh, xhat, xnorm, d, dx);
                });
                with_grad!(*weight, |dw| {
                    let mut dwh = vec![T::zero(); c * d];
                    gemm(MatRef::new(&dcos, b, c).t(), MatRef::new(xhat, b, d), &mut dwh, false);
                    unnormalize_grad(&dwh, what, wnorm, d, dw);
                });
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn normalize_rows<T: Real>(x: &[T], rows: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let floor = T::lit(NORM_FLOOR);
    let mut out = Vec::with_capacity(rows * d);
    let mut norms = Vec::with_capacity(rows);
    for row in x.chunks(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
        out.extend(row.iter().map(|&v| v / n));
        norms.push(n);
    }
    (out, norms)
}

/// Chain rule through `u = v / ‖v‖`: `dv = (du − u (u·du)) / ‖v‖`, accumulated.
fn unnormalize_grad<T: Real>(du: &[T], u: &[T], norms: &[T], d: usize, dv: &mut [T]) {
    for (((dur, ur), &n), dvr) in du
        .chunks(d)
        .zip(u.chunks(d))
        .zip(norms)
        .zip(dv.chunks_mut(d))
    {
        let proj: T = dur.iter().zip(ur).map(|(&a, &b)| a * b).sum();
        for ((o, &a), &b) in dvr.iter_mut().zip(dur).zip(ur) {
            *o += (a - b * proj) / n;
        }
    }
}

/// Cosine of every feature row against every class row, `[B, C]` row-major.
/// Used for predictions; not recorded on a graph.
pub fn cosine_matrix<T: Real>(features: &[T], classes: &[T], d: usize) -> Vec<T> {
    let b = features.len() / d;
    let c = classes.len() / d;
    let (xh, _) = normalize_rows(features, b, d);
    let (wh, _) = normalize_rows(classes, c, d);
    let mut cos = vec![T::zero(); b * c];
    gemm(MatRef::new(&xh, b, d), MatRef::new(&wh, c, d).t(), &mut cos, false);
    cos
}
