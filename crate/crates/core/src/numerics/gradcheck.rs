//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward pass; it never consults the
//! recorded backward rules, so it can serve as an independent oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, Graph, Tensor, Var};
use crate::error::Result;

/// Worst-case discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
        self.failures += other.failures;
    }
}

/// Tolerances: an element passes if its absolute error is below `abs_floor`
/// or its relative error is below `rel_tol`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from leaves holding `inputs` (in order).
pub fn check<F>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > cfg.abs_floor {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= cfg.rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Outcome of the per-operation suite for one operation.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub shapes: usize,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for kinked activations.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `out` to a scalar through fixed random weights `w` (the last input).
fn weighted(g: &mut Graph<f64>, out: Var, w: Var) -> Result<Var> {
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn case(rng: &mut ChaCha8Rng, op: &str) -> Case {
    match op {
        "conv1d" => {
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (k, s, d) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..3));
            let span = (k - 1) * d + 1;
            let len = span + rng.gen_range(0..10);
            let lout = (len - span) / s + 1;
            let inputs = vec![
                uniform(rng, &[cin, len], -1.0, 1.0),
                uniform(rng, &[cout, cin, k], -1.0, 1.0),
                uniform(rng, &[cout], -1.0, 1.0),
                uniform(rng, &[cout, lout], -1.0, 1.0),
            ];
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), s, d, "gradcheck")?;
                weighted(g, y, v[3])
            };
            (inputs, Box::new(f))
        }
        "maxpool1d" => {
            let (c, w, s) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
            let len = w + rng.gen_range(0..10);
            let lout = (len - w) / s + 1;
            let inputs = vec![uniform(rng, &[c, len], -1.0, 1.0), uniform(rng, &[c, lout], -1.0, 1.0)];
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.maxpool1d(v[0], w, s)?;
                weighted(g, y, v[1])
            };
            (inputs, Box::new(f))
        }
        "avgpool" => {
            let (c, t) = (rng.gen_range(1..5), rng.gen_range(1..8));
            let inputs = vec![uniform(rng, &[c, t], -1.0, 1.0), uniform(rng, &[c, 1], -1.0, 1.0)];
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.avgpool_time(v[0])?;
                weighted(g, y, v[1])
            };
            (inputs, Box::new(f))
        }
        "layer_norm" => {
            let (c, t) = (rng.gen_range(2..6), rng.gen_range(1..6));
            let inputs = vec![
                uniform(rng, &[c, t], -1.0, 1.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
                uniform(rng, &[c, t], -1.0, 1.0),
            ];
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.layer_norm_channels(v[0], v[1], v[2], super::LAYER_NORM_EPS)?;
                weighted(g, y, v[3])
            };
            (inputs, Box::new(f))
        }
        "linear" => {
            let (din, dout) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let n = rng.gen_range(0..4);
            let x_shape = if n == 0 { vec![din] } else { vec![din, n] };
            let o_shape = if n == 0 { vec![dout] } else { vec![dout, n] };
            let inputs = vec![
                uniform(rng, &x_shape, -1.0, 1.0),
                uniform(rng, &[dout, din], -1.0, 1.0),
                uniform(rng, &[dout], -1.0, 1.0),
                uniform(rng, &o_shape, -1.0, 1.0),
            ];
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted(g, y, v[3])
            };
            (inputs, Box::new(f))
        }
        "relu" | "leaky_relu" | "sigmoid" => {
            let shape = [rng.gen_range(1..5), rng.gen_range(1..6)];
            let kind = match op {
                "relu" => Activation::Relu,
                "leaky_relu" => Activation::LeakyRelu(0.2),
                _ => Activation::Sigmoid,
            };
            let x = if op == "sigmoid" { uniform(rng, &shape, -4.0, 4.0) } else { off_zero(rng, &shape) };
            let inputs = vec![x, uniform(rng, &shape, -1.0, 1.0)];
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.activation(v[0], kind);
                weighted(g, y, v[1])
            };
            (inputs, Box::new(f))
        }
        "tfse_frequency" => {
            let (c, t) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let inputs = vec![
                uniform(rng, &[c, t], -1.0, 1.0),
                uniform(rng, &[c, c], -1.0, 1.0),
                uniform(rng, &[c], -1.0, 1.0),
                uniform(rng, &[c, t], -1.0, 1.0),
            ];
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let y = crate::encoder::recalibrate_frequency(g, v[0], v[1], v[2])?;
                weighted(g, y, v[3])
            };
            (inputs, Box::new(f))
        }
        "tfse_time" => {
            let (c, t) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let inputs = vec![
                uniform(rng, &[c, t], -1.0, 1.0),
                uniform(rng, &[1, c], -1.0, 1.0),
                uniform(rng, &[1], -1.0, 1.0),
                uniform(rng, &[c, t], -1.0, 1.0),
            ];
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let y = crate::encoder::recalibrate_time(g, v[0], v[1], v[2])?;
                weighted(g, y, v[3])
            };
            (inputs, Box::new(f))
        }
        "stat_pool" => {
            let (d, t) = (rng.gen_range(1..5), rng.gen_range(2..8));
            let inputs = vec![uniform(rng, &[d, t], -1.0, 1.0), uniform(rng, &[2 * d], -1.0, 1.0)];
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.stat_pool(v[0], crate::aggregator::STAT_POOL_EPS)?;
                weighted(g, y, v[1])
            };
            (inputs, Box::new(f))
        }
        "am_softmax" => {
            let (b, d, c) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let inputs = vec![uniform(rng, &[b, d], -1.0, 1.0), uniform(rng, &[c, d], -1.0, 1.0)];
            let f = move |g: &mut Graph<f64>, v: &[Var]| g.am_softmax(v[0], v[1], &labels, 30.0, 0.35);
            (inputs, Box::new(f))
        }
        other => unreachable!("unknown op {other}"),
    }
}

pub const SUITE_OPS: [&str; 12] = [
    "conv1d",
    "maxpool1d",
    "avgpool",
    "layer_norm",
    "linear",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tfse_frequency",
    "tfse_time",
    "stat_pool",
    "am_softmax",
];

/// Checks every differentiable operation on `shapes` random shapes each.
pub fn suite(seed: u64, shapes: usize, cfg: GradCheckConfig) -> Result<Vec<OpReport>> {
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    for (i, &op) in SUITE_OPS.iter().enumerate() {
        let mut rng = crate::rng::stream(seed, &[i as u64]);
        let mut report = GradCheckReport::default();
        for _ in 0..shapes {
            let (inputs, f) = case(&mut rng, op);
            report.merge(&check(&inputs, cfg, |g, v| f(g, v))?);
        }
        out.push(OpReport { op, shapes, report });
    }
    Ok(out)
}
