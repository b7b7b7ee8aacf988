//! Softmax classifiers with analytic gradients.
//!
//! Parameters are stored flat. Linear layout: `W (L×d)` row-major then
//! `b (L)`. MLP layout: `W1 (h×d)`, `b1 (h)`, `W2 (L×h)`, `b2 (L)`, with a
//! tanh hidden layer.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == "linear" {
            return Ok(Architecture::Linear);
        }
        if let Some(width) = text.strip_prefix("mlp") {
            let width = width.trim_start_matches([':', '-']);
            let hidden = if width.is_empty() {
                16
            } else {
                width.parse().map_err(|_| Error::config(format!("bad hidden width in arch `{text}`")))?
            };
            if hidden == 0 {
                return Err(Error::config("mlp hidden width must be positive"));
            }
            return Ok(Architecture::Mlp { hidden });
        }
        Err(Error::config(format!("unknown arch `{text}` (expected linear or mlp:<width>)")))
    }

    pub fn tag(&self) -> String {
        match self {
            Architecture::Linear => "linear".to_string(),
            Architecture::Mlp { hidden } => format!("mlp:{hidden}"),
        }
    }

    fn param_count(&self, dim: usize, classes: usize) -> usize {
        match *self {
            Architecture::Linear => classes * dim + classes,
            Architecture::Mlp { hidden } => hidden * dim + hidden + classes * hidden + classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    dim: usize,
    classes: usize,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture, dim: usize, classes: usize) -> Self {
        Self { arch, dim, classes, weights: vec![0.0; arch.param_count(dim, classes)] }
    }

    /// Uniform in `[-0.05, 0.05]`, seeded.
    pub fn init(arch: Architecture, dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "model-init", 0);
        let n = arch.param_count(dim, classes);
        let weights = (0..n).map(|_| rng.gen_range(-0.05..=0.05)).collect();
        Self { arch, dim, classes, weights }
    }

    pub fn from_weights(arch: Architecture, dim: usize, classes: usize, weights: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count(dim, classes);
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "{} expects {expected} weights for d = {dim}, L = {classes}, got {}",
                arch.tag(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::domain("model weights must be finite"));
        }
        Ok(Self { arch, dim, classes, weights })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::shape(format!("model expects {} features, got {}", self.dim, features.len())));
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        self.check_input(&ex.features)?;
        if ex.label >= self.classes {
            return Err(Error::shape(format!("label {} out of range for {} classes", ex.label, self.classes)));
        }
        Ok(())
    }

    /// Hidden activations (MLP only) and logits.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, l) = (self.dim, self.classes);
        match self.arch {
            Architecture::Linear => {
                let (w, b) = self.weights.split_at(l * d);
                (Vec::new(), affine(w, b, x))
            }
            Architecture::Mlp { hidden: h } => {
                let (w1, rest) = self.weights.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(l * h);
                let mut a = affine(w1, b1, x);
                a.iter_mut().for_each(|v| *v = v.tanh());
                let logits = affine(w2, b2, &a);
                (a, logits)
            }
        }
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        Ok(self.forward(features).1)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(k, bk)| bk + w[k * n..(k + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of logits against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn per_example_loss(params: &ModelParams, ex: &Example) -> Result<f64> {
    params.check_example(ex)?;
    Ok(cross_entropy(&params.forward(&ex.features).1, ex.label))
}

/// Gradient of [`per_example_loss`] with respect to the flat weights.
pub fn loss_gradient(params: &ModelParams, ex: &Example) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.num_params()];
    accumulate_gradient(params, ex, 1.0, &mut grad)?;
    Ok(grad)
}

/// Adds `scale · ∇ℓ(ex)` into `grad` and returns the loss.
pub fn accumulate_gradient(params: &ModelParams, ex: &Example, scale: f64, grad: &mut [f64]) -> Result<f64> {
    params.check_example(ex)?;
    if grad.len() != params.num_params() {
        return Err(Error::shape("gradient buffer has the wrong length"));
    }
    let (d, l) = (params.dim, params.classes);
    let x = &ex.features;
    let (hidden, logits) = params.forward(x);
    let loss = cross_entropy(&logits, ex.label);
    let mut delta = softmax(&logits);
    delta[ex.label] -= 1.0;
    match params.arch {
        Architecture::Linear => {
            let (gw, gb) = grad.split_at_mut(l * d);
            for k in 0..l {
                let s = scale * delta[k];
                gb[k] += s;
                for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += s * xi;
                }
            }
        }
        Architecture::Mlp { hidden: h } => {
            let w2 = &params.weights[h * d + h..h * d + h + l * h];
            let (gw1, rest) = grad.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(l * h);
            let mut back = vec![0.0; h];
            for k in 0..l {
                let s = scale * delta[k];
                gb2[k] += s;
                for j in 0..h {
                    gw2[k * h + j] += s * hidden[j];
                    back[j] += s * w2[k * h + j];
                }
            }
            for j in 0..h {
                let s = back[j] * (1.0 - hidden[j] * hidden[j]);
                gb1[j] += s;
                for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += s * xi;
                }
            }
        }
    }
    Ok(loss)
}

pub fn predict(params: &ModelParams, features: &[f64]) -> Result<usize> {
    Ok(argmax(&params.logits(features)?))
}

const CHECKPOINT_MAGIC: &str = "advshift-checkpoint v1";

impl ModelParams {
    /// Text checkpoint: header lines then one weight per line in shortest
    /// round-trip decimal form.
    pub fn to_checkpoint_string(&self) -> String {
        let hidden = match self.arch {
            Architecture::Linear => 0,
            Architecture::Mlp { hidden } => hidden,
        };
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "arch {}", self.arch.tag());
        let _ = writeln!(out, "input_dim {}", self.dim);
        let _ = writeln!(out, "hidden {hidden}");
        let _ = writeln!(out, "classes {}", self.classes);
        let _ = writeln!(out, "weights {}", self.weights.len());
        for w in &self.weights {
            let _ = writeln!(out, "{w:?}");
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l.trim()));
        let parse_err = |line: u64, message: String| Error::Parse { line, message };
        match lines.next() {
            Some((_, CHECKPOINT_MAGIC)) => {}
            Some((n, other)) => return Err(parse_err(n, format!("expected `{CHECKPOINT_MAGIC}`, found `{other}`"))),
            None => return Err(parse_err(1, "empty checkpoint".into())),
        }
        let mut field = |key: &str| -> Result<(u64, String)> {
            let (n, line) = lines.next().ok_or_else(|| parse_err(0, format!("missing `{key}` line")))?;
            let value = line
                .strip_prefix(key)
                .map(str::trim)
                .ok_or_else(|| parse_err(n, format!("expected `{key} <value>`, found `{line}`")))?;
            Ok((n, value.to_string()))
        };
        let (n_arch, arch) = field("arch")?;
        let arch = Architecture::parse(&arch).map_err(|e| parse_err(n_arch, e.to_string()))?;
        let mut count = |key: &str| -> Result<usize> {
            let (n, v) = field(key)?;
            v.parse().map_err(|_| parse_err(n, format!("`{key}` must be an integer, found `{v}`")))
        };
        let dim = count("input_dim")?;
        let _hidden = count("hidden")?;
        let classes = count("classes")?;
        let n_weights = count("weights")?;
        let mut weights = Vec::with_capacity(n_weights);
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let w: f64 = line.parse().map_err(|_| parse_err(n, format!("bad weight `{line}`")))?;
            weights.push(w);
        }
        if weights.len() != n_weights {
            return Err(parse_err(0, format!("header declares {n_weights} weights, found {}", weights.len())));
        }
        Self::from_weights(arch, dim, classes, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}
