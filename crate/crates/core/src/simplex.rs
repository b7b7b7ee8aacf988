//! Probability-simplex algebra.
//!
//! [`LabelDistribution`] is a validated point on the L-simplex. Everything
//! else in the crate (adversary weights, label marginals, worst-case
//! witnesses) is stored as one.
//!
//! KL convention: `kl_divergence(p, q) = Σ p(i) log(p(i)/q(i))`, i.e. the
//! first argument is the distribution being integrated against.

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`LabelDistribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Entries below this are treated as zero by operations that need interior
/// points (logs of the distribution).
pub const INTERIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    /// Validates and wraps `probs`. Entries must be finite, non-negative and
    /// sum to one within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("distribution must have at least one class"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::domain(format!("entry {i} = {} is negative or not finite", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::domain(format!("entries sum to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes > 0, "uniform distribution needs at least one class");
        Self { probs: vec![1.0 / num_classes as f64; num_classes] }
    }

    pub fn point_mass(num_classes: usize, class: usize) -> Self {
        assert!(class < num_classes, "class {class} out of range");
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self { probs }
    }

    /// Renormalises an already nearly-normalised vector without validation.
    /// Callers guarantee non-negative finite entries with positive sum.
    pub(crate) fn from_unnormalized(mut probs: Vec<f64>) -> Self {
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn min_entry(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_interior(&self) -> bool {
        self.min_entry() >= INTERIOR_FLOOR
    }

    /// Errors unless every entry is at least [`INTERIOR_FLOOR`].
    pub fn check_interior(&self, what: &str) -> Result<()> {
        match self.probs.iter().position(|&p| p < INTERIOR_FLOOR) {
            Some(i) => {
                Err(Error::domain(format!("{what} is on the simplex boundary (entry {i} = {:e})", self.probs[i])))
            }
            None => Ok(()),
        }
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(values).map(|(p, v)| p * v).sum()
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum()
    }
}

impl AsRef<[f64]> for LabelDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p log(p/q)` with `0 log(0/q) = 0`.
///
/// Fails when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    same_len(p.len(), q.len(), "kl_divergence")?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::domain(format!("KL is infinite: p({i}) = {pi:e} but q({i}) = 0")));
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave tiny negatives for p ≈ q.
    Ok(total.max(0.0))
}

/// `w / Σw` for strictly positive finite weights.
pub fn normalize(weights: &[f64]) -> Result<LabelDistribution> {
    if weights.is_empty() {
        return Err(Error::domain("cannot normalize an empty weight vector"));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::domain(format!("weight {i} = {} must be positive and finite", weights[i])));
    }
    Ok(LabelDistribution::from_unnormalized(weights.to_vec()))
}

/// Normalises `exp(log_weights)` with the max subtracted first.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<LabelDistribution> {
    if log_weights.is_empty() {
        return Err(Error::domain("cannot normalize an empty weight vector"));
    }
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::domain("log-weights contain NaN or +inf"));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::domain("all log-weights are -inf"));
    }
    Ok(LabelDistribution::from_unnormalized(log_weights.iter().map(|w| (w - max).exp()).collect()))
}

/// `(1 − ε) p + ε/L`. Every entry of the result is at least `ε/L`.
pub fn mix_with_uniform(p: &LabelDistribution, epsilon: f64) -> Result<LabelDistribution> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::domain(format!("epsilon = {epsilon} must lie in [0, 1)")));
    }
    if epsilon == 0.0 {
        return Ok(p.clone());
    }
    let floor = epsilon / p.len() as f64;
    Ok(LabelDistribution { probs: p.probs.iter().map(|x| (1.0 - epsilon) * x + floor).collect() })
}

/// Euclidean projection onto the simplex (sort-and-threshold).
pub fn euclidean_project_simplex(v: &[f64]) -> Result<LabelDistribution> {
    if v.is_empty() {
        return Err(Error::domain("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("projection input contains non-finite entries"));
    }
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let probs: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    Ok(LabelDistribution::from_unnormalized(probs))
}

/// Distribution proportional to `p(i) · exp(scores(i) / temperature)`.
pub fn exponential_tilt(p: &LabelDistribution, scores: &[f64], temperature: f64) -> Result<LabelDistribution> {
    same_len(p.len(), scores.len(), "exponential_tilt")?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::domain(format!("tilt temperature {temperature} must be positive and finite")));
    }
    p.check_interior("tilt base distribution")?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("tilt scores must be finite"));
    }
    let logw: Vec<f64> = p.probs.iter().zip(scores).map(|(pi, s)| pi.ln() + s / temperature).collect();
    normalize_log_weights(&logw)
}
