//! The adversary player.
//!
//! The adversary holds a label distribution `pi` and an online estimate
//! `p_emp` of the training label marginal. Each step it
//!
//! 1. forms an importance-weighted, clipped per-class loss estimate
//!    ([`adversary_gradient`]),
//! 2. switches the Lagrange penalty on or off depending on whether
//!    `KL(pi ‖ p_emp)` exceeds the radius ([`lagrange_alpha`]),
//! 3. takes the closed-form KL-proximal ascent step
//!    ([`mirror_proximal_update`]).
//!
//! The proximal problem solved in step 3 is
//!
//! ```text
//! argmin_{π ∈ Δ}  α/(2λ)·KL(π, p_emp) + 1/(2λ)·KL(π, π_t) − ⟨g, π⟩
//! ```
//!
//! whose stationarity condition gives
//!
//! ```text
//! π ∝ (π_t · p_emp^α)^{1/(1+α)} · exp(η g),   η = 2λ / (1 + α).
//! ```
//!
//! Published variants of this step carry `η = 1/((γ + 1/2λ)(1+α))` or
//! `η = 1/((2γ + 1/λ)(1+α))`; both are off by a constant factor from the
//! minimiser of the objective above (checked against a brute-force simplex
//! grid in the test suite).

use crate::error::{Error, Result};
use crate::simplex::{kl_divergence, mix_with_uniform, normalize_log_weights, LabelDistribution};

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryConfig {
    /// Radius of the KL ball around `p_emp`, in nats.
    pub r: f64,
    /// Lagrange penalty weight applied when the radius is exceeded.
    pub gamma_c: f64,
    /// Proximal step scale; the KL proximity term is weighted by `1/(2λ)`.
    pub lambda: f64,
    /// Uniform-mixture stabiliser applied after every update.
    pub epsilon: f64,
    /// Per-example loss clip used for the adversarial gradient only.
    pub clip: f64,
    /// EMA decay for the label-marginal estimate. `1.0` freezes it.
    pub beta: f64,
    /// Replaces the derived step `2λ/(1+α)` by a fixed coefficient.
    pub eta_pi: Option<f64>,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self { r: 0.1, gamma_c: 10.0, lambda: 0.05, epsilon: 1e-3, clip: 2.0, beta: 0.999, eta_pi: None }
    }
}

impl AdversaryConfig {
    /// Sets `λ = 1/(2γ_c)` so that `2γ_cλ = 1`.
    pub fn with_unit_penalty_product(mut self) -> Self {
        self.lambda = 1.0 / (2.0 * self.gamma_c);
        self
    }

    /// Penalty exponent `α = 2γ_cλ` used when the constraint is violated.
    pub fn active_alpha(&self) -> f64 {
        2.0 * self.gamma_c * self.lambda
    }

    /// Exponent coefficient on `g` for a given `α`.
    pub fn step_size(&self, alpha: f64) -> f64 {
        self.eta_pi.unwrap_or(2.0 * self.lambda / (1.0 + alpha))
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg)) };
        check(self.r >= 0.0 && !self.r.is_nan(), "r must be non-negative")?;
        check(self.gamma_c >= 0.0 && self.gamma_c.is_finite(), "gamma_c must be non-negative and finite")?;
        check(self.lambda > 0.0 && self.lambda.is_finite(), "lambda must be positive")?;
        check((0.0..1.0).contains(&self.epsilon), "epsilon must lie in [0, 1)")?;
        check(self.clip > 0.0, "clip must be positive")?;
        check(self.beta > 0.0 && self.beta <= 1.0, "beta must lie in (0, 1]")?;
        if let Some(eta) = self.eta_pi {
            check(eta > 0.0 && eta.is_finite(), "eta_pi must be positive")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryState {
    pub pi: LabelDistribution,
    pub p_emp: LabelDistribution,
    pub step: u64,
}

impl AdversaryState {
    /// Uniform `pi` and uniform `p_emp`.
    pub fn new(num_classes: usize) -> Self {
        Self { pi: LabelDistribution::uniform(num_classes), p_emp: LabelDistribution::uniform(num_classes), step: 0 }
    }

    pub fn kl_to_reference(&self) -> Result<f64> {
        kl_divergence(&self.pi, &self.p_emp)
    }
}

/// Importance-weighted per-class clipped loss:
/// `g(i) = (1/b) Σ_{j: y_j = i} min(loss_j, clip) / p_emp(i)`.
pub fn adversary_gradient(labels: &[usize], losses: &[f64], p_emp: &LabelDistribution, clip: f64) -> Result<Vec<f64>> {
    if labels.len() != losses.len() {
        return Err(Error::shape(format!("{} labels but {} losses", labels.len(), losses.len())));
    }
    if labels.is_empty() {
        return Err(Error::domain("empty minibatch"));
    }
    let num_classes = p_emp.len();
    let mut g = vec![0.0; num_classes];
    for (&y, &loss) in labels.iter().zip(losses) {
        if y >= num_classes {
            return Err(Error::shape(format!("label {y} out of range for {num_classes} classes")));
        }
        let mass = p_emp.probs()[y];
        if mass <= 0.0 {
            return Err(Error::domain(format!("label {y} has zero mass in p_emp")));
        }
        g[y] += loss.min(clip) / mass;
    }
    let b = labels.len() as f64;
    g.iter_mut().for_each(|v| *v /= b);
    Ok(g)
}

/// `0` while `KL(pi ‖ p_emp) ≤ r`, `2γ_cλ` once it is exceeded.
///
/// The tie `KL = r` takes the inactive branch.
pub fn lagrange_alpha(pi: &LabelDistribution, p_emp: &LabelDistribution, cfg: &AdversaryConfig) -> Result<f64> {
    let kl = kl_divergence(pi, p_emp)?;
    Ok(if kl > cfg.r { cfg.active_alpha() } else { 0.0 })
}

/// Log-domain form of the closed-form step, before normalisation.
fn proximal_log_weights(
    pi: &LabelDistribution,
    p_emp: &LabelDistribution,
    g: &[f64],
    alpha: f64,
    eta: f64,
) -> Vec<f64> {
    pi.probs()
        .iter()
        .zip(p_emp.probs())
        .zip(g)
        .map(|((p, q), gi)| (p.ln() + alpha * q.ln()) / (1.0 + alpha) + eta * gi)
        .collect()
}

fn check_update_inputs(state: &AdversaryState, g: &[f64], alpha: f64) -> Result<()> {
    let l = state.pi.len();
    if state.p_emp.len() != l || g.len() != l {
        return Err(Error::shape(format!("pi has {l} classes, p_emp {}, gradient {}", state.p_emp.len(), g.len())));
    }
    state.pi.check_interior("adversary distribution")?;
    state.p_emp.check_interior("label marginal estimate")?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("adversarial gradient is not finite"));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("alpha = {alpha} must be non-negative")));
    }
    Ok(())
}

/// Closed-form KL-proximal ascent step followed by the ε-mixture.
///
/// With `epsilon = 0` and no `eta_pi` override this is the exact minimiser
/// of [`proximal_objective`].
pub fn mirror_proximal_update(
    state: &AdversaryState,
    g: &[f64],
    alpha: f64,
    cfg: &AdversaryConfig,
) -> Result<LabelDistribution> {
    check_update_inputs(state, g, alpha)?;
    let eta = cfg.step_size(alpha);
    let logw = proximal_log_weights(&state.pi, &state.p_emp, g, alpha, eta);
    let next = normalize_log_weights(&logw)?;
    mix_with_uniform(&next, cfg.epsilon)
}

/// `α/(2λ)·KL(π, p_emp) + 1/(2λ)·KL(π, π_t) − ⟨g, π⟩`.
pub fn proximal_objective(
    pi: &LabelDistribution,
    state: &AdversaryState,
    g: &[f64],
    alpha: f64,
    cfg: &AdversaryConfig,
) -> Result<f64> {
    pi.check_interior("candidate distribution")?;
    if g.len() != pi.len() {
        return Err(Error::shape("gradient and candidate lengths differ"));
    }
    let scale = 1.0 / (2.0 * cfg.lambda);
    let penalty = if alpha > 0.0 { alpha * scale * kl_divergence(pi, &state.p_emp)? } else { 0.0 };
    Ok(penalty + scale * kl_divergence(pi, &state.pi)? - pi.dot(g))
}

/// Exact proximal step for the nonsmooth penalty `γ_c · max(0, KL(π, p_emp) − r)`.
///
/// Unlike [`mirror_proximal_update`], which decides the penalty branch from
/// the current iterate, this resolves the branch at the output: the result is
/// the unconstrained step if that lands inside the ball, the fully penalised
/// step if that lands outside, and otherwise the point on the sphere
/// `KL = r` between the two (found by bisection on the multiplier).
/// No ε-mixture is applied.
pub fn penalized_proximal_step(state: &AdversaryState, g: &[f64], cfg: &AdversaryConfig) -> Result<LabelDistribution> {
    check_update_inputs(state, g, 0.0)?;
    let two_lambda = 2.0 * cfg.lambda;
    // Multiplier a/(1+a) ∈ [0, 1) parameterises the family.
    let candidate = |t: f64| -> Result<LabelDistribution> {
        let logw: Vec<f64> = state
            .pi
            .probs()
            .iter()
            .zip(state.p_emp.probs())
            .zip(g)
            .map(|((p, q), gi)| (1.0 - t) * (p.ln() + two_lambda * gi) + t * q.ln())
            .collect();
        normalize_log_weights(&logw)
    };
    let free = candidate(0.0)?;
    if kl_divergence(&free, &state.p_emp)? <= cfg.r {
        return Ok(free);
    }
    let a = cfg.active_alpha();
    let t_max = a / (1.0 + a);
    let full = candidate(t_max)?;
    if kl_divergence(&full, &state.p_emp)? >= cfg.r {
        return Ok(full);
    }
    let (mut lo, mut hi) = (0.0, t_max);
    let mut mid = candidate(0.5 * (lo + hi))?;
    for _ in 0..200 {
        let t = 0.5 * (lo + hi);
        mid = candidate(t)?;
        let kl = kl_divergence(&mid, &state.p_emp)?;
        if (kl - cfg.r).abs() <= 1e-13 {
            break;
        }
        if kl > cfg.r {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo < 1e-17 {
            break;
        }
    }
    Ok(mid)
}

/// `β·p_emp + (1 − β)·hist(batch)/b`.
pub fn ema_update(p_emp: &LabelDistribution, batch_labels: &[usize], beta: f64) -> Result<LabelDistribution> {
    if batch_labels.is_empty() {
        return Err(Error::domain("EMA update needs a non-empty batch"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("beta = {beta} must lie in [0, 1]")));
    }
    let num_classes = p_emp.len();
    let mut hist = vec![0.0; num_classes];
    for &y in batch_labels {
        if y >= num_classes {
            return Err(Error::shape(format!("label {y} out of range for {num_classes} classes")));
        }
        hist[y] += 1.0;
    }
    let b = batch_labels.len() as f64;
    let probs = p_emp.probs().iter().zip(&hist).map(|(p, h)| beta * p + (1.0 - beta) * h / b).collect();
    Ok(LabelDistribution::from_unnormalized(probs))
}
