//! Convergence instrumentation: Moreau-envelope stationarity of the robust
//! objective, measured versions of the constants in the convergence
//! analysis, and a numeric check of the three-point KL inequality.
//!
//! The robust objective is
//! `F(θ) = max_π Σ_y π(y) R_y(θ) + min(0, γ_c (r − KL(π ‖ p_emp)))`
//! with `R_y` the mean cross-entropy of class `y`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::adversary::{
    adversary_gradient, mirror_proximal_update, penalized_proximal_step, AdversaryConfig, AdversaryState,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluator::{penalized_max_exact, ErrorProfile};
use crate::model::{accumulate_gradient, per_example_loss, Example, ModelParams};
use crate::rng;
use crate::simplex::{kl_divergence, mix_with_uniform, normalize_log_weights, LabelDistribution};
use crate::trainer::{weighted_theta_gradient, TrainHistory};

/// Value, Danskin gradient and inner maximiser of `F` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub pi: LabelDistribution,
}

/// `F` on a fixed dataset.
pub struct RobustObjective<'a> {
    data: &'a Dataset,
    cfg: AdversaryConfig,
    reference: LabelDistribution,
}

impl<'a> RobustObjective<'a> {
    pub fn new(data: &'a Dataset, cfg: &AdversaryConfig) -> Result<Self> {
        data.check_covers_all_classes()?;
        Ok(Self { data, cfg: cfg.clone(), reference: data.label_marginal()? })
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<RobustEvaluation> {
        let (losses, grads) = class_losses_and_gradients(params, self.data)?;
        let profile = ErrorProfile::new(losses, self.reference.clone(), self.data.class_counts())?;
        let (value, pi) = penalized_max_exact(&profile, &self.cfg)?;
        let mut gradient = vec![0.0; params.num_params()];
        for (w, g) in pi.probs().iter().zip(&grads) {
            for (acc, gi) in gradient.iter_mut().zip(g) {
                *acc += w * gi;
            }
        }
        Ok(RobustEvaluation { value, gradient, pi })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-class mean losses and their gradients.
fn class_losses_and_gradients(params: &ModelParams, data: &Dataset) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let counts = data.class_counts();
    let mut losses = vec![0.0; data.num_classes()];
    let mut grads = vec![vec![0.0; params.num_params()]; data.num_classes()];
    for ex in data.examples() {
        let scale = 1.0 / counts[ex.label] as f64;
        losses[ex.label] += scale * accumulate_gradient(params, ex, scale, &mut grads[ex.label])?;
    }
    Ok((losses, grads))
}

const INNER_GRADIENT_TOLERANCE: f64 = 1e-9;

/// `min_w Σ π_y R_y(w) + L̂ ‖w − θ‖²` by gradient descent with backtracking.
/// Returns the minimiser, the minimum and `R(w)` there.
fn regularized_weighted_min(
    pi: &LabelDistribution,
    anchor: &ModelParams,
    start: &ModelParams,
    data: &Dataset,
    l_hat: f64,
) -> Result<(ModelParams, f64, Vec<f64>)> {
    let eval = |w: &ModelParams| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (losses, grads) = class_losses_and_gradients(w, data)?;
        let mut value = pi.dot(&losses);
        let mut grad = vec![0.0; w.num_params()];
        for (p, g) in pi.probs().iter().zip(&grads) {
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += p * gi;
            }
        }
        for ((g, wi), ai) in grad.iter_mut().zip(w.weights()).zip(anchor.weights()) {
            value += l_hat * (wi - ai).powi(2);
            *g += 2.0 * l_hat * (wi - ai);
        }
        Ok((value, grad, losses))
    };
    let mut w = start.clone();
    let (mut value, mut grad, mut losses) = eval(&w)?;
    let mut step = 1.0 / (2.0 * l_hat);
    // Smallest step accepted by the line search; once value differences drop
    // to rounding level, half of it is used without a test.
    let mut safe = f64::INFINITY;
    for _ in 0..100_000 {
        let gn = norm(&grad);
        if gn <= INNER_GRADIENT_TOLERANCE {
            break;
        }
        if gn < 1e-6 && safe.is_finite() {
            for (t, g) in w.weights_mut().iter_mut().zip(&grad) {
                *t -= 0.5 * safe * g;
            }
            (value, grad, losses) = eval(&w)?;
            continue;
        }
        step *= 2.0;
        loop {
            let mut trial = w.clone();
            for (t, g) in trial.weights_mut().iter_mut().zip(&grad) {
                *t -= step * g;
            }
            let (v, g, l) = eval(&trial)?;
            if v <= value - 0.5 * step * gn * gn {
                w = trial;
                (value, grad, losses) = (v, g, l);
                safe = safe.min(step);
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                return Ok((w, value, losses));
            }
        }
    }
    Ok((w, value, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoreauEstimate {
    /// `2L̂ ‖θ − θ̂‖`.
    pub value: f64,
    pub prox_point: ModelParams,
    /// Primal-dual gap of the proximal subproblem at the returned point;
    /// `‖θ̂ − θ̂*‖² ≤ gap / L̂` when `F` is convex.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gap below which the proximal subproblem counts as solved.
pub const MOREAU_GAP_TOLERANCE: f64 = 1e-10;

/// Norm of the Moreau-envelope gradient `2L̂ (θ − θ̂)` with
/// `θ̂ = argmin_w F(w) + L̂ ‖w − θ‖²`.
///
/// Solved through the saddle form `max_π min_w Σ π_y R_y(w) + L̂ ‖w − θ‖² − pen(π)`
/// (valid once `2L̂` exceeds the weak-convexity modulus of the losses): the
/// inner minimum is smooth and strongly convex, and the outer ascent uses the
/// exact penalised proximal step with a backtracked step size.
pub fn moreau_stationarity(
    params: &ModelParams,
    data: &Dataset,
    cfg: &AdversaryConfig,
    l_hat: f64,
) -> Result<MoreauEstimate> {
    if !(l_hat > 0.0 && l_hat.is_finite()) {
        return Err(Error::domain(format!("L_hat = {l_hat} must be positive")));
    }
    const MAX_ITERATIONS: usize = 5_000;
    let objective = RobustObjective::new(data, cfg)?;
    let p = objective.reference.clone();
    let penalty =
        |pi: &LabelDistribution| -> Result<f64> { Ok(cfg.gamma_c * (kl_divergence(pi, &p)? - cfg.r).max(0.0)) };
    let primal =
        |w: &ModelParams| -> Result<f64> { Ok(objective.evaluate(w)?.value + l_hat * w.distance(params).powi(2)) };

    let mut pi = p.clone();
    let (mut w, mut smooth, mut losses) = regularized_weighted_min(&pi, params, params, data, l_hat)?;
    let mut dual = smooth - penalty(&pi)?;
    let mut gap = primal(&w)? - dual;
    let mut lambda = 1.0;
    let mut iterations = 0;
    while gap > MOREAU_GAP_TOLERANCE && iterations < MAX_ITERATIONS {
        iterations += 1;
        lambda *= 1.5;
        loop {
            let step_cfg = AdversaryConfig { lambda, epsilon: 0.0, eta_pi: None, ..cfg.clone() };
            let state = AdversaryState { pi: pi.clone(), p_emp: p.clone(), step: 0 };
            let next = penalized_proximal_step(&state, &losses, &step_cfg)?;
            // Keep the iterate strictly inside the simplex.
            let next = if next.is_interior() { next } else { mix_with_uniform(&next, 1e-12)? };
            let (w_next, s_next, l_next) = regularized_weighted_min(&next, params, &w, data, l_hat)?;
            let linear: f64 = next.probs().iter().zip(pi.probs()).zip(&losses).map(|((a, b), l)| (a - b) * l).sum();
            let sufficient = s_next >= smooth + linear - kl_divergence(&next, &pi)? / (2.0 * lambda) - 1e-15;
            if sufficient || lambda < 1e-12 {
                pi = next;
                (w, smooth, losses) = (w_next, s_next, l_next);
                break;
            }
            lambda *= 0.5;
        }
        dual = dual.max(smooth - penalty(&pi)?);
        gap = primal(&w)? - dual;
    }
    Ok(MoreauEstimate {
        value: 2.0 * l_hat * w.distance(params),
        prox_point: w,
        gap,
        iterations,
        converged: gap <= MOREAU_GAP_TOLERANCE,
    })
}

/// Proximal-point iterations `θ ← prox(θ)` until the Moreau-gradient norm
/// drops below `tolerance`; returns the final point and that norm.
pub fn proximal_point_minimize(
    init: &ModelParams,
    data: &Dataset,
    cfg: &AdversaryConfig,
    l_hat: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(ModelParams, f64)> {
    let mut theta = init.clone();
    let mut last = f64::INFINITY;
    for _ in 0..max_iterations {
        let est = moreau_stationarity(&theta, data, cfg, l_hat)?;
        last = est.value;
        if last <= tolerance {
            return Ok((theta, last));
        }
        theta = est.prox_point;
    }
    Err(Error::NonConvergence { iterations: max_iterations, residual: last })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    /// Max sampled `‖g(θ) − ∇θ f‖` (minibatch vs full-sample gradient).
    pub sigma_hat: f64,
    /// Max sampled `‖g(π)‖∞`.
    pub g_hat: f64,
    /// `clip / min p_emp`, the bound `g_hat` cannot exceed.
    pub g_bound: f64,
    /// Max sampled secant `|Φ(θ₁) − Φ(θ₂)| / ‖θ₁ − θ₂‖`.
    pub lipschitz_hat: f64,
    /// Max sampled secant `‖∇Φ(θ₁) − ∇Φ(θ₂)‖ / ‖θ₁ − θ₂‖`.
    pub smoothness_hat: f64,
    /// Max `KL(π_t ‖ p_emp)` over the history.
    pub r_hat: f64,
    /// `log(L/ε)`; infinite when ε = 0.
    pub r_bound: f64,
    pub stationarity: Vec<f64>,
}

impl DiagnosticsReport {
    pub fn is_finite(&self) -> bool {
        [self.sigma_hat, self.g_hat, self.g_bound, self.lipschitz_hat, self.smoothness_hat, self.r_hat]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.stationarity.iter().all(|v| v.is_finite())
    }

    /// `key = value` lines.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sigma_hat = {:?}", self.sigma_hat);
        let _ = writeln!(out, "g_hat = {:?}", self.g_hat);
        let _ = writeln!(out, "g_bound = {:?}", self.g_bound);
        let _ = writeln!(out, "lipschitz_hat = {:?}", self.lipschitz_hat);
        let _ = writeln!(out, "smoothness_hat = {:?}", self.smoothness_hat);
        let _ = writeln!(out, "r_hat = {:?}", self.r_hat);
        let _ = writeln!(out, "r_bound = {:?}", self.r_bound);
        let trace: Vec<String> = self.stationarity.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "stationarity = {}", trace.join(","));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_kv_text()).map_err(|e| Error::io(path, e))
    }
}

/// Inputs for [`estimate_assumption_constants`] beyond the history itself.
pub struct ConstantProbe<'a> {
    pub data: &'a Dataset,
    /// Parameters after each epoch, aligned with the history records.
    pub checkpoints: &'a [ModelParams],
    pub adversary: AdversaryConfig,
    pub batch_size: usize,
    /// Minibatches / secant pairs sampled per checkpoint.
    pub samples: usize,
    pub seed: u64,
    /// Optional stationarity trace to attach to the report.
    pub stationarity: Vec<f64>,
}

/// `Σ_y π(y) R_y(θ)` and its gradient on the full sample.
fn weighted_risk(params: &ModelParams, data: &Dataset, pi: &LabelDistribution) -> Result<(f64, Vec<f64>)> {
    let counts = data.class_counts();
    let mut grad = vec![0.0; params.num_params()];
    let mut value = 0.0;
    for ex in data.examples() {
        let w = pi.probs()[ex.label] / counts[ex.label] as f64;
        value += w * accumulate_gradient(params, ex, w, &mut grad)?;
    }
    Ok((value, grad))
}

pub fn estimate_assumption_constants(history: &TrainHistory, probe: &ConstantProbe) -> Result<DiagnosticsReport> {
    if history.records.is_empty() {
        return Err(Error::domain("history is empty"));
    }
    if probe.checkpoints.len() != history.records.len() {
        return Err(Error::shape("one checkpoint per history record is required"));
    }
    let data = probe.data;
    let l = data.num_classes();
    let p_emp = data.label_marginal()?;
    p_emp.check_interior("training label marginal")?;
    let b = probe.batch_size.clamp(1, data.len());
    let mut rng = rng::stream(probe.seed, "diagnostics", 0);
    let mut indices: Vec<usize> = (0..data.len()).collect();

    let (mut sigma_hat, mut g_hat, mut lipschitz_hat, mut smoothness_hat) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (record, params) in history.records.iter().zip(probe.checkpoints) {
        let pi = &record.pi;
        let (value, full) = weighted_risk(params, data, pi)?;
        for _ in 0..probe.samples {
            indices.shuffle(&mut rng);
            let batch: Vec<&Example> = indices[..b].iter().map(|&i| &data.examples()[i]).collect();
            let g = weighted_theta_gradient(&batch, pi, &p_emp, params)?;
            let dev: Vec<f64> = g.iter().zip(&full).map(|(a, c)| a - c).collect();
            sigma_hat = sigma_hat.max(norm(&dev));

            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let losses = batch.iter().map(|e| per_example_loss(params, e)).collect::<Result<Vec<_>>>()?;
            let gp = adversary_gradient(&labels, &losses, &p_emp, probe.adversary.clip)?;
            g_hat = g_hat.max(gp.iter().fold(0.0, |m, v| m.max(v.abs())));

            // Secants between the checkpoint and a random nearby point.
            let radius = 0.1 * (1.0 + norm(params.weights()) / (params.num_params() as f64).sqrt());
            let mut other = params.clone();
            for w in other.weights_mut() {
                *w += rng.gen_range(-radius..=radius);
            }
            let (v2, g2) = weighted_risk(&other, data, pi)?;
            let dist = other.distance(params);
            if dist > 0.0 {
                lipschitz_hat = lipschitz_hat.max((v2 - value).abs() / dist);
                let dg: Vec<f64> = g2.iter().zip(&full).map(|(a, c)| a - c).collect();
                smoothness_hat = smoothness_hat.max(norm(&dg) / dist);
            }
        }
    }
    let eps = probe.adversary.epsilon;
    Ok(DiagnosticsReport {
        sigma_hat,
        g_hat,
        g_bound: probe.adversary.clip / p_emp.min_entry(),
        lipschitz_hat,
        smoothness_hat,
        r_hat: history.max_kl(),
        r_bound: if eps > 0.0 { (l as f64 / eps).ln() } else { f64::INFINITY },
        stationarity: probe.stationarity.clone(),
    })
}

/// One random instance of `min_x α KL(x, p) − ⟨g, x⟩ + KL(x, x₀)` over Δ.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreePointInstance {
    pub x0: LabelDistribution,
    pub reference: LabelDistribution,
    pub g: Vec<f64>,
    pub alpha: f64,
}

impl ThreePointInstance {
    pub fn random(rng: &mut impl Rng, num_classes: usize) -> Self {
        Self {
            x0: random_interior(rng, num_classes),
            reference: random_interior(rng, num_classes),
            g: (0..num_classes).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            alpha: rng.gen_range(0.0..3.0),
        }
    }

    /// The convex part `α KL(x, p) − ⟨g, x⟩`.
    pub fn convex_part(&self, x: &LabelDistribution) -> Result<f64> {
        Ok(self.alpha * kl_divergence(x, &self.reference)? - x.dot(&self.g))
    }

    /// Minimiser via the closed-form proximal step (λ = 1/2, no stabiliser).
    pub fn minimizer(&self) -> Result<LabelDistribution> {
        let cfg = AdversaryConfig { lambda: 0.5, epsilon: 0.0, eta_pi: None, ..AdversaryConfig::default() };
        let state = AdversaryState { pi: self.x0.clone(), p_emp: self.reference.clone(), step: 0 };
        mirror_proximal_update(&state, &self.g, self.alpha, &cfg)
    }

    /// `LHS − RHS` of `ℓ(x′) + KL(x′,x₀) ≥ ℓ(x*) + KL(x*,x₀) + KL(x′,x*)`.
    pub fn slack(&self, x_star: &LabelDistribution, probe: &LabelDistribution) -> Result<f64> {
        let lhs = self.convex_part(probe)? + kl_divergence(probe, &self.x0)?;
        let rhs = self.convex_part(x_star)? + kl_divergence(x_star, &self.x0)? + kl_divergence(probe, x_star)?;
        Ok(lhs - rhs)
    }
}

fn random_interior(rng: &mut impl Rng, l: usize) -> LabelDistribution {
    let w: Vec<f64> = (0..l)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            e + 1e-3
        })
        .collect();
    LabelDistribution::from_unnormalized(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreePointViolation {
    pub trial: usize,
    pub probe: LabelDistribution,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlRecursionReport {
    pub trials: usize,
    pub probes_per_trial: usize,
    pub violations: Vec<ThreePointViolation>,
    /// Largest `RHS − LHS` seen (negative when every probe has slack).
    pub worst_gap: f64,
}

impl KlRecursionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const THREE_POINT_TOLERANCE: f64 = 1e-6;
pub const PROBES_PER_TRIAL: usize = 100;

/// Probes: half drawn over the whole simplex, half as small multiplicative
/// perturbations of `candidate`, plus `candidate` itself.
fn probes_around(rng: &mut impl Rng, candidate: &LabelDistribution, count: usize) -> Vec<LabelDistribution> {
    let l = candidate.len();
    let mut out = vec![candidate.clone()];
    for k in 1..count {
        if k % 2 == 0 {
            out.push(random_interior(rng, l));
        } else {
            let logw: Vec<f64> = candidate.probs().iter().map(|p| p.ln() + rng.gen_range(-0.05..0.05)).collect();
            out.push(normalize_log_weights(&logw).expect("finite log-weights"));
        }
    }
    out
}

/// Checks the three-point inequality at `candidate` for one instance.
pub fn three_point_violations(
    instance: &ThreePointInstance,
    candidate: &LabelDistribution,
    trial: usize,
    rng: &mut impl Rng,
    probes: usize,
) -> Result<(Vec<ThreePointViolation>, f64)> {
    let mut violations = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for probe in probes_around(rng, candidate, probes) {
        let slack = instance.slack(candidate, &probe)?;
        worst = worst.max(-slack);
        if slack < -THREE_POINT_TOLERANCE {
            violations.push(ThreePointViolation { trial, probe, slack });
        }
    }
    Ok((violations, worst))
}

/// Random instances on Δ³ and Δ⁵ (alternating), minimiser from the closed
/// form, [`PROBES_PER_TRIAL`] probes each.
pub fn kl_recursion_check(trials: usize, seed: u64) -> Result<KlRecursionReport> {
    let mut rng = rng::stream(seed, "three-point", 0);
    let mut violations = Vec::new();
    let mut worst_gap = f64::NEG_INFINITY;
    for trial in 0..trials {
        let l = if trial % 2 == 0 { 3 } else { 5 };
        let instance = ThreePointInstance::random(&mut rng, l);
        let x_star = instance.minimizer()?;
        let (v, w) = three_point_violations(&instance, &x_star, trial, &mut rng, PROBES_PER_TRIAL)?;
        violations.extend(v);
        worst_gap = worst_gap.max(w);
    }
    Ok(KlRecursionReport { trials, probes_per_trial: PROBES_PER_TRIAL, violations, worst_gap })
}
