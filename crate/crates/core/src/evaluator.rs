//! Worst-case label-shift evaluation.
//!
//! Given per-class errors `e` and a reference marginal `p`, the worst case at
//! threshold τ is `max ⟨π, e⟩ s.t. KL(π ‖ p) ≤ τ`. Its maximiser is an
//! exponential tilt `π ∝ p · exp(e/λ)` with the temperature λ chosen so the
//! constraint is tight, which [`worst_case_value`] finds by bisection.

use std::path::Path;

use crate::adversary::{penalized_proximal_step, AdversaryConfig, AdversaryState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};
use crate::simplex::{exponential_tilt, kl_divergence, LabelDistribution};
use crate::trainer::class_loss_and_error;

const TEMPERATURE_RANGE: (f64, f64) = (1e-8, 1e8);
const KL_TOLERANCE: f64 = 1e-8;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    /// Per-class error rate or loss.
    pub values: Vec<f64>,
    pub reference: LabelDistribution,
    pub counts: Vec<usize>,
}

impl ErrorProfile {
    pub fn new(values: Vec<f64>, reference: LabelDistribution, counts: Vec<usize>) -> Result<Self> {
        if values.len() != reference.len() || counts.len() != values.len() {
            return Err(Error::shape(format!(
                "profile lengths disagree: {} values, {} reference, {} counts",
                values.len(),
                reference.len(),
                counts.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("profile values must be finite"));
        }
        Ok(Self { values, reference, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    /// Reference-weighted mean.
    pub fn mean(&self) -> f64 {
        self.reference.dot(&self.values)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["class_id", "error", "count", "ref_prob"]).map_err(|e| csv_err(path, e))?;
        for k in 0..self.num_classes() {
            w.write_record([
                k.to_string(),
                format!("{:?}", self.values[k]),
                self.counts[k].to_string(),
                format!("{:?}", self.reference.probs()[k]),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
        let mut values = Vec::new();
        let mut counts = Vec::new();
        let mut reference = Vec::new();
        for (k, record) in r.records().enumerate() {
            let record = record.map_err(|e| csv_err(path, e))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let bad = |m: String| Error::Parse { line, message: m };
            if record.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", record.len())));
            }
            let id: usize = record[0].parse().map_err(|_| bad(format!("bad class_id `{}`", &record[0])))?;
            if id != k {
                return Err(bad(format!("class ids must be 0..L in order, found {id}")));
            }
            values.push(record[1].parse().map_err(|_| bad(format!("bad error `{}`", &record[1])))?);
            counts.push(record[2].parse().map_err(|_| bad(format!("bad count `{}`", &record[2])))?);
            reference.push(record[3].parse().map_err(|_| bad(format!("bad ref_prob `{}`", &record[3])))?);
        }
        Self::new(values, LabelDistribution::new(reference)?, counts)
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

/// Per-class 0-1 error of `params` on `data`; reference is the data's label
/// marginal.
pub fn per_class_errors(params: &ModelParams, data: &Dataset) -> Result<ErrorProfile> {
    let counts = data.class_counts();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::domain(format!("class {k} has no examples to evaluate")));
    }
    let mut wrong = vec![0usize; data.num_classes()];
    for ex in data.examples() {
        if predict(params, &ex.features)? != ex.label {
            wrong[ex.label] += 1;
        }
    }
    let values = wrong.iter().zip(&counts).map(|(&w, &c)| w as f64 / c as f64).collect();
    ErrorProfile::new(values, data.label_marginal()?, counts)
}

/// Per-class mean cross-entropy, optionally clipped, as a profile.
pub fn per_class_losses(params: &ModelParams, data: &Dataset, clip: Option<f64>) -> Result<ErrorProfile> {
    let counts = data.class_counts();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::domain(format!("class {k} has no examples to evaluate")));
    }
    let values = match clip {
        None => class_loss_and_error(params, data)?.0,
        Some(c) => {
            let mut sums = vec![0.0; data.num_classes()];
            for ex in data.examples() {
                sums[ex.label] += crate::model::per_example_loss(params, ex)?.min(c);
            }
            sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
        }
    };
    ErrorProfile::new(values, data.label_marginal()?, counts)
}

/// Largest `⟨π, e⟩` over `KL(π ‖ reference) ≤ tau`, with the maximiser.
pub fn worst_case_value(profile: &ErrorProfile, tau: f64) -> Result<(f64, LabelDistribution)> {
    if !(tau >= 0.0) || tau.is_nan() {
        return Err(Error::domain(format!("tau = {tau} must be non-negative")));
    }
    let p = &profile.reference;
    p.check_interior("reference distribution")?;
    let e = &profile.values;
    if tau == 0.0 {
        return Ok((p.dot(e), p.clone()));
    }

    // Point-mass branch: the best class with the most reference mass is
    // reachable once tau covers its divergence.
    let e_max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = (0..e.len())
        .filter(|&i| e[i] == e_max)
        .max_by(|&a, &b| p.probs()[a].total_cmp(&p.probs()[b]).then(b.cmp(&a)))
        .expect("non-empty profile");
    if tau >= -p.probs()[top].ln() {
        return Ok((e_max, LabelDistribution::point_mass(e.len(), top)));
    }

    let kl_at = |log_temp: f64| -> Result<(f64, LabelDistribution)> {
        let tilt = exponential_tilt(p, e, log_temp.exp())?;
        Ok((kl_divergence(&tilt, p)?, tilt))
    };
    // KL of the tilt decreases as the temperature grows.
    let (mut lo, mut hi) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let (kl_cold, cold) = kl_at(lo)?;
    if kl_cold <= tau {
        // Only reachable when several classes tie at the maximum.
        return Ok((cold.dot(e), cold));
    }
    let (kl_hot, hot) = kl_at(hi)?;
    if kl_hot >= tau {
        return Ok((hot.dot(e), hot));
    }
    // Keep the feasible side; bisect to full precision so the value is a
    // smooth function of the profile.
    let mut best = hot;
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let (kl, tilt) = kl_at(mid)?;
        if kl > tau {
            lo = mid;
        } else {
            hi = mid;
            best = tilt;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    debug_assert!(kl_divergence(&best, p)? - tau <= KL_TOLERANCE);
    Ok((best.dot(e), best))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPoint {
    pub tau: f64,
    pub value: f64,
    pub witness: LabelDistribution,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShiftCurve {
    pub points: Vec<ShiftPoint>,
}

/// [`worst_case_value`] at each of the strictly increasing `taus`.
pub fn shift_sweep(profile: &ErrorProfile, taus: &[f64]) -> Result<ShiftCurve> {
    if taus.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("taus must be strictly increasing"));
    }
    let points = taus
        .iter()
        .map(|&tau| {
            let (value, witness) = worst_case_value(profile, tau)?;
            Ok(ShiftPoint { tau, value, witness })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShiftCurve { points })
}

impl ShiftCurve {
    /// Writes `curve.csv` (`tau,worst_value,witness_file`) into `dir` plus one
    /// `witness_<k>.csv` (`class_id,prob`) per point.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("curve.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["tau", "worst_value", "witness_file"]).map_err(|e| csv_err(&path, e))?;
        for (k, pt) in self.points.iter().enumerate() {
            let name = format!("witness_{k}.csv");
            w.write_record([format!("{:?}", pt.tau), format!("{:?}", pt.value), name.clone()])
                .map_err(|e| csv_err(&path, e))?;
            save_distribution_csv(&pt.witness, dir.join(name))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("curve.csv");
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut points = Vec::new();
        for record in r.records() {
            let record = record.map_err(|e| csv_err(&path, e))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let bad = |m: String| Error::Parse { line, message: m };
            if record.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", record.len())));
            }
            let tau = record[0].parse().map_err(|_| bad(format!("bad tau `{}`", &record[0])))?;
            let value = record[1].parse().map_err(|_| bad(format!("bad worst_value `{}`", &record[1])))?;
            let witness = load_distribution_csv(dir.join(&record[2]))?;
            points.push(ShiftPoint { tau, value, witness });
        }
        Ok(Self { points })
    }
}

pub fn save_distribution_csv(p: &LabelDistribution, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["class_id", "prob"]).map_err(|e| csv_err(path, e))?;
    for (k, x) in p.probs().iter().enumerate() {
        w.write_record([k.to_string(), format!("{x:?}")]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_distribution_csv(path: impl AsRef<Path>) -> Result<LabelDistribution> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut probs = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::Parse { line, message: format!("expected 2 fields, found {}", record.len()) });
        }
        probs
            .push(record[1].parse().map_err(|_| Error::Parse { line, message: format!("bad prob `{}`", &record[1]) })?);
    }
    LabelDistribution::new(probs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerMaxOptions {
    /// Proximal step scale λ of the ascent iterations.
    pub lambda: f64,
    /// Stop when `‖π_{k+1} − π_k‖₁ / (2λ)` falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for InnerMaxOptions {
    fn default() -> Self {
        Self { lambda: 5.0, tolerance: 1e-8, max_iterations: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedMax {
    /// `⟨π, e⟩ + min(0, γ_c (r − KL(π ‖ p)))` at the witness.
    pub value: f64,
    pub witness: LabelDistribution,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl PenalizedMax {
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence { iterations: self.iterations, residual: self.residual })
        }
    }
}

/// `max_π ⟨π, e⟩ + min(0, γ_c (r − KL(π ‖ p)))` by proximal mirror ascent
/// with the exact gradient `e`. Uses `r` and `gamma_c` from `cfg`.
pub fn inner_max_penalized(profile: &ErrorProfile, cfg: &AdversaryConfig) -> Result<PenalizedMax> {
    inner_max_penalized_with(profile, cfg, &InnerMaxOptions::default(), None)
}

/// As [`inner_max_penalized`], with explicit options and an optional warm start.
pub fn inner_max_penalized_with(
    profile: &ErrorProfile,
    cfg: &AdversaryConfig,
    opts: &InnerMaxOptions,
    warm_start: Option<&LabelDistribution>,
) -> Result<PenalizedMax> {
    let p = &profile.reference;
    p.check_interior("reference distribution")?;
    let step_cfg = AdversaryConfig { lambda: opts.lambda, epsilon: 0.0, eta_pi: None, ..cfg.clone() };
    let start = match warm_start {
        Some(w) if w.is_interior() && w.len() == p.len() => w.clone(),
        _ => p.clone(),
    };
    let mut state = AdversaryState { pi: start, p_emp: p.clone(), step: 0 };
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let next = penalized_proximal_step(&state, &profile.values, &step_cfg)?;
        residual = next.l1_distance(&state.pi) / (2.0 * opts.lambda);
        state.pi = next;
        iterations += 1;
        if residual <= opts.tolerance {
            converged = true;
            break;
        }
        if !state.pi.is_interior() {
            // Collapsed onto a face: the linear payoff is maximised there.
            converged = true;
            break;
        }
    }
    let witness = state.pi;
    let value = penalized_value(profile, cfg, &witness)?;
    Ok(PenalizedMax { value, witness, iterations, residual, converged })
}

/// Exact maximiser of the penalised objective: the tilt at temperature
/// `γ_c` when it lies outside the ball, else the worst case at `τ = r`.
pub fn penalized_max_exact(profile: &ErrorProfile, cfg: &AdversaryConfig) -> Result<(f64, LabelDistribution)> {
    let p = &profile.reference;
    p.check_interior("reference distribution")?;
    let witness = if cfg.gamma_c > 0.0 {
        let tilt = exponential_tilt(p, &profile.values, cfg.gamma_c)?;
        if kl_divergence(&tilt, p)? >= cfg.r {
            tilt
        } else {
            worst_case_value(profile, cfg.r)?.1
        }
    } else {
        worst_case_value(profile, f64::INFINITY)?.1
    };
    Ok((penalized_value(profile, cfg, &witness)?, witness))
}

/// `⟨π, e⟩ + min(0, γ_c (r − KL(π ‖ p)))`.
pub fn penalized_value(profile: &ErrorProfile, cfg: &AdversaryConfig, pi: &LabelDistribution) -> Result<f64> {
    let kl = kl_divergence(pi, &profile.reference)?;
    Ok(pi.dot(&profile.values) + (cfg.gamma_c * (cfg.r - kl)).min(0.0))
}
