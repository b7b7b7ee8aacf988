//! Euclidean projection onto the KL ball `{q ∈ Δ : KL(q ‖ p_ref) ≤ r}`.
//!
//! This is the projection an adversary would need without the Lagrangian
//! relaxation. It is kept as a correctness oracle and to measure its cost
//! against the closed-form mirror step.
//!
//! Solver: when the plain simplex projection of `p` is infeasible the
//! constraint is active and the KKT conditions read
//!
//! ```text
//! 2(q_i − p_i) + μ (log(q_i/p_ref_i) + 1) + ν = 0,   KL(q ‖ p_ref) = r
//! ```
//!
//! For fixed `(μ, ν)` every coordinate solves a scalar monotone equation
//! (Newton in `log q_i`); `ν` is found by bisection on `Σ q = 1`, and `μ` by
//! bisection on the KL level.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::adversary::{mirror_proximal_update, AdversaryConfig, AdversaryState};
use crate::error::{Error, Result};
use crate::rng;
use crate::simplex::{euclidean_project_simplex, kl_divergence, LabelDistribution};

/// Relative KL tolerance of the outer bisection.
const RELATIVE_KL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KlBallProjection {
    pub point: LabelDistribution,
    /// `max(0, KL − r) / r` at `point`.
    pub relative_violation: f64,
    pub outer_iterations: usize,
}

/// Solves `2q + μ log q = c` for `q > 0`, `μ > 0`.
fn scalar_root(c: f64, mu: f64) -> f64 {
    // h(u) = 2e^u + μu − c is increasing and convex in u = log q.
    // Safeguarded Newton inside a bracket with h(lo) ≤ 0 ≤ h(hi).
    let h = |u: f64| 2.0 * u.exp() + mu * u - c;
    let mut lo = ((c - 2.0) / mu).min(0.0);
    let mut hi = if c > 0.0 { (c / 2.0).ln().max(0.0) } else { c / mu };
    let mut u = if c > 2.0 { (c / 2.0).ln() } else { hi.min(lo.max((c.max(1e-300) / 2.0).ln())) };
    for _ in 0..300 {
        let eu = u.exp();
        let hu = 2.0 * eu + mu * u - c;
        if hu > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let mut next = u - hu / (2.0 * eu + mu);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() <= 1e-15 * u.abs().max(1.0) || hi - lo <= 1e-15 * u.abs().max(1.0) {
            u = next;
            break;
        }
        u = next;
    }
    debug_assert!(h(u).is_finite());
    u.exp()
}

/// Minimiser of `‖q − p‖² + μ KL(q ‖ p_ref)` over the simplex.
fn penalized_projection(p: &[f64], log_ref: &[f64], mu: f64) -> Vec<f64> {
    let coords = |nu: f64| -> Vec<f64> {
        p.iter().zip(log_ref).map(|(pi, lr)| scalar_root(2.0 * pi + mu * lr - mu - nu, mu)).collect()
    };
    let mass = |nu: f64| coords(nu).iter().sum::<f64>() - 1.0;
    // Σ q(ν) decreases in ν; widen the bracket until it straddles one.
    let (mut lo, mut hi) = (-1.0, 1.0);
    while mass(lo) < 0.0 {
        lo = 2.0 * lo - 1.0;
    }
    while mass(hi) > 0.0 {
        hi = 2.0 * hi + 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    let mut q = coords(0.5 * (lo + hi));
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= total);
    q
}

/// Projects `p` onto `{q ∈ Δ : KL(q ‖ p_ref) ≤ r}` in Euclidean distance.
pub fn kl_ball_project(p: &[f64], p_ref: &LabelDistribution, r: f64) -> Result<KlBallProjection> {
    if p.len() != p_ref.len() {
        return Err(Error::shape(format!("point has {} entries, reference {}", p.len(), p_ref.len())));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::domain(format!("radius {r} must be positive and finite")));
    }
    p_ref.check_interior("projection reference")?;
    let plain = euclidean_project_simplex(p)?;
    if kl_divergence(&plain, p_ref)? <= r {
        return Ok(KlBallProjection { point: plain, relative_violation: 0.0, outer_iterations: 0 });
    }
    let log_ref: Vec<f64> = p_ref.probs().iter().map(|x| x.ln()).collect();
    let kl_of = |q: &[f64]| -> f64 {
        q.iter().zip(p_ref.probs()).filter(|(qi, _)| **qi > 0.0).map(|(qi, pr)| qi * (qi / pr).ln()).sum()
    };
    // KL of the penalised minimiser decreases in μ; bisect in log μ.
    let (mut lo, mut hi) = (-30.0f64, 1.0f64);
    while kl_of(&penalized_projection(p, &log_ref, hi.exp())) > r {
        hi += 5.0;
        if hi > 200.0 {
            return Err(Error::NonConvergence { iterations: 0, residual: f64::INFINITY });
        }
    }
    let mut best = penalized_projection(p, &log_ref, hi.exp());
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..200 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let q = penalized_projection(p, &log_ref, mid.exp());
        let kl = kl_of(&q);
        if kl > r {
            lo = mid;
        } else {
            hi = mid;
            best = q;
        }
        if ((kl - r) / r).abs() <= RELATIVE_KL_TOLERANCE {
            if kl <= r * (1.0 + RELATIVE_KL_TOLERANCE) {
                best = penalized_projection(p, &log_ref, mid.exp());
            }
            converged = true;
            break;
        }
        if hi - lo < 1e-14 {
            converged = true;
            break;
        }
    }
    let kl = kl_of(&best);
    let relative_violation = ((kl - r) / r).max(0.0);
    if !converged && relative_violation > 1e-2 {
        return Err(Error::NonConvergence { iterations, residual: relative_violation });
    }
    Ok(KlBallProjection { point: LabelDistribution::new(best)?, relative_violation, outer_iterations: iterations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub num_classes: usize,
    pub trials: usize,
    /// `None` when `trials == 0`.
    pub median_projection_ms: Option<f64>,
    pub median_mirror_ms: Option<f64>,
}

impl BenchReport {
    pub fn ratio(&self) -> Option<f64> {
        Some(self.median_projection_ms? / self.median_mirror_ms?)
    }

    pub fn csv_header() -> [&'static str; 5] {
        ["L", "trials", "median_projection_ms", "median_mirror_ms", "ratio"]
    }

    pub fn csv_row(&self) -> [String; 5] {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        [
            self.num_classes.to_string(),
            self.trials.to_string(),
            fmt(self.median_projection_ms),
            fmt(self.median_mirror_ms),
            fmt(self.ratio()),
        ]
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
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

/// Times [`kl_ball_project`] against [`mirror_proximal_update`] on seeded
/// random instances with `L = num_classes`.
pub fn projection_benchmark(num_classes: usize, trials: usize, seed: u64) -> Result<BenchReport> {
    if num_classes < 2 && trials > 0 {
        return Err(Error::config("benchmark needs at least two classes"));
    }
    let mut rng = rng::stream(seed, "projection-bench", num_classes as u64);
    let mut projection_ms = Vec::with_capacity(trials);
    let mut mirror_ms = Vec::with_capacity(trials);
    let cfg = AdversaryConfig::default();
    for _ in 0..trials {
        let p_ref = random_interior(&mut rng, num_classes);
        // Push the target well outside the ball: most mass on a few classes.
        let target = random_interior(&mut rng, num_classes);
        let point: Vec<f64> = target.probs().iter().map(|x| x * x * num_classes as f64).collect();
        let started = Instant::now();
        let proj = kl_ball_project(&point, &p_ref, cfg.r)?;
        projection_ms.push(started.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&proj);

        let state = AdversaryState { pi: random_interior(&mut rng, num_classes), p_emp: p_ref, step: 0 };
        let g: Vec<f64> = (0..num_classes).map(|_| rng.gen_range(0.0..2.0)).collect();
        // Repeat the cheap update so its timing is above clock resolution.
        const REPS: u32 = 20;
        let started = Instant::now();
        for _ in 0..REPS {
            std::hint::black_box(mirror_proximal_update(&state, std::hint::black_box(&g), 1.0, &cfg)?);
        }
        mirror_ms.push(started.elapsed().as_secs_f64() * 1e3 / f64::from(REPS));
    }
    Ok(BenchReport {
        num_classes,
        trials,
        median_projection_ms: median(projection_ms),
        median_mirror_ms: median(mirror_ms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn scalar_root_solves_equation() {
        for (c, mu) in [(5.0, 0.1), (-40.0, 2.0), (0.3, 1e-4), (1e3, 50.0)] {
            let q = scalar_root(c, mu);
            assert!((2.0 * q + mu * q.ln() - c).abs() < 1e-9 * c.abs().max(1.0), "c {c} mu {mu}");
        }
    }

    #[test]
    fn feasible_point_is_returned() {
        let p_ref = dist(&[0.2, 0.3, 0.5]);
        let out = kl_ball_project(p_ref.probs(), &p_ref, 0.1).unwrap();
        assert!(out.point.l1_distance(&p_ref) < 1e-15);
    }

    #[test]
    fn slack_radius_is_plain_projection() {
        let p_ref = dist(&[0.2, 0.3, 0.5]);
        let v = [1.4, -0.3, 0.2];
        let out = kl_ball_project(&v, &p_ref, -(0.2f64.ln()) + 1e-9).unwrap();
        assert_eq!(out.point, euclidean_project_simplex(&v).unwrap());
    }

    #[test]
    fn active_constraint_is_tight() {
        let p_ref = dist(&[0.1, 0.2, 0.3, 0.4]);
        let out = kl_ball_project(&[1.0, 0.0, 0.0, 0.0], &p_ref, 0.2).unwrap();
        let kl = kl_divergence(&out.point, &p_ref).unwrap();
        assert!((kl - 0.2).abs() <= 0.2 * 1e-6, "kl {kl}");
        assert!(out.relative_violation <= 1e-2);
    }

    #[test]
    fn bad_inputs() {
        let p_ref = dist(&[0.5, 0.5]);
        assert!(kl_ball_project(&[1.0], &p_ref, 0.1).is_err());
        assert!(kl_ball_project(&[1.0, 0.0], &p_ref, 0.0).is_err());
        assert!(kl_ball_project(&[1.0, 0.0], &dist(&[1.0, 0.0]), 0.1).is_err());
    }

    #[test]
    fn benchmark_smoke() {
        let empty = projection_benchmark(10, 0, 1).unwrap();
        assert_eq!(empty.median_projection_ms, None);
        assert_eq!(empty.ratio(), None);
        assert_eq!(empty.csv_row()[4], "");
        let report = projection_benchmark(10, 3, 1).unwrap();
        assert!(report.ratio().unwrap() > 0.0);
    }
}
