//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the library's optimisers.
#![allow(dead_code)]

/// `Σ p log(p/q)` with `0 log 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `α/(2λ)·KL(π, p) + 1/(2λ)·KL(π, π_t) − ⟨g, π⟩`, written out directly.
pub fn prox_objective(pi: &[f64], pi_t: &[f64], p_emp: &[f64], g: &[f64], alpha: f64, lambda: f64) -> f64 {
    let s = 1.0 / (2.0 * lambda);
    alpha * s * kl(pi, p_emp) + s * kl(pi, pi_t) - dot(g, pi)
}

/// Calls `visit` on every point of the grid `{k/n : Σk = n}` in Δ^l.
pub fn for_each_grid_point(l: usize, n: usize, visit: &mut impl FnMut(&[f64])) {
    fn rec(idx: usize, left: usize, n: usize, buf: &mut Vec<f64>, visit: &mut impl FnMut(&[f64])) {
        if idx + 1 == buf.len() {
            buf[idx] = left as f64 / n as f64;
            visit(buf);
            return;
        }
        for k in 0..=left {
            buf[idx] = k as f64 / n as f64;
            rec(idx + 1, left - k, n, buf, visit);
        }
    }
    let mut buf = vec![0.0; l];
    rec(0, n, n, &mut buf, visit);
}

/// Minimises `f` over Δ^l: best point of a coarse grid, then pattern search
/// over pairwise mass transfers with a halving step.
pub fn simplex_grid_argmin(l: usize, coarse: usize, f: impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut best = vec![1.0 / l as f64; l];
    let mut best_val = f(&best);
    for_each_grid_point(l, coarse, &mut |x| {
        let v = f(x);
        if v < best_val {
            best_val = v;
            best = x.to_vec();
        }
    });
    let mut step = 0.5 / coarse as f64;
    let mut trial = best.clone();
    while step > 1e-13 {
        let mut improved = false;
        for i in 0..l {
            for j in 0..l {
                if i == j {
                    continue;
                }
                let delta = step.min(best[i]);
                if delta <= 0.0 {
                    continue;
                }
                trial.copy_from_slice(&best);
                trial[i] -= delta;
                trial[j] += delta;
                let v = f(&trial);
                if v < best_val {
                    best_val = v;
                    best.copy_from_slice(&trial);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (best, best_val)
}

/// Point on the ray `p + t·d` (Σd = 0) where it leaves
/// `{KL(· ‖ p) ≤ tau} ∩ Δ`.
fn ray_exit(p: &[f64], d: &[f64], tau: f64) -> Vec<f64> {
    let at = |t: f64| -> Vec<f64> { p.iter().zip(d).map(|(a, b)| (a + t * b).max(0.0)).collect() };
    let t_face = p.iter().zip(d).filter(|(_, &b)| b < 0.0).map(|(a, b)| -a / b).fold(f64::INFINITY, f64::min);
    if kl(&at(t_face), p) <= tau {
        return at(t_face);
    }
    let (mut lo, mut hi) = (0.0, t_face);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kl(&at(mid), p) <= tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(lo)
}

/// `max ⟨π, e⟩` over `KL(π ‖ p) ≤ tau` on Δ³ by scanning the boundary of the
/// feasible set in every tangent direction, then refining the best angle.
pub fn worst_case_l3(e: &[f64], p: &[f64], tau: f64) -> (f64, Vec<f64>) {
    assert_eq!(e.len(), 3);
    let (s2, s6) = (2f64.sqrt(), 6f64.sqrt());
    let dir = |phi: f64| -> Vec<f64> {
        let (c, s) = (phi.cos(), phi.sin());
        vec![c / s2 + s / s6, -c / s2 + s / s6, -2.0 * s / s6]
    };
    let value = |phi: f64| {
        let x = ray_exit(p, &dir(phi), tau);
        (dot(&x, e), x)
    };
    const SCAN: usize = 4000;
    let width = std::f64::consts::TAU / SCAN as f64;
    let mut best = (f64::NEG_INFINITY, Vec::new(), 0.0);
    for k in 0..SCAN {
        let phi = k as f64 * width;
        let (v, x) = value(phi);
        if v > best.0 {
            best = (v, x, phi);
        }
    }
    let (mut lo, mut hi) = (best.2 - width, best.2 + width);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if value(m1).0 < value(m2).0 {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let refined = value(0.5 * (lo + hi));
    if refined.0 > best.0 {
        (refined.0, refined.1)
    } else {
        (best.0, best.1)
    }
}

/// Max of `⟨π, e⟩` over grid points of Δ^l with `KL(π ‖ p) ≤ tau`.
pub fn worst_case_grid(e: &[f64], p: &[f64], tau: f64, n: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for_each_grid_point(e.len(), n, &mut |x| {
        if kl(x, p) <= tau {
            best = best.max(dot(x, e));
        }
    });
    best
}
