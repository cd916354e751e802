//! Boundary blow-up profile xi on a cap and the degenerate weight
//! rho = xi^{-2/(n-2)}.

use crate::domain::{constants, laplace_beltrami, Boundary, CapDomain, LaplaceBeltrami, ModelConstants, ScalarField};
use crate::error::{Error, Result};
use crate::linalg::Tridiagonal;

#[derive(Debug, Clone)]
pub struct XiOptions {
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    /// Largest exponent K in the schedule 2, 4, ..., 2^K when the caller does
    /// not supply one.
    pub max_level: u32,
    /// Finish with Newton on the discrete weight equation, seeded by the last
    /// xi level. Without it rho is the pointwise transform of xi_M.
    pub polish: bool,
}

impl Default for XiOptions {
    fn default() -> Self {
        Self { newton_tol: 1e-13, max_newton: 200, max_halvings: 30, max_level: 16, polish: true }
    }
}

/// One level of the monotone construction.
#[derive(Debug, Clone)]
pub struct XiLevel {
    pub m: f64,
    pub xi: Vec<f64>,
    pub newton_steps: usize,
}

#[derive(Debug, Clone)]
pub struct BlowupSolution {
    pub xi: ScalarField,
    pub rho: ScalarField,
    pub levels: Vec<XiLevel>,
    pub residual: f64,
    /// Bounds c1 <= rho/d <= c2 over the stored nodes.
    pub c1: f64,
    pub c2: f64,
    /// Whether rho was refined on the weight equation.
    pub polished: bool,
    /// Whether the interior relative change dropped below `tol` before the
    /// schedule ran out.
    pub locked: bool,
}

/// The doubling schedule 2, 4, ..., 2^k.
pub fn doubling_schedule(k: u32) -> Vec<f64> {
    (1..=k).map(|i| 2f64.powi(i as i32)).collect()
}

/// Solves the xi equation with Dirichlet value `m` by damped Newton from the
/// constant `m` (a supersolution).
pub fn solve_xi_level(domain: &CapDomain, m: f64, opts: &XiOptions) -> Result<XiLevel> {
    let k = constants(domain.n)?;
    let lb = laplace_beltrami(domain, 0);
    let mut xi = vec![m; domain.len()];
    let res = |x: &[f64]| xi_residual(&lb, &k, x, m);
    let mut r = res(&xi);
    let mut history = vec![sup(&r)];
    for step in 0..opts.max_newton {
        let jac = xi_jacobian(&lb, &k, &xi);
        let dx = jac.solve(&r.iter().map(|v| -v).collect::<Vec<_>>())?;
        let mut lam = 1.0;
        let r0 = sup(&r);
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = xi.iter().zip(&dx).map(|(a, b)| a + lam * b).collect();
            if trial.iter().all(|v| *v > 0.0) {
                let rt = res(&trial);
                if sup(&rt) < r0 || r0 == 0.0 {
                    xi = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        history.push(sup(&r));
        let rel = dx.iter().zip(&xi).map(|(d, x)| (d / x).abs()).fold(0.0, f64::max);
        if !accepted {
            // Residual at its rounding floor relative to the size of the terms.
            if r0 <= 1e-12 * xi_term_scale(&lb, &k, &xi, m) || rel < 1e-8 {
                return Ok(XiLevel { m, xi, newton_steps: step + 1 });
            }
            return Err(Error::NonConvergence { solver: "xi Newton (damping exhausted)", iterations: step + 1, residual: r0, history });
        }
        if rel < opts.newton_tol {
            return Ok(XiLevel { m, xi, newton_steps: step + 1 });
        }
    }
    Err(Error::NonConvergence { solver: "xi Newton", iterations: opts.max_newton, residual: sup(&r), history })
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn xi_residual(lb: &LaplaceBeltrami, k: &ModelConstants, xi: &[f64], m: f64) -> Vec<f64> {
    let lap = lb.apply_field(xi, m);
    let (b2, c, p) = (k.beta * k.beta, k.yamabe(), k.p());
    lap.iter().zip(xi).map(|(l, x)| l - b2 * x - c * x.powf(p)).collect()
}

fn xi_term_scale(lb: &LaplaceBeltrami, k: &ModelConstants, xi: &[f64], m: f64) -> f64 {
    let (c, p) = (k.yamabe(), k.p());
    let mut scale = lb.outer_coupling * m;
    for (i, x) in xi[lb.first..].iter().enumerate() {
        scale = scale.max(c * x.powf(p) + lb.matrix.diag[i].abs() * x);
    }
    scale
}

fn xi_jacobian(lb: &LaplaceBeltrami, k: &ModelConstants, xi: &[f64]) -> Tridiagonal {
    let (b2, c, p) = (k.beta * k.beta, k.yamabe(), k.p());
    let mut j = lb.matrix.clone();
    for (d, x) in j.diag.iter_mut().zip(xi) {
        *d -= b2 + c * p * x.powf(p - 1.0);
    }
    j
}

/// Discrete weight-equation residual `rho L rho + S rho^2 - (n/2)(|rho'|^2 - 1)`
/// at every stored node.
pub fn rho_residual_field(domain: &CapDomain, rho: &[f64], k: &ModelConstants) -> Vec<f64> {
    let lb = laplace_beltrami(domain, 0);
    let lap = lb.apply_field(rho, 0.0);
    let g = domain.gradient(rho);
    let half_n = k.n as f64 / 2.0;
    (0..rho.len()).map(|i| rho[i] * lap[i] + k.big_s * rho[i] * rho[i] - half_n * (g[i] * g[i] - 1.0)).collect()
}

/// Sup-norm of the weight-equation residual over nodes at distance at least
/// 3h from the boundary.
pub fn rho_residual(domain: &CapDomain, rho: &ScalarField, k: &ModelConstants) -> f64 {
    let r = rho_residual_field(domain, &rho.values, k);
    let lim = 3.0 * domain.h * (1.0 - 1e-9);
    r.iter().zip(&domain.nodes).filter(|(_, t)| domain.distance(**t) >= lim).fold(0.0, |m, (v, _)| m.max(v.abs()))
}

fn rho_jacobian(domain: &CapDomain, lb: &LaplaceBeltrami, rho: &[f64], k: &ModelConstants) -> Tridiagonal {
    let lap = lb.apply_field(rho, 0.0);
    let g = domain.gradient(rho);
    let m = rho.len();
    let n2 = k.n as f64;
    let a = &lb.matrix;
    let mut diag = vec![0.0; m];
    let mut lower = vec![0.0; m - 1];
    let mut upper = vec![0.0; m - 1];
    let inv2h = 1.0 / (2.0 * domain.h);
    for i in 0..m {
        diag[i] = lap[i] + rho[i] * a.diag[i] + 2.0 * k.big_s * rho[i];
        if i + 1 < m {
            upper[i] = rho[i] * a.upper[i];
            // d/d rho_{i+1} of -(n/2) g_i^2 with g_i = (rho_{i+1} - rho_{i-1}) / 2h
            if !(i == 0 && domain.has_pole()) {
                upper[i] -= n2 * g[i] * inv2h;
            }
        }
        if i > 0 {
            lower[i - 1] = rho[i] * a.lower[i - 1] + n2 * g[i] * inv2h;
        }
    }
    if !domain.has_pole() {
        // nothing extra: both neighbours of every stored node are stored or Dirichlet
    }
    Tridiagonal::new(lower, diag, upper)
}

/// Largest magnitude among the individual terms of the weight equation,
/// used to place the rounding floor of its residual.
fn rho_term_scale(domain: &CapDomain, lb: &LaplaceBeltrami, rho: &[f64], k: &ModelConstants) -> f64 {
    let a = &lb.matrix;
    let g = domain.gradient(rho);
    let m = rho.len();
    (0..m)
        .map(|i| {
            let mut lap = a.diag[i].abs() * rho[i];
            if i > 0 {
                lap += a.lower[i - 1].abs() * rho[i - 1];
            }
            if i + 1 < m {
                lap += a.upper[i].abs() * rho[i + 1];
            }
            rho[i] * lap + k.big_s * rho[i] * rho[i] + 0.5 * k.n as f64 * (g[i] * g[i] + 1.0)
        })
        .fold(0.0, f64::max)
}

/// Newton on the discrete weight equation from `seed`.
pub fn polish_rho(domain: &CapDomain, seed: &[f64], opts: &XiOptions) -> Result<Vec<f64>> {
    let k = constants(domain.n)?;
    let lb = laplace_beltrami(domain, 0);
    let mut rho = seed.to_vec();
    let mut r = rho_residual_field(domain, &rho, &k);
    let mut history = vec![sup(&r)];
    for step in 0..opts.max_newton {
        let jac = rho_jacobian(domain, &lb, &rho, &k);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = jac.solve_pivoted(&neg);
        let r0 = sup(&r);
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = rho.iter().zip(&dx).map(|(a, b)| a + lam * b).collect();
            if trial.iter().all(|v| *v > 0.0) {
                let rt = rho_residual_field(domain, &trial, &k);
                if sup(&rt) <= r0 {
                    rho = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        history.push(sup(&r));
        let floor = 100.0 * f64::EPSILON * rho_term_scale(domain, &lb, &rho, &k);
        if sup(&r) <= floor {
            return Ok(rho);
        }
        let scale = sup(&rho);
        let step_size = sup(&dx);
        if !accepted || step_size <= opts.newton_tol * scale {
            if sup(&r) < 1e-9 || sup(&r) <= 1e3 * floor {
                return Ok(rho);
            }
            return Err(Error::NonConvergence { solver: "weight-equation Newton", iterations: step + 1, residual: sup(&r), history });
        }
    }
    Err(Error::NonConvergence { solver: "weight-equation Newton", iterations: opts.max_newton, residual: sup(&r), history })
}

/// Nodes used by the interior locking rule: distance at least
/// min(0.2, 0.4 max d) from the boundary.
fn locking_nodes(domain: &CapDomain) -> Vec<usize> {
    let d = domain.distances();
    let dmax = d.iter().cloned().fold(0.0, f64::max);
    let lim = 0.2f64.min(0.4 * dmax);
    (0..d.len()).filter(|&i| d[i] >= lim).collect()
}

/// Monotone construction over the schedule, stopping once the relative
/// change of interior values drops below `tol`, followed by the optional polish on the weight equation.
pub fn solve_xi(domain: &CapDomain, m_schedule: &[f64], tol: f64) -> Result<BlowupSolution> {
    solve_xi_with(domain, m_schedule, tol, &XiOptions::default())
}

pub fn solve_xi_with(domain: &CapDomain, m_schedule: &[f64], tol: f64, opts: &XiOptions) -> Result<BlowupSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let default_schedule;
    let schedule = if m_schedule.is_empty() {
        default_schedule = doubling_schedule(opts.max_level);
        &default_schedule[..]
    } else {
        m_schedule
    };
    if schedule.windows(2).any(|w| w[1] <= w[0]) || schedule[0] < 1.0 {
        return Err(Error::InvalidInput("M schedule must be strictly increasing and >= 1".into()));
    }
    let k = constants(domain.n)?;
    let lock = locking_nodes(domain);
    let mut levels: Vec<XiLevel> = Vec::new();
    let mut locked = false;
    for &m in schedule {
        let level = solve_xi_level(domain, m, opts)?;
        if let Some(prev) = levels.last() {
            let scale = sup(&level.xi);
            for (i, (a, b)) in prev.xi.iter().zip(&level.xi).enumerate() {
                if *b < *a - 1e-12 * scale {
                    return Err(Error::Consistency(format!("xi levels not monotone at node {i}: {a} at M={} vs {b} at M={m}", prev.m)));
                }
            }
            let change = lock.iter().map(|&i| ((level.xi[i] - prev.xi[i]) / level.xi[i]).abs()).fold(0.0, f64::max);
            levels.push(level);
            if change < tol {
                locked = true;
                break;
            }
        } else {
            levels.push(level);
        }
    }
    let last = levels.last().expect("schedule is non-empty");
    let exponent = -2.0 / (domain.n as f64 - 2.0);
    let seed: Vec<f64> = last.xi.iter().map(|x| x.powf(exponent)).collect();
    let rho_vals = if opts.polish {
        let rho = polish_rho(domain, &seed, opts)?;
        let seed_scale = sup(&seed);
        let drift = rho.iter().zip(&seed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift > 0.25 * seed_scale {
            return Err(Error::Consistency(format!("weight-equation Newton moved {drift} away from the xi seed (scale {seed_scale})")));
        }
        rho
    } else {
        seed
    };
    let rho = ScalarField::new(rho_vals, Boundary::Dirichlet(0.0))?;
    let xi_vals: Vec<f64> = rho.values.iter().map(|r| r.powf(-k.beta)).collect();
    let xi = ScalarField::new(xi_vals, Boundary::BlowUp)?;
    let residual = rho_residual(domain, &rho, &k);
    let (c1, c2) = rho_over_distance(domain, &rho.values);
    Ok(BlowupSolution { xi, rho, levels, residual, c1, c2, polished: opts.polish, locked })
}

fn rho_over_distance(domain: &CapDomain, rho: &[f64]) -> (f64, f64) {
    let mut c1 = f64::INFINITY;
    let mut c2: f64 = 0.0;
    for (r, t) in rho.iter().zip(&domain.nodes) {
        let q = r / domain.distance(*t);
        c1 = c1.min(q);
        c2 = c2.max(q);
    }
    (c1, c2)
}

pub fn rho_from_xi(xi: &ScalarField, n: usize) -> Result<ScalarField> {
    let k = constants(n)?;
    if let Some(i) = xi.values.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::InvalidInput(format!("xi must be positive, node {i} has {}", xi.values[i])));
    }
    let e = -1.0 / k.beta;
    Ok(ScalarField::dirichlet_zero(xi.values.iter().map(|x| x.powf(e)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub max_rho: f64,
    pub max_grad: f64,
    pub boundary_slope: f64,
    /// Least c >= 0 with |rho'| <= 1 + c rho on all stored nodes.
    pub c_least: f64,
}

pub fn gradient_diagnostics(domain: &CapDomain, sol: &BlowupSolution) -> GradientReport {
    let rho = &sol.rho.values;
    let g = domain.gradient(rho);
    let max_rho = rho.iter().cloned().fold(0.0, f64::max);
    let max_grad = g.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let boundary_slope = domain.outer_boundary_slope(rho).abs();
    let c_least = g.iter().zip(rho).map(|(gi, r)| (gi.abs() - 1.0) / r).fold(0.0, f64::max);
    GradientReport { max_rho, max_grad, boundary_slope, c_least }
}

/// The explicit n = 3 subsolution, singular at theta = 0.
pub fn barrier_eta_n3(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta <= std::f64::consts::PI) {
        return Err(Error::InvalidInput(format!("barrier needs 0 < theta <= pi, got {theta}")));
    }
    let s = (0.5 * theta).sin();
    Ok(12f64.powf(-0.25) * (s.powf(-0.5) - s.sqrt() / 11.0))
}

/// `Delta eta - (3/4) eta^5 - (1/4) eta` on the 2-sphere, by centred
/// differences with step `dh`.
pub fn barrier_defect_n3(theta: f64, dh: f64) -> Result<f64> {
    let e = |t: f64| barrier_eta_n3(t);
    let (em, e0, ep) = (e(theta - dh)?, e(theta)?, e((theta + dh).min(std::f64::consts::PI))?);
    let ep = if theta + dh > std::f64::consts::PI { em } else { ep };
    let d2 = (ep - 2.0 * e0 + em) / (dh * dh);
    let d1 = (ep - em) / (2.0 * dh);
    let cot = if theta < std::f64::consts::PI { theta.cos() / theta.sin() } else { 0.0 };
    let lap = if theta < std::f64::consts::PI { d2 + cot * d1 } else { 2.0 * d2 };
    Ok(lap - 0.75 * e0.powi(5) - 0.25 * e0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_cap;
    use std::f64::consts::PI;

    #[test]
    fn half_sphere_matches_cosine() {
        for n in [3usize, 4] {
            let d = make_cap(n, PI / 2.0, 100).unwrap();
            let sol = solve_xi(&d, &doubling_schedule(20), 1e-2).unwrap();
            let err = sol.rho.values.iter().zip(&d.nodes).map(|(r, t)| (r - t.cos()).abs()).fold(0.0, f64::max);
            assert!(err <= 5.0 * d.h * d.h + 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn rho_from_xi_examples() {
        let one = ScalarField::dirichlet_zero(vec![1.0; 4]);
        assert!(rho_from_xi(&one, 3).unwrap().values.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let t: Vec<f64> = (1..10).map(|k| k as f64 * 0.1).collect();
        let xi = ScalarField::dirichlet_zero(t.iter().map(|t| t.cos().powf(-0.5)).collect());
        let r = rho_from_xi(&xi, 3).unwrap();
        for (a, t) in r.values.iter().zip(&t) {
            assert!((a - t.cos()).abs() < 1e-14);
        }
        let c = ScalarField::dirichlet_zero(vec![4.0; 3]);
        assert!(rho_from_xi(&c, 6).unwrap().values.iter().all(|v| (*v - 0.5).abs() < 1e-15));
        assert!(rho_from_xi(&ScalarField::dirichlet_zero(vec![1.0, 0.0]), 3).is_err());
    }

    #[test]
    fn residual_of_sampled_cosine_is_second_order() {
        let k = constants(3).unwrap();
        let mut prev = None;
        for n_int in [100usize, 200, 400] {
            let d = make_cap(3, PI / 2.0, n_int).unwrap();
            let rho = ScalarField::sample(&d, f64::cos);
            let r = rho_residual(&d, &rho, &k);
            assert!(r <= 2.0 * d.h * d.h);
            if let Some(p) = prev {
                assert!(p / r >= 3.5);
            }
            prev = Some(r);
        }
    }

    #[test]
    fn distance_is_not_a_solution() {
        let k = constants(3).unwrap();
        let d = make_cap(3, 1.0, 100).unwrap();
        let rho = ScalarField::sample(&d, |t| 1.0 - t);
        assert!(rho_residual(&d, &rho, &k) > 0.1);
    }

    #[test]
    fn barrier_values() {
        let v = barrier_eta_n3(PI).unwrap();
        assert!((v - 12f64.powf(-0.25) * 10.0 / 11.0).abs() < 1e-15);
        assert!((v.powi(-2) - 12f64.sqrt() * 1.21).abs() < 1e-12);
        assert!(v.powi(-2) < 4.2);
        assert!(barrier_eta_n3(1e-8).unwrap() > 1e3);
        assert!(barrier_eta_n3(0.0).is_err());
        for i in 1..200 {
            let t = i as f64 * PI / 200.0;
            assert!(barrier_defect_n3(t, 1e-4).unwrap() > 0.0, "theta={t}");
        }
    }
}
