//! Cylinder problems: the transformed solution u_hat, the difference field
//! v, the nonlinearity F, closed-form ball solutions and slice diagnostics.

use crate::domain::{laplace_beltrami, Boundary, CapDomain, LaplaceBeltrami, ModelConstants, ScalarField};
use crate::error::{Error, Result};
use crate::expansion::{auto_window, fit_decay, DecayFit};
use crate::linalg::BandMatrix;
use crate::rho::{solve_xi_level, XiOptions};
use crate::spectral::{boundary_exponent_fit, Spectrum};
use num::{BigRational, ToPrimitive};

/// Below this |sigma| the four-term Taylor series of h is used.
pub const SERIES_SWITCH: f64 = 1e-4;

/// Number of power-series coefficients of h kept by [`Nonlinearity`].
const SERIES_TERMS: usize = 32;

/// Coefficients b_i = c * binom(p, i + 2) of h(sigma) = sum_i b_i sigma^i,
/// computed in exact rational arithmetic.
pub fn h_coefficients(n: usize, count: usize) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("dimension must be at least 3, got {n}")));
    }
    let ni = n as i64;
    let p = BigRational::new((ni + 2).into(), (ni - 2).into());
    let c = BigRational::new((ni * (ni - 2)).into(), 4.into());
    // binom(p, k) built up from binom(p, 0) = 1
    let mut binom = BigRational::from_integer(1.into());
    let mut out = Vec::with_capacity(count);
    for k in 0..count + 2 {
        if k >= 2 {
            out.push((&c * &binom).to_f64().unwrap_or(f64::NAN));
        }
        let kk = BigRational::from_integer((k as i64).into());
        binom = binom * (&p - &kk) / (&kk + BigRational::from_integer(1.into()));
    }
    Ok(out)
}

/// h, F and F' for one dimension.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    pub n: usize,
    c: f64,
    p: f64,
    beta: f64,
    b: Vec<f64>,
}

impl Nonlinearity {
    pub fn new(n: usize) -> Result<Self> {
        let nf = n as f64;
        Ok(Self { n, c: nf * (nf - 2.0) / 4.0, p: (nf + 2.0) / (nf - 2.0), beta: (nf - 2.0) / 2.0, b: h_coefficients(n, SERIES_TERMS)? })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.b
    }

    fn poly(&self, sigma: f64, terms: usize) -> f64 {
        self.b[..terms].iter().rev().fold(0.0, |acc, b| acc * sigma + b)
    }

    /// Four-term Taylor polynomial.
    pub fn h_series(&self, sigma: f64) -> f64 {
        self.poly(sigma, 4)
    }

    /// Full evaluation: convergent power series for |sigma| < 0.1, closed
    /// form with expm1/ln_1p otherwise.
    pub fn h_direct(&self, sigma: f64) -> f64 {
        if sigma.abs() < 0.1 {
            self.poly(sigma, SERIES_TERMS)
        } else {
            self.c * ((self.p * sigma.ln_1p()).exp_m1() - self.p * sigma) / (sigma * sigma)
        }
    }

    pub fn h(&self, sigma: f64) -> f64 {
        if sigma.abs() < SERIES_SWITCH {
            self.h_series(sigma)
        } else {
            self.h_direct(sigma)
        }
    }

    /// F(v) at one node; `None` outside the positivity regime.
    pub fn f(&self, rho: f64, v: f64) -> Option<f64> {
        let sigma = rho.powf(self.beta) * v;
        (sigma > -1.0).then(|| rho.powf(self.beta - 2.0) * v * v * self.h(sigma))
    }

    /// dF/dv at one node.
    pub fn df(&self, rho: f64, v: f64) -> Option<f64> {
        let sigma = rho.powf(self.beta) * v;
        (sigma > -1.0).then(|| self.c * self.p / (rho * rho) * ((self.p - 1.0) * sigma.ln_1p()).exp_m1())
    }
}

/// h(sigma) = c sigma^-2 [(1+sigma)^p - 1 - p sigma].
pub fn eval_h(sigma: f64, n: usize) -> Result<f64> {
    if !(sigma > -1.0) {
        return Err(Error::InvalidInput(format!("h is defined for sigma > -1, got {sigma}")));
    }
    Ok(Nonlinearity::new(n)?.h(sigma))
}

/// Uniform grid on [t0, t_max] with `slices` points including both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_max: f64,
    pub ht: f64,
    pub slices: usize,
}

impl TimeGrid {
    /// The step is adjusted so that it divides the interval.
    pub fn new(t0: f64, t_max: f64, ht: f64) -> Result<Self> {
        if !(ht > 0.0 && t_max > t0) {
            return Err(Error::InvalidInput(format!("bad time grid [{t0}, {t_max}] step {ht}")));
        }
        let k = ((t_max - t0) / ht).round().max(2.0) as usize;
        Ok(Self { t0, t_max, ht: (t_max - t0) / k as f64, slices: k + 1 })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.ht
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.slices).map(|k| self.time(k)).collect()
    }
}

/// Values on the tensor grid, one row per time slice including both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderField {
    pub grid: TimeGrid,
    pub values: Vec<Vec<f64>>,
    /// Dirichlet value on the lateral boundary.
    pub lateral: f64,
}

impl CylinderField {
    pub fn zeros(grid: TimeGrid, nodes: usize) -> Self {
        Self { grid, values: vec![vec![0.0; nodes]; grid.slices], lateral: 0.0 }
    }

    pub fn slice(&self, k: usize) -> ScalarField {
        ScalarField { values: self.values[k].clone(), boundary: Boundary::Dirichlet(self.lateral) }
    }

    pub fn nodes(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &CylinderField) -> CylinderField {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
        CylinderField { grid: self.grid, values, lateral: self.lateral - other.lateral }
    }
}

/// A cap together with its blow-up weight.
#[derive(Debug, Clone)]
pub struct ConeProblem {
    pub domain: CapDomain,
    pub rho: ScalarField,
    pub constants: ModelConstants,
}

impl ConeProblem {
    pub fn new(domain: CapDomain, rho: ScalarField, constants: ModelConstants) -> Result<Self> {
        if rho.len() != domain.len() || constants.n != domain.n {
            return Err(Error::InvalidInput("weight, constants and grid disagree".into()));
        }
        if rho.values.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidInput("weight must be positive at every node".into()));
        }
        Ok(Self { domain, rho, constants })
    }
}

/// F(v) on every node of every slice.
pub fn eval_f(v: &CylinderField, rho: &ScalarField, k: &ModelConstants) -> Result<CylinderField> {
    let nl = Nonlinearity::new(k.n)?;
    let mut out = CylinderField::zeros(v.grid, v.nodes());
    let mut worst: Option<(usize, f64)> = None;
    for (row, src) in out.values.iter_mut().zip(&v.values) {
        for (j, (o, x)) in row.iter_mut().zip(src).enumerate() {
            match nl.f(rho.values[j], *x) {
                Some(f) => *o = f,
                None => {
                    let s = rho.values[j].powf(k.beta) * x;
                    if worst.is_none_or(|w| s < w.1) {
                        worst = Some((j, s));
                    }
                }
            }
        }
    }
    match worst {
        Some((node, value)) => Err(Error::Regime { node, value }),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonKind {
    InteriorBall,
    ExteriorBall,
}

/// Explicit solutions of the equation Delta u = c u^p in a ball and
/// outside a ball.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSolution {
    pub kind: ComparisonKind,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl ComparisonSolution {
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        closed_form(self.kind, self.radius, &self.center, x)
    }
}

/// `(2R/(R^2-|x-x0|^2))^beta` inside, `(2r/(|x-x0|^2-r^2))^beta` outside; the
/// dimension is `x.len()`.
pub fn closed_form(kind: ComparisonKind, radius: f64, x0: &[f64], x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 3 || x0.len() != n || !(radius > 0.0) {
        return Err(Error::InvalidInput("need matching points of dimension >= 3 and a positive radius".into()));
    }
    let d2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
    let r2 = radius * radius;
    let denom = match kind {
        ComparisonKind::InteriorBall => r2 - d2,
        ComparisonKind::ExteriorBall => d2 - r2,
    };
    if !(denom > 0.0) {
        return Err(Error::InvalidInput(format!("point outside the domain of the {kind:?} solution")));
    }
    Ok((2.0 * radius / denom).powf((n as f64 - 2.0) / 2.0))
}

/// Law of a cylinder problem d_tt w + Delta w - beta^2 w + potential w = G(w).
struct CylinderSystem<'a> {
    lb: LaplaceBeltrami,
    potential: Vec<f64>,
    grid: TimeGrid,
    lateral: f64,
    inflow: &'a [f64],
    outflow: &'a [f64],
    beta2: f64,
    nonlin: &'a dyn Fn(usize, f64) -> Option<(f64, f64)>,
}

impl CylinderSystem<'_> {
    fn nodes(&self) -> usize {
        self.lb.unknowns()
    }

    fn interior(&self) -> usize {
        self.grid.slices - 2
    }

    fn row<'b>(&'b self, w: &'b [f64], k: usize) -> &'b [f64] {
        let nt = self.nodes();
        match k {
            0 => self.inflow,
            _ if k == self.grid.slices - 1 => self.outflow,
            _ => &w[(k - 1) * nt..k * nt],
        }
    }

    /// Residual at interior slices; `None` outside the nonlinearity's regime.
    fn residual(&self, w: &[f64]) -> Option<Vec<f64>> {
        let nt = self.nodes();
        let ih2 = 1.0 / (self.grid.ht * self.grid.ht);
        let mut out = Vec::with_capacity(w.len());
        for k in 1..=self.interior() {
            let (a, b, c) = (self.row(w, k - 1), self.row(w, k), self.row(w, k + 1));
            let lap = self.lb.apply_field(b, self.lateral);
            for j in 0..nt {
                let (g, _) = (self.nonlin)(j, b[j])?;
                out.push((a[j] - 2.0 * b[j] + c[j]) * ih2 + lap[j] + (self.potential[j] - self.beta2) * b[j] - g);
            }
        }
        Some(out)
    }

    fn jacobian(&self, w: &[f64]) -> Result<BandMatrix> {
        let nt = self.nodes();
        let ih2 = 1.0 / (self.grid.ht * self.grid.ht);
        let dim = nt * self.interior();
        let mut jac = BandMatrix::zeros(dim, nt, nt);
        let m = &self.lb.matrix;
        for k in 0..self.interior() {
            let base = k * nt;
            for j in 0..nt {
                let i = base + j;
                let (_, dg) = (self.nonlin)(j, w[i]).ok_or(Error::Regime { node: j, value: w[i] })?;
                jac.add(i, i, m.diag[j] - 2.0 * ih2 + self.potential[j] - self.beta2 - dg);
                if j + 1 < nt {
                    jac.add(i, i + 1, m.upper[j]);
                    jac.add(i + 1, i, m.lower[j]);
                }
                if k > 0 {
                    jac.add(i, i - nt, ih2);
                }
                if k + 1 < self.interior() {
                    jac.add(i, i + nt, ih2);
                }
            }
        }
        Ok(jac)
    }

    /// Size of the individual terms, for a relative stopping test.
    fn term_scale(&self, w: &[f64]) -> f64 {
        let ih2 = 1.0 / (self.grid.ht * self.grid.ht);
        let dmax = self.lb.matrix.diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let wmax = w.iter().chain(self.inflow).chain(self.outflow).fold(self.lateral.abs(), |m, v| m.max(v.abs()));
        wmax * (4.0 * ih2 + 2.0 * dmax)
    }

    fn solve(&self, mut w: Vec<f64>) -> Result<Vec<f64>> {
        let sup = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut r = self.residual(&w).ok_or_else(|| Error::InvalidInput("initial iterate outside the positivity regime".into()))?;
        let mut history = vec![sup(&r)];
        for it in 0..40 {
            let r0 = sup(&r);
            let floor = 64.0 * f64::EPSILON * self.term_scale(&w);
            if r0 <= floor {
                return Ok(w);
            }
            let lu = self.jacobian(&w)?.factor()?;
            let dw = lu.solve(&r.iter().map(|v| -v).collect::<Vec<_>>());
            let mut lam = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + lam * b).collect();
                if let Some(rt) = self.residual(&trial) {
                    if sup(&rt) < r0 {
                        w = trial;
                        r = rt;
                        accepted = true;
                        break;
                    }
                }
                lam *= 0.5;
            }
            history.push(sup(&r));
            let step = sup(&dw);
            let wmax = sup(&w).max(self.lateral.abs());
            if !accepted {
                if r0 <= 1e4 * floor {
                    return Ok(w);
                }
                return Err(Error::NonConvergence {
                    solver: "cylinder Newton (damping exhausted)",
                    iterations: it + 1,
                    residual: r0,
                    history,
                });
            }
            if lam == 1.0 && step <= 1e-14 * wmax {
                return Ok(w);
            }
        }
        Err(Error::NonConvergence { solver: "cylinder Newton", iterations: 40, residual: sup(&r), history })
    }
}

fn assemble(grid: TimeGrid, inflow: &[f64], outflow: &[f64], interior: Vec<f64>, lateral: f64) -> CylinderField {
    let nt = inflow.len();
    let mut values = Vec::with_capacity(grid.slices);
    values.push(inflow.to_vec());
    values.extend(interior.chunks(nt).map(<[f64]>::to_vec));
    values.push(outflow.to_vec());
    CylinderField { grid, values, lateral }
}

/// Solves `d_tt v + L v - beta^2 v = F(v)` with zero lateral data, `v = g` at
/// t0 and `v = 0` at t_max.
pub fn solve_v(problem: &ConeProblem, inflow: &ScalarField, grid: TimeGrid) -> Result<CylinderField> {
    let (d, rho, k) = (&problem.domain, &problem.rho.values, &problem.constants);
    if inflow.len() != d.len() {
        return Err(Error::InvalidInput("inflow does not match the grid".into()));
    }
    if inflow.boundary_value() != 0.0 {
        return Err(Error::InvalidInput("inflow must vanish on the lateral boundary".into()));
    }
    if grid.slices < 3 {
        return Err(Error::InvalidInput("need at least one interior slice".into()));
    }
    let nl = Nonlinearity::new(k.n)?;
    if let Some(j) = (0..d.len()).find(|&j| rho[j].powf(k.beta) * inflow.values[j] <= -1.0) {
        return Err(Error::Regime { node: j, value: rho[j].powf(k.beta) * inflow.values[j] });
    }
    let g = |j: usize, v: f64| Some((nl.f(rho[j], v)?, nl.df(rho[j], v)?));
    let zero = vec![0.0; d.len()];
    let sys = CylinderSystem {
        lb: laplace_beltrami(d, 0),
        potential: rho.iter().map(|r| -k.kappa / (r * r)).collect(),
        grid,
        lateral: 0.0,
        inflow: &inflow.values,
        outflow: &zero,
        beta2: k.beta * k.beta,
        nonlin: &g,
    };
    // Start from the linear decay of each node's inflow value.
    let mut w0 = Vec::with_capacity(d.len() * (grid.slices - 2));
    for kk in 1..grid.slices - 1 {
        let s = (grid.t_max - grid.time(kk)) / (grid.t_max - grid.t0);
        w0.extend(inflow.values.iter().map(|x| x * s * (-(grid.time(kk) - grid.t0)).exp()));
    }
    let w = sys.solve(w0)?;
    Ok(assemble(grid, &inflow.values, &zero, w, 0.0))
}

/// End conditions for [`solve_uhat_with`]; `None` means the slice profile.
#[derive(Debug, Clone, Default)]
pub struct UhatEnds {
    pub inflow: Option<Vec<f64>>,
    pub outflow: Option<Vec<f64>>,
}

/// Transformed solution with lateral value `m` and the level-`m` slice
/// profile at both ends.
pub fn solve_uhat(domain: &CapDomain, grid: TimeGrid, m: f64, k: &ModelConstants) -> Result<CylinderField> {
    solve_uhat_with(domain, grid, m, k, &UhatEnds::default())
}

pub fn solve_uhat_with(domain: &CapDomain, grid: TimeGrid, m: f64, k: &ModelConstants, ends: &UhatEnds) -> Result<CylinderField> {
    if !(m >= 2.0) {
        return Err(Error::InvalidInput(format!("lateral value must be at least 2, got {m}")));
    }
    if grid.t_max - grid.t0 < 5.0 - 1e-12 {
        return Err(Error::InvalidInput("the cylinder must have length at least 5".into()));
    }
    let profile = solve_xi_level(domain, m, &XiOptions::default())?.xi;
    let inflow = ends.inflow.clone().unwrap_or_else(|| profile.clone());
    let outflow = ends.outflow.clone().unwrap_or_else(|| profile.clone());
    for end in [&inflow, &outflow] {
        if end.len() != domain.len() || end.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput("end data must be positive on every node".into()));
        }
    }
    let (c, p) = (k.yamabe(), k.p());
    let g = |_: usize, u: f64| (u > 0.0).then(|| (c * u.powf(p), c * p * u.powf(p - 1.0)));
    let sys = CylinderSystem {
        lb: laplace_beltrami(domain, 0),
        potential: vec![0.0; domain.len()],
        grid,
        lateral: m,
        inflow: &inflow,
        outflow: &outflow,
        beta2: k.beta * k.beta,
        nonlin: &g,
    };
    let mut w0 = Vec::with_capacity(domain.len() * (grid.slices - 2));
    for kk in 1..grid.slices - 1 {
        let decay = (-3.0 * (grid.time(kk) - grid.t0)).exp();
        let back = (-3.0 * (grid.t_max - grid.time(kk))).exp();
        w0.extend((0..domain.len()).map(|j| profile[j] + (inflow[j] - profile[j]) * decay + (outflow[j] - profile[j]) * back));
    }
    let w = sys.solve(w0)?;
    if let Some(j) = w.iter().position(|u| !(*u > 0.0)) {
        return Err(Error::Regime { node: j % domain.len(), value: w[j] });
    }
    Ok(assemble(grid, &inflow, &outflow, w, m))
}

/// Discrete `d_tt v + L v - beta^2 v` at the interior slices.
pub fn apply_linear(problem: &ConeProblem, v: &CylinderField) -> Vec<Vec<f64>> {
    let (d, rho, k) = (&problem.domain, &problem.rho.values, &problem.constants);
    let lb = laplace_beltrami(d, 0);
    let ih2 = 1.0 / (v.grid.ht * v.grid.ht);
    let b2 = k.beta * k.beta;
    (1..v.grid.slices - 1)
        .map(|kk| {
            let (a, b, c) = (&v.values[kk - 1], &v.values[kk], &v.values[kk + 1]);
            let lap = lb.apply_field(b, v.lateral);
            (0..b.len()).map(|j| (a[j] - 2.0 * b[j] + c[j]) * ih2 + lap[j] - (k.kappa / (rho[j] * rho[j]) + b2) * b[j]).collect()
        })
        .collect()
}

/// Per-slice norms of a difference field with fitted decay rates.
#[derive(Debug, Clone)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub l2: Vec<f64>,
    pub gradient: Vec<f64>,
    pub over_rho: Vec<f64>,
    /// (q, ||F(v)(t)||_q) for q = 1, 2 and max(2, n/2) + 1.
    pub nonlinear: Vec<(f64, Vec<f64>)>,
    pub l2_fit: Option<DecayFit>,
    pub gradient_fit: Option<DecayFit>,
    pub over_rho_fit: Option<DecayFit>,
    pub nonlinear_fits: Vec<(f64, Option<DecayFit>)>,
    /// Boundary exponent of each interior slice, where measurable.
    pub boundary_slopes: Vec<Option<f64>>,
    /// gamma_1 of the supplied spectrum.
    pub gamma1: f64,
}

fn lq_norm(w: &[f64], f: &[f64], q: f64) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b.abs().powf(q)).sum::<f64>().powf(1.0 / q)
}

/// Fits over the default window [t0 + 2, t_max - 2], narrowed to where the
/// local slope is stable.
fn report_fit(times: &[f64], values: &[f64], grid: &TimeGrid) -> Option<DecayFit> {
    let outer = (grid.t0 + 2.0, grid.t_max - 2.0);
    if values.iter().all(|v| *v == 0.0) {
        return None;
    }
    let window = auto_window(times, values, outer).unwrap_or(outer);
    fit_decay(times, values, 0, Some(window)).ok()
}

pub fn decay_report(v: &CylinderField, problem: &ConeProblem, spectrum: &Spectrum) -> Result<DecayReport> {
    let d = &problem.domain;
    let w = d.weights();
    let rho = &problem.rho;
    let f = eval_f(v, rho, &problem.constants)?;
    let times = v.grid.times();
    let qs = [1.0, 2.0, (problem.constants.n as f64 / 2.0).max(2.0) + 1.0];
    let mut l2 = Vec::new();
    let mut gradient = Vec::new();
    let mut over_rho = Vec::new();
    let mut nonlinear: Vec<(f64, Vec<f64>)> = qs.iter().map(|q| (*q, Vec::new())).collect();
    let mut boundary_slopes = Vec::new();
    let rmax = rho.values.iter().fold(0.0f64, |m, r| m.max(*r));
    let window = (2.0 * d.h, 0.25 * rmax);
    for (kk, row) in v.values.iter().enumerate() {
        l2.push(d.norm(row));
        gradient.push(d.norm(&d.gradient_with_boundary(row, v.lateral)));
        let q: Vec<f64> = row.iter().zip(&rho.values).map(|(a, r)| a / r).collect();
        over_rho.push(d.norm(&q));
        for (q, out) in nonlinear.iter_mut() {
            out.push(lq_norm(&w, &f.values[kk], *q));
        }
        let interior = kk > 0 && kk + 1 < v.grid.slices;
        boundary_slopes.push(if interior && window.1 > window.0 {
            boundary_exponent_fit(&ScalarField::dirichlet_zero(row.clone()), rho, window).ok().map(|f| f.slope)
        } else {
            None
        });
    }
    let g = &v.grid;
    let nonlinear_fits = nonlinear.iter().map(|(q, vals)| (*q, report_fit(&times, vals, g))).collect();
    let gamma1 = spectrum.sector(0).first().map_or(f64::NAN, |p| p.gamma);
    Ok(DecayReport {
        l2_fit: report_fit(&times, &l2, g),
        gradient_fit: report_fit(&times, &gradient, g),
        over_rho_fit: report_fit(&times, &over_rho, g),
        nonlinear_fits,
        times,
        l2,
        gradient,
        over_rho,
        nonlinear,
        boundary_slopes,
        gamma1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{constants, make_cap};
    use std::f64::consts::PI;

    #[test]
    fn h_examples() {
        assert!((eval_h(0.0, 3).unwrap() - 7.5).abs() < 1e-15);
        for n in 3..9 {
            let nf = n as f64;
            assert!((eval_h(0.0, n).unwrap() - nf * (nf + 2.0) / (2.0 * (nf - 2.0))).abs() < 1e-13);
        }
        assert!((eval_h(1.0, 4).unwrap() - 8.0).abs() < 1e-13);
        assert!(eval_h(-1.0, 3).is_err());
        for n in [3usize, 4, 5, 6, 7] {
            let nl = Nonlinearity::new(n).unwrap();
            for s in [1e-4, -1e-4] {
                assert!((nl.h_direct(s) - nl.h_series(s)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn h_against_closed_form() {
        // n = 3: (1+s)^5 expanded by hand gives h = (3/4)(10 + 10 s + 5 s^2 + s^3)
        let nl = Nonlinearity::new(3).unwrap();
        for s in [-0.9, -0.3, -0.05, 0.02, 0.5, 3.0] {
            let exact = 0.75 * (10.0 + 10.0 * s + 5.0 * s * s + s * s * s);
            assert!((nl.h(s) - exact).abs() < 1e-12 * exact.abs().max(1.0), "{s}");
        }
        assert_eq!(&nl.coefficients()[..5], &[7.5, 7.5, 3.75, 0.75, 0.0]);
    }

    #[test]
    fn closed_form_examples() {
        let x0 = [0.0, 0.0, 0.0];
        let at = closed_form(ComparisonKind::InteriorBall, 2.0, &x0, &x0).unwrap();
        assert!((at - 1.0).abs() < 1e-15);
        let far = closed_form(ComparisonKind::ExteriorBall, 0.1, &x0, &[1e6, 0.0, 0.0]).unwrap();
        assert!(far < 1e-6);
        assert!(closed_form(ComparisonKind::InteriorBall, 1.0, &x0, &[1.0, 0.0, 0.0]).is_err());
        assert!(closed_form(ComparisonKind::ExteriorBall, 1.0, &x0, &[0.5, 0.0, 0.0]).is_err());
    }

    fn fd_residual(kind: ComparisonKind, radius: f64, x: [f64; 3], h: f64) -> f64 {
        let u = |y: [f64; 3]| closed_form(kind, radius, &[0.1, -0.2, 0.0], &y).unwrap();
        let mut lap = -6.0 * u(x);
        for i in 0..3 {
            for sgn in [-1.0, 1.0] {
                let mut y = x;
                y[i] += sgn * h;
                lap += u(y);
            }
        }
        lap / (h * h) - 0.75 * u(x).powi(5)
    }

    #[test]
    fn closed_forms_solve_the_equation() {
        for (kind, r, x) in [(ComparisonKind::InteriorBall, 1.0, [0.3, 0.1, 0.2]), (ComparisonKind::ExteriorBall, 0.5, [0.9, 0.4, -0.3])] {
            let e1 = fd_residual(kind, r, x, 0.02).abs();
            let e2 = fd_residual(kind, r, x, 0.01).abs();
            assert!(e1 / e2 > 3.5 && e1 / e2 < 4.5, "{kind:?} {e1} {e2}");
        }
    }

    fn half_sphere(n_int: usize) -> ConeProblem {
        let d = make_cap(3, PI / 2.0, n_int).unwrap();
        let rho = ScalarField::sample(&d, f64::cos);
        ConeProblem::new(d, rho, constants(3).unwrap()).unwrap()
    }

    #[test]
    fn zero_inflow_gives_zero() {
        let pb = half_sphere(40);
        let grid = TimeGrid::new(0.0, 6.0, 0.1).unwrap();
        let v = solve_v(&pb, &ScalarField::dirichlet_zero(vec![0.0; pb.domain.len()]), grid).unwrap();
        assert_eq!(v.max_abs(), 0.0);
        let f = eval_f(&v, &pb.rho, &pb.constants).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn separable_data_reproduce_slice_profile() {
        let d = make_cap(3, PI / 3.0, 40).unwrap();
        let k = constants(3).unwrap();
        let grid = TimeGrid::new(0.0, 5.0, 0.1).unwrap();
        let u = solve_uhat(&d, grid, 64.0, &k).unwrap();
        let xi = solve_xi_level(&d, 64.0, &XiOptions::default()).unwrap().xi;
        for row in &u.values {
            for (a, b) in row.iter().zip(&xi) {
                assert!((a - b).abs() <= 1e-10 * b, "{a} {b}");
            }
        }
    }

    #[test]
    fn regime_violation_is_reported() {
        let pb = half_sphere(20);
        let mut v = CylinderField::zeros(TimeGrid::new(0.0, 1.0, 0.5).unwrap(), pb.domain.len());
        v.values[1][3] = -1e3;
        assert!(matches!(eval_f(&v, &pb.rho, &pb.constants), Err(Error::Regime { node: 3, .. })));
    }
}
