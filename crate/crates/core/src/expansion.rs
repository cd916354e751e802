//! Asymptotic expansion of the difference field as t -> infinity: ODE
//! particular solutions, the particular-solution hierarchy at a rate, mode
//! projection, decay fits and the extraction ladder over the rate set.

use crate::cone::{ConeProblem, CylinderField, Nonlinearity};
use crate::domain::{CapDomain, ModelConstants, ScalarField};
use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::spectral::{IndexSet, SingularOperator, Spectrum};

/// Fitted model |y| ~ A t^m e^{-gamma t}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub gamma: f64,
    pub m: usize,
    /// Signed amplitude A.
    pub amplitude: f64,
    pub window: (f64, f64),
    /// Root-mean-square residual of the log fit.
    pub residual: f64,
}

fn masked_points(times: &[f64], values: &[f64], window: (f64, f64)) -> (Vec<f64>, Vec<f64>, f64) {
    let n = values.len();
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    let mut sign = 0.0;
    for k in 0..n {
        let (t, y) = (times[k], values[k]);
        if t < window.0 - 1e-12 || t > window.1 + 1e-12 || y == 0.0 || !y.is_finite() {
            continue;
        }
        // Drop samples next to a sign change or in a dip towards zero.
        let near = [k.checked_sub(1), (k + 1 < n).then_some(k + 1)];
        let unstable = near.iter().flatten().any(|&j| {
            let z = values[j];
            z.signum() != y.signum()
                || y.abs() <= 0.5 * z.abs() && {
                    let other = if j < k { k + 1 } else { k.wrapping_sub(1) };
                    values.get(other).is_some_and(|w| y.abs() <= 0.5 * w.abs())
                }
        });
        if unstable {
            continue;
        }
        sign += y.signum();
        ts.push(t);
        ys.push(y.abs().ln());
    }
    (ts, ys, if sign < 0.0 { -1.0 } else { 1.0 })
}

/// Least squares of log|y| against -gamma t + m log t + const for every
/// m <= allowed_m; the smallest residual wins (ties go to the lower m).
pub fn fit_decay(times: &[f64], values: &[f64], allowed_m: usize, window: Option<(f64, f64)>) -> Result<DecayFit> {
    if times.len() != values.len() || times.is_empty() {
        return Err(Error::InvalidInput("times and values must have equal nonzero length".into()));
    }
    let window = window.unwrap_or((times[0], times[times.len() - 1]));
    if allowed_m > 0 && window.0 <= 0.0 {
        return Err(Error::InvalidInput("t-power fits need a window in t > 0".into()));
    }
    let (ts, ys, sign) = masked_points(times, values, window);
    if ts.len() < 12 {
        return Err(Error::DegenerateFit(format!("{} usable samples in window {:?}", ts.len(), window)));
    }
    let mut best: Option<DecayFit> = None;
    for m in 0..=allowed_m {
        let y: Vec<f64> = ts.iter().zip(&ys).map(|(t, y)| y - m as f64 * t.ln()).collect();
        let (c, resid) = least_squares(&[vec![1.0; ts.len()], ts.clone()], &y)?;
        let rms = resid / (ts.len() as f64).sqrt();
        let fit = DecayFit { gamma: -c[1], m, amplitude: sign * c[0].exp(), window, residual: rms };
        if best.is_none_or(|b| rms < b.residual * (1.0 - 1e-9) - 1e-14) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Longest sub-window of `outer` on which the local log-slope of |y|
/// varies by less than 1%.
pub fn auto_window(times: &[f64], values: &[f64], outer: (f64, f64)) -> Option<(f64, f64)> {
    if times.len() < 3 {
        return None;
    }
    let h = times[1] - times[0];
    let w = ((0.5 / h).round() as usize).max(1);
    let idx: Vec<usize> =
        (0..times.len()).filter(|&k| times[k] >= outer.0 - 1e-12 && k + w < times.len() && times[k + w] <= outer.1 + 1e-12).collect();
    let slope: Vec<Option<f64>> = idx
        .iter()
        .map(|&k| {
            let (a, b) = (values[k].abs(), values[k + w].abs());
            (a > 0.0 && b > 0.0).then(|| -(b.ln() - a.ln()) / (times[k + w] - times[k]))
        })
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for i in 0..slope.len() {
        let Some(s0) = slope[i] else { continue };
        let (mut lo, mut hi) = (s0, s0);
        let mut j = i;
        while j + 1 < slope.len() {
            let Some(s) = slope[j + 1] else { break };
            let (l2, h2) = (lo.min(s), hi.max(s));
            if h2 - l2 > 0.01 * (0.5 * (l2 + h2)).abs() {
                break;
            }
            lo = l2;
            hi = h2;
            j += 1;
        }
        if best.is_none_or(|(a, b)| j - i > b - a) {
            best = Some((i, j));
        }
    }
    let (a, b) = best?;
    // need enough samples for a fit
    (idx[b] + w - idx[a] >= 12).then(|| (times[idx[a]], times[idx[b] + w]))
}

/// Second-difference coefficients in t acting on t^j e^{-gamma t}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStencil {
    Continuous,
    Uniform { h: f64 },
}

impl TimeStencil {
    /// `a_k` with `D_tt (t^j e^{-g t}) = e^{-g t} sum_k C(j,k) a_k t^{j-k}`.
    pub fn coefficient(&self, k: usize, gamma: f64) -> f64 {
        match *self {
            TimeStencil::Continuous => match k {
                0 => gamma * gamma,
                1 => -2.0 * gamma,
                2 => 2.0,
                _ => 0.0,
            },
            TimeStencil::Uniform { h } => {
                let x = gamma * h;
                if k == 0 {
                    2.0 * (x.cosh() - 1.0) / (h * h)
                } else {
                    let f = if k % 2 == 1 { -2.0 * x.sinh() } else { 2.0 * x.cosh() };
                    f * h.powi(k as i32 - 2)
                }
            }
        }
    }

    /// Rate whose exponential solves the constant-coefficient equation with
    /// continuous rate `gamma`.
    pub fn kernel_rate(&self, gamma: f64) -> f64 {
        match *self {
            TimeStencil::Continuous => gamma,
            TimeStencil::Uniform { h } => 2.0 / h * (gamma * h / 2.0).asinh(),
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Below,
    Equal,
    Above,
}

/// Integral of e^{-alpha u} (t + u)^m over u > 0.
fn tail_integral(alpha: f64, t: f64, m: usize) -> f64 {
    let mut fact = 1.0;
    let mut sum = 0.0;
    for k in 0..=m {
        if k > 0 {
            fact *= k as f64;
        }
        sum += binomial(m, k) * t.powi((m - k) as i32) * fact / alpha.powi(k as i32 + 1);
    }
    sum
}

/// Panel integrals of `g` over [t_k, t_{k+1}] by four-point Lagrange rules.
fn panel(g: &dyn Fn(usize) -> f64, k: usize, last: usize, h: f64) -> f64 {
    if k == 0 {
        h / 24.0 * (9.0 * g(0) + 19.0 * g(1) - 5.0 * g(2) + g(3))
    } else if k + 1 == last {
        h / 24.0 * (g(last - 3) - 5.0 * g(last - 2) + 19.0 * g(last - 1) + 9.0 * g(last))
    } else {
        h / 24.0 * (-g(k - 1) + 13.0 * g(k) + 13.0 * g(k + 1) - g(k + 2))
    }
}

/// Particular solution of psi'' - gamma_i^2 psi = f on a uniform grid,
/// continued past the last sample by a fitted A t^m e^{-mu t} model.
pub fn ode_particular(gamma_i: f64, times: &[f64], f: &[f64], regime: Regime) -> Result<Vec<f64>> {
    let n = times.len();
    if n != f.len() || n < 16 {
        return Err(Error::InvalidInput("need at least 16 matching samples".into()));
    }
    if !(gamma_i > 0.0) {
        return Err(Error::InvalidInput(format!("gamma_i must be positive, got {gamma_i}")));
    }
    if f.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let h = times[1] - times[0];
    let last = n - 1;
    let t_end = times[last];
    let tail_start = times[last.saturating_sub(((2.0 / h).round() as usize).max(15))];
    let model = fit_decay(times, f, 3, Some((tail_start.max(h), t_end)))?;
    if !(model.gamma > 0.0) {
        return Err(Error::InvalidInput(format!("source does not decay (fitted rate {})", model.gamma)));
    }
    if regime == Regime::Above && !(model.gamma > gamma_i) {
        return Err(Error::InvalidInput(format!("source rate {} is not above {gamma_i}", model.gamma)));
    }
    let tail = |alpha: f64| model.amplitude * (-model.gamma * t_end).exp() * tail_integral(alpha, t_end, model.m);
    let (eg, g2) = ((-gamma_i * h).exp(), 2.0 * gamma_i);

    // J_k = int_{t_k}^inf e^{-gamma_i (s - t_k)} f
    let mut jm = vec![0.0; n];
    jm[last] = tail(model.gamma + gamma_i);
    for k in (0..last).rev() {
        let g = |j: usize| (-gamma_i * (times[j] - times[k])).exp() * f[j];
        jm[k] = eg * jm[k + 1] + panel(&g, k, last, h);
    }
    let mut out = vec![0.0; n];
    match regime {
        Regime::Below | Regime::Equal => {
            // I_k = int_T^{t_k} e^{-gamma_i (t_k - s)} f
            let mut acc = 0.0;
            for k in 0..n {
                if k > 0 {
                    let g = |j: usize| (-gamma_i * (times[k] - times[j])).exp() * f[j];
                    acc = eg * acc + panel(&g, k - 1, last, h);
                }
                out[k] = -(acc + jm[k]) / g2;
            }
        }
        Regime::Above => {
            // K_k = int_{t_k}^inf e^{gamma_i (s - t_k)} f
            let mut kp = tail(model.gamma - gamma_i);
            out[last] = (kp - jm[last]) / g2;
            for k in (0..last).rev() {
                let g = |j: usize| (gamma_i * (times[j] - times[k])).exp() * f[j];
                kp = kp / eg + panel(&g, k, last, h);
                out[k] = (kp - jm[k]) / g2;
            }
        }
    }
    Ok(out)
}

/// Weighted projection of every slice onto one eigenfunction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSeries {
    /// Position in the axisymmetric sector (0-based).
    pub index: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ModeSeries {
    pub fn fit(&self, allowed_m: usize, window: Option<(f64, f64)>) -> Result<DecayFit> {
        fit_decay(&self.times, &self.values, allowed_m, window)
    }
}

fn project(domain: &CapDomain, row: &[f64], phi: &[f64]) -> f64 {
    domain.inner(row, phi)
}

/// Mode series for the axisymmetric eigenfunctions and the residual field
/// with those components removed.
pub fn project_modes(v: &CylinderField, domain: &CapDomain, spectrum: &Spectrum) -> (Vec<ModeSeries>, CylinderField) {
    let times = v.grid.times();
    let pairs = spectrum.sector(0);
    let mut residual = v.clone();
    let mut series = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let values: Vec<f64> = v.values.iter().map(|row| project(domain, row, &p.phi.values)).collect();
        for (row, c) in residual.values.iter_mut().zip(&values) {
            row.iter_mut().zip(&p.phi.values).for_each(|(a, b)| *a -= c * b);
        }
        series.push(ModeSeries { index: p.index, times: times.clone(), values });
    }
    (series, residual)
}

/// Coefficients w_0..w_{m+1} of sum_j t^j e^{-gamma t} w_j solving the
/// linear cylinder equation with source sum_j t^j e^{-gamma t} h_j.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub w: Vec<Vec<f64>>,
    /// Eigenvalue met by gamma^2 - beta^2 (or its discrete analogue).
    pub resonant_with: Option<f64>,
    /// Relative distance to the nearest eigenvalue when it is close (within
    /// 1e-3) but not flagged resonant; such solves are poorly conditioned.
    pub near_resonance: Option<f64>,
}

pub fn particular_hierarchy(
    gamma: f64,
    h_list: &[Vec<f64>],
    op: &SingularOperator,
    k: &ModelConstants,
    stencil: TimeStencil,
    res_tol: f64,
) -> Result<Hierarchy> {
    if !(gamma > 0.0) || h_list.is_empty() {
        return Err(Error::InvalidInput("need gamma > 0 and at least one source term".into()));
    }
    let m = h_list.len() - 1;
    let nodes = h_list[0].len();
    let a: Vec<f64> = (0..=m + 2).map(|j| stencil.coefficient(j, gamma)).collect();
    let lambda = a[0] - k.beta * k.beta;
    let sym = op.symmetric();
    let below = sym.sturm_count(lambda);
    let mut near = Vec::new();
    for i in [below.checked_sub(1), Some(below)].into_iter().flatten() {
        if i < sym.len() {
            near.push(sym.eigenvalue(i));
        }
    }
    let mu = near.iter().copied().min_by(|x, y| (x - lambda).abs().total_cmp(&(y - lambda).abs())).expect("non-empty operator");
    let rel = (lambda - mu).abs() / (1.0 + mu.abs());
    let coupling = |i: usize, w: &[Vec<f64>], from: usize| -> Vec<f64> {
        let mut s = vec![0.0; nodes];
        for kk in from..=(m + 1 - i) {
            if i + kk < w.len() {
                let c = binomial(i + kk, kk) * a[kk];
                s.iter_mut().zip(&w[i + kk]).for_each(|(x, y)| *x += c * y);
            }
        }
        s
    };
    let mut w = vec![vec![0.0; nodes]; m + 2];
    if rel > res_tol {
        for i in (0..=m).rev() {
            let s = coupling(i, &w, 1);
            let rhs: Vec<f64> = h_list[i].iter().zip(&s).map(|(h, c)| -(h - c)).collect();
            w[i] = op.solve_shifted(lambda, &rhs);
        }
        return Ok(Hierarchy { w, resonant_with: None, near_resonance: (rel < 1e-3).then_some(rel) });
    }
    // Resonance: split along the eigenfunction.
    let idx = sym.sturm_count(mu + 1e-9 * (1.0 + mu.abs())) - 1;
    let mut gap = f64::INFINITY;
    if idx > 0 {
        gap = gap.min(mu - sym.eigenvalue(idx - 1));
    }
    if idx + 1 < sym.len() {
        gap = gap.min(sym.eigenvalue(idx + 1) - mu);
    }
    let y = sym.eigenvector(mu);
    let mut phi = vec![0.0; op.first];
    phi.extend(y.iter().zip(&op.weights).map(|(v, wt)| v / wt.sqrt()));
    let hat_h: Vec<f64> = h_list.iter().map(|h| op.inner(h, &phi)).collect();
    let mut hat = vec![0.0; m + 2];
    for i in (0..=m).rev() {
        let mut s = hat_h[i];
        for kk in 2..=(m + 1 - i) {
            s -= binomial(i + kk, kk) * a[kk] * hat[i + kk];
        }
        hat[i + 1] = s / ((i + 1) as f64 * a[1]);
    }
    let mut perp = vec![vec![0.0; nodes]; m + 2];
    for i in (0..=m).rev() {
        let s = coupling(i, &perp, 1);
        let mut f: Vec<f64> = h_list[i].iter().zip(&phi).zip(&s).map(|((h, p), c)| h - hat_h[i] * p - c).collect();
        let c = op.inner(&f, &phi);
        f.iter_mut().zip(&phi).for_each(|(x, p)| *x -= c * p);
        let rhs: Vec<f64> = f.iter().map(|x| -x).collect();
        perp[i] = op.solve_deflated(mu, &phi, &rhs, gap);
    }
    for i in 0..m + 2 {
        w[i] = perp[i].iter().zip(&phi).map(|(p, f)| p + hat[i] * f).collect();
    }
    Ok(Hierarchy { w, resonant_with: Some(mu), near_resonance: None })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// Kernel mode of the axisymmetric sector (0-based position).
    Kernel { index: usize },
    /// Nonlinear interaction of lower terms.
    Combination { multisets: Vec<Vec<(usize, u32)>> },
    /// Reflection e^{-rate (t_max - t)} from the truncation at t_max.
    FarBoundary { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTerm {
    pub rate: f64,
    pub power: usize,
    pub coefficient: ScalarField,
    pub provenance: Provenance,
    /// Residual of the fit or solve producing the term.
    pub residual: f64,
}

impl ExpansionTerm {
    pub fn factor(&self, t: f64, t_max: f64) -> f64 {
        match self.provenance {
            Provenance::FarBoundary { .. } => (-self.rate * (t_max - t)).exp(),
            _ => t.powi(self.power as i32) * (-self.rate * t).exp(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub terms: Vec<ExpansionTerm>,
    pub remainder: CylinderField,
    /// (mu, fitted remainder rate after the step at mu).
    pub ladder: Vec<(f64, Option<f64>)>,
    /// Rate of the input field before any subtraction.
    pub initial_rate: Option<f64>,
}

impl Expansion {
    /// Sum of all terms plus the remainder.
    pub fn reconstruct(&self) -> CylinderField {
        let mut out = self.remainder.clone();
        let g = out.grid;
        for (kk, row) in out.values.iter_mut().enumerate() {
            let t = g.time(kk);
            for term in &self.terms {
                let f = term.factor(t, g.t_max);
                row.iter_mut().zip(&term.coefficient.values).for_each(|(a, c)| *a += f * c);
            }
        }
        out
    }
}

/// Rate set over the kernel rates of `stencil`, so combination rates are
/// sums of exactly the exponentials present in discrete data.
pub fn stencil_index_set(spectrum: &Spectrum, stencil: TimeStencil, gamma_max: f64, res_tol: f64) -> Result<IndexSet> {
    let rates: Vec<f64> = spectrum.axisymmetric_gammas().iter().map(|g| stencil.kernel_rate(*g)).collect();
    crate::spectral::index_set(&rates, gamma_max, res_tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub stencil: TimeStencil,
    pub res_tol: f64,
    /// Window start offset from t0 for coefficient fits.
    pub fit_start: f64,
    /// Relative noise level of the data, which bounds usable fit windows.
    pub noise: f64,
    /// Window of the remainder-rate fits; default [t0 + 2, auto end].
    pub rate_window: Option<(f64, f64)>,
    /// Fail when a step does not improve the remainder rate.
    pub check_stagnation: bool,
}

impl ExtractOptions {
    pub fn for_grid(ht: f64) -> Self {
        Self {
            stencil: TimeStencil::Uniform { h: ht },
            res_tol: 1e-6,
            fit_start: 1.0,
            noise: 1e-20,
            rate_window: None,
            check_stagnation: true,
        }
    }
}

fn slice_norms(domain: &CapDomain, v: &CylinderField) -> Vec<f64> {
    v.values.iter().map(|r| domain.norm(r)).collect()
}

/// Rate of the slice norms over the window where they stay above the noise.
fn remainder_rate(domain: &CapDomain, v: &CylinderField, scale: f64, opts: &ExtractOptions) -> Option<f64> {
    let norms = slice_norms(domain, v);
    let times = v.grid.times();
    let window = opts.rate_window.unwrap_or_else(|| {
        let floor = 1e6 * opts.noise * scale;
        let end = times.iter().zip(&norms).filter(|(_, n)| **n > floor).map(|(t, _)| *t).fold(v.grid.t0, f64::max);
        (v.grid.t0 + 2.0, end.min(v.grid.t_max - 3.0))
    });
    fit_decay(&times, &norms, 0, Some(window)).ok().map(|f| f.gamma)
}

/// Exponential sums with polynomial-in-t coefficient fields, used to expand F.
#[derive(Debug, Clone)]
struct ExpPoly {
    /// (rate, coefficient of t^j for each j)
    parts: Vec<(f64, Vec<Vec<f64>>)>,
}

impl ExpPoly {
    fn add(&mut self, rate: f64, power: usize, field: &[f64], tol: f64) {
        let pos = self.parts.iter().position(|(r, _)| (r - rate).abs() <= tol * rate.max(1.0));
        let idx = pos.unwrap_or_else(|| {
            self.parts.push((rate, Vec::new()));
            self.parts.len() - 1
        });
        let poly = &mut self.parts[idx].1;
        while poly.len() <= power {
            poly.push(vec![0.0; field.len()]);
        }
        poly[power].iter_mut().zip(field).for_each(|(a, b)| *a += b);
    }

    fn mul(&self, other: &ExpPoly, cutoff: f64, tol: f64) -> ExpPoly {
        let mut out = ExpPoly { parts: Vec::new() };
        for (ra, pa) in &self.parts {
            for (rb, pb) in &other.parts {
                if ra + rb > cutoff * (1.0 + tol) {
                    continue;
                }
                for (i, fa) in pa.iter().enumerate() {
                    for (j, fb) in pb.iter().enumerate() {
                        let prod: Vec<f64> = fa.iter().zip(fb).map(|(x, y)| x * y).collect();
                        out.add(ra + rb, i + j, &prod, tol);
                    }
                }
            }
        }
        out
    }

    fn at(&self, rate: f64, tol: f64) -> Option<&Vec<Vec<f64>>> {
        self.parts.iter().find(|(r, _)| (r - rate).abs() <= tol * rate.max(1.0)).map(|(_, p)| p)
    }
}

/// Source terms h_j of F at `rate` generated by the extracted terms.
fn nonlinear_source(problem: &ConeProblem, terms: &[ExpansionTerm], rate: f64, tol: f64) -> Result<Vec<Vec<f64>>> {
    let mut base = ExpPoly { parts: Vec::new() };
    for t in terms {
        if !matches!(t.provenance, Provenance::FarBoundary { .. }) && t.rate < rate * (1.0 - tol) {
            base.add(t.rate, t.power, &t.coefficient.values, tol);
        }
    }
    let rmin = base.parts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let nodes = problem.domain.len();
    if !rmin.is_finite() {
        return Ok(vec![vec![0.0; nodes]]);
    }
    let nl = Nonlinearity::new(problem.constants.n)?;
    let beta = problem.constants.beta;
    let rho = &problem.rho.values;
    let mut power = base.mul(&base, rate, tol);
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut order = 2;
    while rmin * order as f64 <= rate * (1.0 + tol) {
        let b = nl.coefficients().get(order - 2).copied().unwrap_or(0.0);
        if let Some(poly) = power.at(rate, tol) {
            for (j, field) in poly.iter().enumerate() {
                while out.len() <= j {
                    out.push(vec![0.0; nodes]);
                }
                for (i, x) in field.iter().enumerate() {
                    out[j][i] += b * rho[i].powf(beta - 2.0 + (order - 2) as f64 * beta) * x;
                }
            }
        }
        power = power.mul(&base, rate, tol);
        order += 1;
    }
    if out.is_empty() {
        out.push(vec![0.0; nodes]);
    }
    Ok(out)
}

fn subtract(rem: &mut CylinderField, term: &ExpansionTerm) {
    let g = rem.grid;
    for (kk, row) in rem.values.iter_mut().enumerate() {
        let f = term.factor(g.time(kk), g.t_max);
        row.iter_mut().zip(&term.coefficient.values).for_each(|(a, c)| *a -= f * c);
    }
}

/// Walks the first `m_max` rates of `index_set`, subtracting fitted kernel
/// terms at pure rates and hierarchy solutions at combination rates.
pub fn extract_expansion(
    v: &CylinderField,
    problem: &ConeProblem,
    spectrum: &Spectrum,
    index_set: &IndexSet,
    m_max: usize,
    opts: &ExtractOptions,
) -> Result<Expansion> {
    if m_max > index_set.entries.len() {
        return Err(Error::InvalidInput(format!("rate set has only {} entries", index_set.entries.len())));
    }
    let d = &problem.domain;
    let op = SingularOperator::new(d, &problem.rho, &problem.constants, 0)?;
    let pairs = spectrum.sector(0);
    let times = v.grid.times();
    let g = v.grid;
    let scale = slice_norms(d, v).iter().fold(0.0f64, |m, x| m.max(*x));
    let mut rem = v.clone();
    let mut terms: Vec<ExpansionTerm> = Vec::new();
    let mut ladder = Vec::new();
    let initial_rate = remainder_rate(d, &rem, scale, opts);
    let mut before = initial_rate;
    if let Some(r) = before {
        if r < problem.constants.beta - 0.05 {
            return Err(Error::InvalidInput(format!("field decays at rate {r}, below beta")));
        }
    }
    for (idx, entry) in index_set.entries.iter().take(m_max).enumerate() {
        let rate = entry.rate;
        if entry.is_combination() {
            let h_list = nonlinear_source(problem, &terms, rate, index_set.res_tol)?;
            let hier = particular_hierarchy(rate, &h_list, &op, &problem.constants, opts.stencil, opts.res_tol)?;
            for (j, w) in hier.w.into_iter().enumerate() {
                if w.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let term = ExpansionTerm {
                    rate,
                    power: j,
                    coefficient: ScalarField::dirichlet_zero(w),
                    provenance: Provenance::Combination { multisets: entry.combinations.clone() },
                    residual: 0.0,
                };
                subtract(&mut rem, &term);
                terms.push(term);
            }
        }
        for &j in &entry.pure {
            let Some(pair) = pairs.get(j) else {
                return Err(Error::InvalidInput(format!("spectrum lacks axisymmetric mode {j}")));
            };
            let phi = &pair.phi.values;
            let series: Vec<f64> = rem.values.iter().map(|row| project(d, row, phi)).collect();
            // Other pure rates are orthogonal to phi_j; combinations are not.
            let mut rates = vec![rate];
            rates.extend(index_set.entries.iter().skip(idx + 1).filter(|e| e.is_combination()).take(3).map(|e| e.rate));
            let end = (g.t_max - 3.0).min(g.t0 + (-opts.noise.ln()) / rate * 0.8);
            let with_image = rate * (g.t_max - end) < 30.0;
            let window = (g.t0 + opts.fit_start, end);
            let sel: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= window.0 && times[k] <= window.1).collect();
            if sel.len() < rates.len() + 8 {
                return Err(Error::DegenerateFit(format!("fit window {window:?} too short for rate {rate}")));
            }
            let colscale: Vec<f64> = sel.iter().map(|&k| (-rate * times[k]).exp()).collect();
            let mut cols: Vec<Vec<f64>> =
                rates.iter().map(|r| sel.iter().zip(&colscale).map(|(&k, s)| (-r * times[k]).exp() / s).collect()).collect();
            if with_image {
                cols.push(sel.iter().zip(&colscale).map(|(&k, s)| (-rate * (g.t_max - times[k])).exp() / s).collect());
            }
            let y: Vec<f64> = sel.iter().zip(&colscale).map(|(&k, s)| series[k] / s).collect();
            let (coef, resid) = least_squares(&cols, &y)?;
            let mut found = vec![(coef[0], Provenance::Kernel { index: j })];
            if with_image {
                found.push((coef[rates.len()], Provenance::FarBoundary { index: j }));
            }
            for (c, prov) in found {
                let term = ExpansionTerm {
                    rate,
                    power: 0,
                    coefficient: ScalarField::dirichlet_zero(phi.iter().map(|p| c * p).collect()),
                    provenance: prov,
                    residual: resid,
                };
                subtract(&mut rem, &term);
                terms.push(term);
            }
        }
        let after = remainder_rate(d, &rem, scale, opts);
        if let (Some(b), Some(a), true) = (before, after, opts.check_stagnation) {
            if a <= b * (1.0 + 1e-3) {
                return Err(Error::Stagnation { rate, before: b, after: a });
            }
        }
        ladder.push((rate, after));
        before = after;
    }
    Ok(Expansion { terms, remainder: rem, ladder, initial_rate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemainderVerdict {
    pub fit: Option<DecayFit>,
    /// mu_{level+1}.
    pub target: f64,
    pub pass: bool,
}

/// Checks that the slice norms of the remainder decay at least like
/// mu_{level+1} (2% slack) with t-power at most `level`.
pub fn verify_remainder(
    remainder: &CylinderField,
    domain: &CapDomain,
    index_set: &IndexSet,
    level: usize,
    window: (f64, f64),
) -> Result<RemainderVerdict> {
    let target = index_set.mu(level + 1).ok_or_else(|| Error::InvalidInput(format!("rate set has no entry {}", level + 1)))?;
    let norms = slice_norms(domain, remainder);
    if norms.iter().all(|n| *n == 0.0) {
        return Ok(RemainderVerdict { fit: None, target, pass: true });
    }
    let fit = fit_decay(&remainder.grid.times(), &norms, level, Some(window))?;
    let pass = fit.gamma >= target * 0.98 && fit.m <= level;
    Ok(RemainderVerdict { fit: Some(fit), target, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::TimeGrid;
    use crate::domain::{constants, make_cap};
    use crate::spectral::eigen_spectrum;
    use std::f64::consts::PI;

    fn grid(a: f64, b: f64, h: f64) -> Vec<f64> {
        let n = ((b - a) / h).round() as usize;
        (0..=n).map(|k| a + k as f64 * h).collect()
    }

    #[test]
    fn fit_exact_exponentials() {
        let t = grid(0.5, 6.0, 0.05);
        let y: Vec<f64> = t.iter().map(|t| 2.0 * (-3.0 * t).exp()).collect();
        let f = fit_decay(&t, &y, 2, None).unwrap();
        assert_eq!(f.m, 0);
        assert!((f.gamma - 3.0).abs() < 1e-6 && (f.amplitude - 2.0).abs() < 1e-6);
        let y: Vec<f64> = t.iter().map(|t| -0.5 * t * (-3.0 * t).exp()).collect();
        let f = fit_decay(&t, &y, 2, None).unwrap();
        assert_eq!(f.m, 1);
        assert!((f.gamma - 3.0).abs() < 1e-4 && f.amplitude < 0.0);
        assert!(fit_decay(&t[..10], &y[..10], 0, None).is_err());
    }

    #[test]
    fn fit_masks_a_zero_crossing() {
        let t = grid(0.0, 8.0, 0.05);
        let y: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp() - 50.0 * (-4.0 * t).exp()).collect();
        let f = fit_decay(&t, &y, 0, Some((3.0, 8.0))).unwrap();
        assert!((f.gamma - 2.0).abs() < 0.02, "{f:?}");
    }

    #[test]
    fn auto_window_finds_clean_region() {
        let t = grid(0.0, 12.0, 0.05);
        let y: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp() + (-5.0 * (12.0 - t)).exp() * 1e-8).collect();
        let (a, b) = auto_window(&t, &y, (0.5, 11.5)).unwrap();
        assert!(a < 1.0 && b > 6.0 && b < 10.0, "{a} {b}");
    }

    #[test]
    fn stencil_coefficients() {
        let h = 0.01;
        let s = TimeStencil::Uniform { h };
        let c = TimeStencil::Continuous;
        for k in 0..3 {
            assert!((s.coefficient(k, 3.0) - c.coefficient(k, 3.0)).abs() < 1e-3 * (1.0 + c.coefficient(k, 3.0).abs()));
        }
        let g = s.kernel_rate(3.0);
        assert!((s.coefficient(0, g) - 9.0).abs() < 1e-10);
        // direct second difference of t^2 e^{-g t}
        let f = |t: f64| t * t * (-2.0 * t).exp();
        let t = 1.3;
        let dd = (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h);
        let e = (-2.0 * t).exp();
        let via = e * (s.coefficient(0, 2.0) * t * t + 2.0 * s.coefficient(1, 2.0) * t + s.coefficient(2, 2.0));
        assert!((dd - via).abs() < 1e-9);
    }

    fn residual(gi: f64, t: &[f64], psi: &[f64], f: &[f64]) -> f64 {
        let h = t[1] - t[0];
        (2..t.len() - 2)
            .map(|k| {
                let d2 = (-psi[k - 2] + 16.0 * psi[k - 1] - 30.0 * psi[k] + 16.0 * psi[k + 1] - psi[k + 2]) / (12.0 * h * h);
                (d2 - gi * gi * psi[k] - f[k]).abs()
            })
            .fold(0.0, f64::max)
            / f.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn ode_particular_examples() {
        let t = grid(0.0, 10.0, 0.005);
        assert!(ode_particular(3.0, &t, &vec![0.0; t.len()], Regime::Below).unwrap().iter().all(|x| *x == 0.0));
        // above: closed form e^{-g t}/(g^2 - gi^2)
        let f: Vec<f64> = t.iter().map(|t| (-5.0 * t).exp()).collect();
        let psi = ode_particular(3.0, &t, &f, Regime::Above).unwrap();
        for (p, t) in psi.iter().zip(&t) {
            assert!((p - (-5.0 * t).exp() / 16.0).abs() < 1e-9 * (-5.0 * t).exp(), "{t}");
        }
        assert!(residual(3.0, &t, &psi, &f) < 1e-6);
        // resonant source grows a t-power
        let f: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp()).collect();
        let psi = ode_particular(3.0, &t, &f, Regime::Equal).unwrap();
        let fit = fit_decay(&t, &psi, 2, Some((3.0, 9.0))).unwrap();
        assert_eq!(fit.m, 1);
        // the constant part of -(t/6 + 1/36) e^{-3t} biases the slope slightly
        assert!((fit.gamma - 3.0).abs() < 1e-2);
        assert!(ode_particular(3.0, &t, &t.iter().map(|t| (0.1 * t).exp()).collect::<Vec<_>>(), Regime::Below).is_err());
    }

    fn setup() -> (ConeProblem, Spectrum, SingularOperator) {
        let d = make_cap(3, PI / 2.0, 120).unwrap();
        let rho = ScalarField::sample(&d, f64::cos);
        let k = constants(3).unwrap();
        let sp = eigen_spectrum(&d, &rho, &k, 0, 4).unwrap();
        let op = SingularOperator::new(&d, &rho, &k, 0).unwrap();
        (ConeProblem::new(d, rho, k).unwrap(), sp, op)
    }

    fn hierarchy_residual(pb: &ConeProblem, gamma: f64, h_list: &[Vec<f64>], w: &[Vec<f64>], ht: f64) -> f64 {
        let g = TimeGrid::new(1.0, 3.0, ht).unwrap();
        let lift = |fields: &[Vec<f64>]| {
            let mut f = CylinderField::zeros(g, pb.domain.len());
            for (kk, row) in f.values.iter_mut().enumerate() {
                let t = g.time(kk);
                for (j, w) in fields.iter().enumerate() {
                    let c = t.powi(j as i32) * (-gamma * t).exp();
                    row.iter_mut().zip(w).for_each(|(a, b)| *a += c * b);
                }
            }
            f
        };
        let lw = crate::cone::apply_linear(pb, &lift(w));
        let hh = lift(h_list);
        let mut err: f64 = 0.0;
        let mut size: f64 = 0.0;
        for (kk, row) in lw.iter().enumerate() {
            for (a, b) in row.iter().zip(&hh.values[kk + 1]) {
                err = err.max((a - b).abs());
                size = size.max(b.abs());
            }
        }
        err / size
    }

    #[test]
    fn hierarchy_non_resonant() {
        let (pb, sp, op) = setup();
        let k = &pb.constants;
        let p = sp.sector(0);
        let stencil = TimeStencil::Uniform { h: 0.05 };
        let gamma = stencil.kernel_rate(p[0].gamma);
        let zero = vec![vec![0.0; pb.domain.len()]; 2];
        let hz = particular_hierarchy(gamma, &zero, &op, k, stencil, 1e-6).unwrap();
        assert!(hz.w.iter().flatten().all(|x| *x == 0.0));
        // source phi_2 at the phi_1 rate, off resonance for phi_2
        let gamma = 4.0;
        let h0 = vec![p[1].phi.values.clone()];
        let hr = particular_hierarchy(gamma, &h0, &op, k, TimeStencil::Continuous, 1e-6).unwrap();
        let lam = gamma * gamma - k.beta * k.beta;
        for (a, b) in hr.w[0].iter().zip(&p[1].phi.values) {
            assert!((a - b / (lam - p[1].lambda)).abs() < 1e-8 * (1.0 + b.abs()));
        }
        let h_list = vec![p[1].phi.values.clone(), p[2].phi.values.iter().map(|x| 0.3 * x).collect()];
        let hr = particular_hierarchy(4.2, &h_list, &op, k, stencil, 1e-6).unwrap();
        assert!(hierarchy_residual(&pb, 4.2, &h_list, &hr.w, 0.05) < 1e-8);
    }

    #[test]
    fn hierarchy_resonant() {
        let (pb, sp, op) = setup();
        let k = &pb.constants;
        let p = sp.sector(0);
        let stencil = TimeStencil::Uniform { h: 0.05 };
        let gamma = stencil.kernel_rate(p[0].gamma);
        let h_list = vec![p[0].phi.values.clone()];
        let hr = particular_hierarchy(gamma, &h_list, &op, k, stencil, 1e-6).unwrap();
        assert!(hr.resonant_with.is_some());
        let a1 = stencil.coefficient(1, gamma);
        for (a, b) in hr.w[1].iter().zip(&p[0].phi.values) {
            assert!((a - b / a1).abs() < 1e-9 * (1.0 + b.abs()));
        }
        assert!(hierarchy_residual(&pb, gamma, &h_list, &hr.w, 0.05) < 1e-8);
        // mixed source with a t-power and an orthogonal part
        let h_list = vec![
            p[0].phi.values.iter().zip(&p[2].phi.values).map(|(a, b)| a + b).collect(),
            p[0].phi.values.iter().zip(&p[1].phi.values).map(|(a, b)| 0.5 * a - b).collect(),
        ];
        let hr = particular_hierarchy(gamma, &h_list, &op, k, stencil, 1e-6).unwrap();
        assert!(hierarchy_residual(&pb, gamma, &h_list, &hr.w, 0.05) < 1e-8);
        // continuous stencil: w_1 = -phi/(2 gamma)
        let hc = particular_hierarchy(p[0].gamma, &[p[0].phi.values.clone()], &op, k, TimeStencil::Continuous, 1e-6).unwrap();
        for (a, b) in hc.w[1].iter().zip(&p[0].phi.values) {
            assert!((a + b / (2.0 * p[0].gamma)).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn synthetic_extraction() {
        let (pb, sp, _) = setup();
        let p = sp.sector(0);
        let g = TimeGrid::new(0.0, 12.0, 0.05).unwrap();
        let stencil = TimeStencil::Uniform { h: g.ht };
        let r1 = stencil.kernel_rate(p[0].gamma);
        let r2 = stencil.kernel_rate(p[1].gamma);
        let mut v = CylinderField::zeros(g, pb.domain.len());
        for (kk, row) in v.values.iter_mut().enumerate() {
            let t = g.time(kk);
            for j in 0..row.len() {
                row[j] = 0.7 * (-r1 * t).exp() * p[0].phi.values[j] - 0.2 * (-r2 * t).exp() * p[1].phi.values[j];
            }
        }
        let set = crate::spectral::index_set(&[r1, r2], 2.5 * r1, 1e-6).unwrap();
        // linear synthetic data: skip the combination rate by giving only pure rates
        let pure = IndexSet { entries: set.entries.into_iter().filter(|e| e.is_pure()).collect(), ..set };
        let mut opts = ExtractOptions::for_grid(g.ht);
        opts.stencil = stencil;
        let ex = extract_expansion(&v, &pb, &sp, &pure, 2, &opts).unwrap();
        let kern: Vec<&ExpansionTerm> = ex.terms.iter().filter(|t| matches!(t.provenance, Provenance::Kernel { .. })).collect();
        let c1 = p[0].phi.values.iter().zip(&kern[0].coefficient.values).find(|(a, _)| a.abs() > 0.1).map(|(a, b)| b / a).unwrap();
        let c2 = p[1].phi.values.iter().zip(&kern[1].coefficient.values).find(|(a, _)| a.abs() > 0.1).map(|(a, b)| b / a).unwrap();
        assert!((c1 - 0.7).abs() < 7e-3 && (c2 + 0.2).abs() < 2e-3, "{c1} {c2}");
        let back = ex.reconstruct();
        for (a, b) in back.values.iter().flatten().zip(v.values.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12 * v.max_abs());
        }
    }
}
