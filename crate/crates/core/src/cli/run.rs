use super::config::{Case, ExperimentConfig, ExperimentKind};
use crate::cone::{decay_report, solve_v, ConeProblem, TimeGrid};
use crate::domain::{constants, make_cap, CapDomain, ScalarField};
use crate::error::Result;
use crate::expansion::{extract_expansion, fit_decay, stencil_index_set, ExtractOptions, Provenance, TimeStencil};
use crate::report::{Cell, Table};
use crate::rho::{doubling_schedule, gradient_diagnostics, solve_xi, BlowupSolution};
use crate::spectral::{boundary_exponent_fit, eigen_spectrum, oscillation_count, solve_fredholm};
use crate::verify::{spectrum_table, Metric};
use rayon::prelude::*;
use std::f64::consts::PI;

/// A declared check of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub case: String,
    pub metric: Metric,
}

/// Tables and checks of one case; merged in case order by the collector.
#[derive(Debug, Clone, Default)]
pub struct CaseOutput {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
}

struct Recorder<'a> {
    case: &'a Case,
    grid: String,
    out: CaseOutput,
}

impl<'a> Recorder<'a> {
    fn new(case: &'a Case, grid: String) -> Self {
        Self { case, grid, out: CaseOutput::default() }
    }

    fn check(&mut self, name: impl Into<String>, value: f64, pass: bool, tolerance: impl Into<String>) {
        let metric = Metric { name: name.into(), value, tolerance: tolerance.into(), grid: self.grid.clone(), pass };
        self.out.checks.push(Check { case: self.case.label(), metric });
    }
}

fn levels(case: &Case, cfg: &ExperimentConfig) -> Vec<usize> {
    (0..cfg.grid.refinements).map(|j| case.interior << j).collect()
}

fn weight(d: &CapDomain, cfg: &ExperimentConfig) -> Result<BlowupSolution> {
    solve_xi(d, &doubling_schedule(cfg.schedule.levels), cfg.schedule.lock_tol)
}

fn is_half_sphere(theta0: f64) -> bool {
    (theta0 - PI / 2.0).abs() < 1e-12
}

fn run_rho(case: &Case, cfg: &ExperimentConfig) -> Result<CaseOutput> {
    let mut summary = Table::new(
        "rho",
        &["case", "n", "theta0", "interior", "h", "max_rho", "max_grad", "boundary_slope", "c1", "c2", "residual", "locked", "max_err_cos"],
    );
    let mut profile = Table::new("rho_profile", &["case", "interior", "theta", "rho"]);
    let mut rec = Recorder::new(case, String::new());
    let mut errs = Vec::new();
    for nint in levels(case, cfg) {
        let d = make_cap(case.n, case.theta0, nint)?;
        let sol = weight(&d, cfg)?;
        let g = gradient_diagnostics(&d, &sol);
        let err = if is_half_sphere(case.theta0) {
            sol.rho.values.iter().zip(&d.nodes).map(|(r, t)| (r - t.cos()).abs()).fold(0.0, f64::max)
        } else {
            f64::NAN
        };
        summary.push(vec![
            case.label().into(),
            case.n.into(),
            case.theta0.into(),
            nint.into(),
            d.h.into(),
            g.max_rho.into(),
            g.max_grad.into(),
            g.boundary_slope.into(),
            sol.c1.into(),
            sol.c2.into(),
            sol.residual.into(),
            sol.locked.into(),
            err.into(),
        ]);
        for (t, r) in d.nodes.iter().zip(&sol.rho.values) {
            profile.push(vec![case.label().into(), nint.into(), (*t).into(), (*r).into()]);
        }
        profile.push(vec![case.label().into(), nint.into(), case.theta0.into(), 0.0.into()]);
        rec.grid = format!("n={} theta0={:.6} N={nint}", case.n, case.theta0);
        if case.n == 3 {
            rec.check("max rho", g.max_rho, g.max_rho <= 4.2, "<= 4.2");
            let grad = g.max_grad.max(g.boundary_slope);
            rec.check("max |rho'|", grad, grad <= 2.8, "<= 2.8");
        }
        if err.is_finite() {
            let bound = 5.0 * d.h * d.h;
            rec.check("max |rho - cos|", err, err <= bound, format!("<= 5h^2 = {bound:.3e}"));
            errs.push((nint, err));
        }
    }
    for w in errs.windows(2) {
        let ratio = w[0].1 / w[1].1;
        rec.grid = format!("n={} theta0={:.6} N={} vs {}", case.n, case.theta0, w[0].0, w[1].0);
        rec.check("convergence ratio", ratio, ratio >= 3.5, ">= 3.5");
    }
    rec.out.tables = vec![summary, profile];
    Ok(rec.out)
}

fn run_spectrum(case: &Case, cfg: &ExperimentConfig) -> Result<CaseOutput> {
    let k = constants(case.n)?;
    let mut table = spectrum_table_header();
    let mut plots = Table::new("eigenfunctions", &["case", "ell", "index", "theta", "phi"]);
    let mut rec = Recorder::new(case, String::new());
    for nint in levels(case, cfg) {
        let d = make_cap(case.n, case.theta0, nint)?;
        let sol = weight(&d, cfg)?;
        let sp = eigen_spectrum(&d, &sol.rho, &k, cfg.spectrum.ell_max, cfg.spectrum.k_max)?;
        rec.grid = format!("n={} theta0={:.6} N={nint}", case.n, case.theta0);
        for row in spectrum_table(&sp, &case.label()).rows {
            let mut row = row;
            row.insert(1, nint.into());
            table.push(row);
        }
        for p in &sp.pairs {
            let osc = oscillation_count(&p.phi);
            rec.check(format!("sign changes ell={} k={}", p.ell, p.index + 1), osc as f64, osc == p.index, format!("= {}", p.index));
            if p.index < cfg.spectrum.plot_modes {
                for (t, v) in d.nodes.iter().zip(&p.phi.values) {
                    plots.push(vec![case.label().into(), p.ell.into(), p.index.into(), (*t).into(), (*v).into()]);
                }
            }
        }
        rec.check("Sturm certificates complete", sp.is_complete() as u8 as f64, sp.is_complete(), "= 1");
        if is_half_sphere(case.theta0) {
            let nf = case.n as f64;
            let lam = (nf + 2.0) * (3.0 * nf - 2.0) / 4.0;
            let p = &sp.sector(0)[0];
            rec.check("lambda_1 rel err", (p.lambda / lam - 1.0).abs(), (p.lambda / lam - 1.0).abs() <= 5e-3, format!("<= 0.5% of {lam}"));
            rec.check("gamma_1 rel err", (p.gamma / nf - 1.0).abs(), (p.gamma / nf - 1.0).abs() <= 3e-3, format!("<= 0.3% of {nf}"));
        }
    }
    rec.out.tables = vec![table, plots];
    Ok(rec.out)
}

fn spectrum_table_header() -> Table {
    Table::new("spectrum", &["case", "interior", "ell", "index", "lambda", "gamma", "multiplicity"])
}

fn run_fredholm(case: &Case, cfg: &ExperimentConfig) -> Result<CaseOutput> {
    let k = constants(case.n)?;
    let mut table =
        Table::new("fredholm", &["case", "interior", "source", "a", "lambda", "slope", "expected", "rel_err", "fit_residual", "fit_count"]);
    let mut rec = Recorder::new(case, String::new());
    let w = (cfg.fredholm.window[0], cfg.fredholm.window[1]);
    let tol = cfg.fredholm.rel_tol;
    let exps = if cfg.fredholm.exponents.is_empty() { vec![1.0, 2.0, k.s + 1.0] } else { cfg.fredholm.exponents.clone() };
    for nint in levels(case, cfg) {
        let d = make_cap(case.n, case.theta0, nint)?;
        let sol = weight(&d, cfg)?;
        let rho = &sol.rho;
        rec.grid = format!("n={} theta0={:.6} N={nint} window={w:?}", case.n, case.theta0);
        let sp = eigen_spectrum(&d, rho, &k, 0, 1)?;
        let fit = boundary_exponent_fit(&sp.pairs[0].phi, rho, w)?;
        let rel = (fit.slope / k.s - 1.0).abs();
        table.push(vec![
            case.label().into(),
            nint.into(),
            "phi_1".into(),
            f64::INFINITY.into(),
            sp.pairs[0].lambda.into(),
            fit.slope.into(),
            k.s.into(),
            rel.into(),
            fit.residual.into(),
            fit.count.into(),
        ]);
        rec.check("phi_1 exponent rel err", rel, rel <= tol, format!("<= {tol} of s={}", k.s));
        for &a in &exps {
            let src = ScalarField::dirichlet_zero(rho.values.iter().map(|r| r.powf(a - 2.0)).collect());
            let u = solve_fredholm(&d, rho, &k, cfg.fredholm.lambda, &src)?;
            let fit = boundary_exponent_fit(&u, rho, w)?;
            let b = a.min(k.s);
            let rel = (fit.slope / b - 1.0).abs();
            table.push(vec![
                case.label().into(),
                nint.into(),
                "rho^(a-2)".into(),
                a.into(),
                cfg.fredholm.lambda.into(),
                fit.slope.into(),
                b.into(),
                rel.into(),
                fit.residual.into(),
                fit.count.into(),
            ]);
            rec.check(format!("exponent rel err a={a}"), rel, rel <= tol, format!("<= {tol} of min(a, s)={b}"));
        }
    }
    rec.out.tables = vec![table];
    Ok(rec.out)
}

struct Solved {
    problem: ConeProblem,
    spectrum: crate::spectral::Spectrum,
    v: crate::cone::CylinderField,
}

fn solve_case(case: &Case, cfg: &ExperimentConfig, nint: usize) -> Result<Solved> {
    let k = constants(case.n)?;
    let d = make_cap(case.n, case.theta0, nint)?;
    let sol = weight(&d, cfg)?;
    let spectrum = eigen_spectrum(&d, &sol.rho, &k, 0, cfg.spectrum.k_max.max(6))?;
    let problem = ConeProblem::new(d, sol.rho, k)?;
    let phi = &spectrum.sector(0)[0].phi;
    let inflow = ScalarField::dirichlet_zero(phi.values.iter().map(|x| cfg.cylinder.epsilon * x).collect());
    let grid = TimeGrid::new(0.0, cfg.cylinder.t_max, cfg.cylinder.ht)?;
    let v = solve_v(&problem, &inflow, grid)?;
    Ok(Solved { problem, spectrum, v })
}

fn run_solve(case: &Case, cfg: &ExperimentConfig) -> Result<CaseOutput> {
    let mut slices = Table::new("slices", &["case", "interior", "t", "l2", "gradient", "over_rho"]);
    let mut fits = Table::new(
        "fits",
        &["case", "interior", "quantity", "gamma", "m", "amplitude", "window_lo", "window_hi", "residual", "expected", "rel_err"],
    );
    let mut rec = Recorder::new(case, String::new());
    let tol = cfg.cylinder.rel_tol;
    for nint in levels(case, cfg) {
        let s = solve_case(case, cfg, nint)?;
        let g = s.v.grid;
        rec.grid = format!("n={} theta0={:.6} N={nint} ht={} T_max={}", case.n, case.theta0, g.ht, g.t_max);
        let r = decay_report(&s.v, &s.problem, &s.spectrum)?;
        for i in 0..r.times.len() {
            slices.push(vec![
                case.label().into(),
                nint.into(),
                r.times[i].into(),
                r.l2[i].into(),
                r.gradient[i].into(),
                r.over_rho[i].into(),
            ]);
        }
        let mut all = vec![("l2".to_string(), r.l2_fit), ("gradient".into(), r.gradient_fit), ("over_rho".into(), r.over_rho_fit)];
        all.extend(r.nonlinear_fits.iter().map(|(q, f)| (format!("F_L{q}"), *f)));
        for (name, fit) in all {
            let Some(f) = fit else { continue };
            let expected = if name.starts_with('F') { 2.0 * r.gamma1 } else { r.gamma1 };
            let rel = (f.gamma / expected - 1.0).abs();
            fits.push(vec![
                case.label().into(),
                nint.into(),
                name.clone().into(),
                f.gamma.into(),
                f.m.into(),
                f.amplitude.into(),
                f.window.0.into(),
                f.window.1.into(),
                f.residual.into(),
                expected.into(),
                rel.into(),
            ]);
        }
        let fit = r.l2_fit.map(Ok).unwrap_or_else(|| fit_decay(&r.times, &r.l2, 0, Some((g.t0 + 2.0, g.t_max - 2.0))))?;
        let rel = (fit.gamma / r.gamma1 - 1.0).abs();
        rec.check("slice-norm rate rel err", rel, rel <= tol, format!("<= {tol} of gamma_1={:.6}", r.gamma1));
    }
    rec.out.tables = vec![slices, fits];
    Ok(rec.out)
}

fn provenance_name(p: &Provenance) -> String {
    match p {
        Provenance::Kernel { index } => format!("kernel {index}"),
        Provenance::Combination { multisets } => {
            let parts: Vec<String> =
                multisets.iter().map(|m| m.iter().map(|(i, c)| format!("{c}x{i}")).collect::<Vec<_>>().join("+")).collect();
            format!("combination {}", parts.join(" | "))
        }
        Provenance::FarBoundary { index } => format!("far boundary {index}"),
    }
}

fn run_expand(case: &Case, cfg: &ExperimentConfig) -> Result<CaseOutput> {
    let mut terms = Table::new("terms", &["case", "interior", "rate", "power", "provenance", "max_abs", "residual"]);
    let mut ladder = Table::new("ladder", &["case", "interior", "step", "mu", "remainder_rate"]);
    let mut remainder = Table::new("remainder", &["case", "interior", "t", "norm"]);
    let mut rec = Recorder::new(case, String::new());
    let e = &cfg.expansion;
    for nint in levels(case, cfg) {
        let s = solve_case(case, cfg, nint)?;
        let g = s.v.grid;
        let stencil = TimeStencil::Uniform { h: g.ht };
        let g1 = s.spectrum.sector(0)[0].gamma;
        let set = stencil_index_set(&s.spectrum, stencil, e.gamma_max_factor * g1, e.res_tol)?;
        let target = set.mu(e.terms + 1).ok_or_else(|| {
            crate::Error::Config(format!("index set below {} gamma_1 has fewer than {} rates", e.gamma_max_factor, e.terms + 1))
        })?;
        let window = match e.window {
            Some([a, b]) => (g.t0 + a, g.t0 + b),
            None => (g.t0 + 2.0, g.t0 + 2.0 + 15.0 / target),
        };
        let mut opts = ExtractOptions::for_grid(g.ht);
        opts.res_tol = e.res_tol;
        opts.rate_window = Some(window);
        opts.check_stagnation = e.check_stagnation;
        let ex = extract_expansion(&s.v, &s.problem, &s.spectrum, &set, e.terms, &opts)?;
        let d = &s.problem.domain;
        for t in &ex.terms {
            let max = t.coefficient.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            terms.push(vec![
                case.label().into(),
                nint.into(),
                t.rate.into(),
                t.power.into(),
                provenance_name(&t.provenance).into(),
                max.into(),
                t.residual.into(),
            ]);
        }
        for (i, (mu, r)) in ex.ladder.iter().enumerate() {
            ladder.push(vec![case.label().into(), nint.into(), (i + 1).into(), (*mu).into(), Cell::Float(r.unwrap_or(f64::NAN))]);
        }
        let norms: Vec<f64> = ex.remainder.values.iter().map(|r| d.norm(r)).collect();
        for (t, v) in g.times().iter().zip(&norms) {
            remainder.push(vec![case.label().into(), nint.into(), (*t).into(), (*v).into()]);
        }
        rec.grid = format!("n={} theta0={:.6} N={nint} ht={} window={window:.3?}", case.n, case.theta0, g.ht);
        let fit = fit_decay(&g.times(), &norms, 0, Some(window))?;
        let rel = (fit.gamma / target - 1.0).abs();
        rec.check("remainder rate rel err", rel, rel <= e.rel_tol, format!("<= {} of mu_{}={target:.6}", e.rel_tol, e.terms + 1));
        let back = ex.reconstruct();
        let err =
            back.values.iter().flatten().zip(s.v.values.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / s.v.max_abs();
        rec.check("reconstruction error", err, err <= 1e-12, "<= 1e-12 relative");
    }
    rec.out.tables = vec![terms, ladder, remainder];
    Ok(rec.out)
}

/// Runs one pipeline over all cases of the config. Cases run on the worker
/// pool; outputs are merged in case order.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<Vec<CaseOutput>> {
    let f: fn(&Case, &ExperimentConfig) -> Result<CaseOutput> = match kind {
        ExperimentKind::Rho | ExperimentKind::Sweep => run_rho,
        ExperimentKind::Spectrum => run_spectrum,
        ExperimentKind::FredholmDecay => run_fredholm,
        ExperimentKind::ConeSolve => run_solve,
        ExperimentKind::Expansion => run_expand,
    };
    cfg.cases().par_iter().map(|c| f(c, cfg)).collect()
}

/// Concatenates same-named tables across cases.
pub fn merge(outputs: Vec<CaseOutput>) -> (Vec<Table>, Vec<Check>) {
    let mut tables: Vec<Table> = Vec::new();
    let mut checks = Vec::new();
    for o in outputs {
        for t in o.tables {
            match tables.iter_mut().find(|x| x.name == t.name) {
                Some(x) => x.extend(t),
                None => tables.push(t),
            }
        }
        checks.extend(o.checks);
    }
    (tables, checks)
}
