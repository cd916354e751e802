//! The singular operator L = Delta - kappa/rho^2: eigenpairs per azimuthal
//! sector, Fredholm solves, boundary exponents and the admissible rate set.

use crate::domain::{laplace_beltrami, CapDomain, ModelConstants, ScalarField};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, SymTridiagonal, Tridiagonal};
use rayon::prelude::*;

/// Default relative tolerance for spectral coincidences.
pub const RES_TOL: f64 = 1e-6;

/// `A = -L` restricted to one azimuthal sector.
#[derive(Debug, Clone)]
pub struct SingularOperator {
    pub ell: usize,
    /// First stored node that is an unknown of this sector.
    pub first: usize,
    pub minus_l: Tridiagonal,
    /// Weights on the unknowns.
    pub weights: Vec<f64>,
    nodes: usize,
}

impl SingularOperator {
    pub fn new(domain: &CapDomain, rho: &ScalarField, k: &ModelConstants, ell: usize) -> Result<Self> {
        if rho.len() != domain.len() {
            return Err(Error::InvalidInput("rho does not match the grid".into()));
        }
        let lb = laplace_beltrami(domain, ell);
        let mut a = lb.matrix.clone();
        a.diag.iter_mut().for_each(|d| *d = -*d);
        a.lower.iter_mut().for_each(|d| *d = -*d);
        a.upper.iter_mut().for_each(|d| *d = -*d);
        for (i, d) in a.diag.iter_mut().enumerate() {
            let r = rho.values[i + lb.first];
            if !(r > 0.0) {
                return Err(Error::InvalidInput(format!("rho must be positive, node {} has {r}", i + lb.first)));
            }
            *d += k.kappa / (r * r);
        }
        Ok(Self { ell, first: lb.first, minus_l: a, weights: lb.weights, nodes: domain.len() })
    }

    pub fn unknowns(&self) -> usize {
        self.minus_l.len()
    }

    /// Similarity transform by the square root of the weights.
    pub fn symmetric(&self) -> SymTridiagonal {
        let a = &self.minus_l;
        let off = (0..a.len() - 1).map(|i| a.upper[i] * (self.weights[i] / self.weights[i + 1]).sqrt()).collect();
        SymTridiagonal::new(a.diag.clone(), off)
    }

    fn restrict<'a>(&self, f: &'a [f64]) -> &'a [f64] {
        assert_eq!(f.len(), self.nodes);
        &f[self.first..]
    }

    fn extend(&self, u: Vec<f64>) -> Vec<f64> {
        let mut full = vec![0.0; self.first];
        full.extend(u);
        full
    }

    /// `L f` on all stored nodes.
    pub fn apply_l(&self, f: &[f64]) -> Vec<f64> {
        let out = self.minus_l.apply(self.restrict(f));
        self.extend(out.into_iter().map(|v| -v).collect())
    }

    /// Solves `(A - shift) u = rhs`.
    pub fn solve_shifted(&self, shift: f64, rhs: &[f64]) -> Vec<f64> {
        let u = self.minus_l.shifted(-shift).solve_pivoted(self.restrict(rhs));
        self.extend(u)
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.restrict(f).iter().zip(self.restrict(g)).zip(&self.weights).map(|((a, b), w)| a * b * w).sum()
    }

    /// Solves `(A - mu) u = rhs` with `u` orthogonal to `phi`, where `mu` is
    /// the eigenvalue of `phi` and `rhs` is orthogonal to it. Uses a nearby
    /// regular shift with projected defect correction.
    pub fn solve_deflated(&self, mu: f64, phi: &[f64], rhs: &[f64], gap: f64) -> Vec<f64> {
        let delta = 1e-3 * gap.max(1e-12);
        let shifted = self.minus_l.shifted(-(mu + delta));
        let project = |v: &mut Vec<f64>| {
            let c = self.inner(v, phi);
            v.iter_mut().zip(phi).for_each(|(a, b)| *a -= c * b);
        };
        let mut u = vec![0.0; self.nodes];
        let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for _ in 0..40 {
            let b: Vec<f64> = rhs.iter().zip(&u).map(|(r, x)| r - delta * x).collect();
            let mut next = self.extend(shifted.solve_pivoted(self.restrict(&b)));
            project(&mut next);
            let change = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let size = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            u = next;
            if change <= 1e-15 * size.max(scale / (gap + 1.0)) {
                break;
            }
        }
        u
    }
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    /// Eigenvalue of -L.
    pub lambda: f64,
    pub ell: usize,
    /// Unit-norm eigenfunction on all stored nodes (zero at a Dirichlet pole).
    pub phi: ScalarField,
    /// sqrt(lambda + beta^2).
    pub gamma: f64,
    /// Number of independent spherical harmonics in the sector.
    pub multiplicity: usize,
    /// Position within its sector (0 = lowest).
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectorCertificate {
    pub ell: usize,
    /// Sturm count just above the largest computed eigenvalue.
    pub count_below: usize,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    pub pairs: Vec<EigenPair>,
    pub k_max: usize,
    pub ell_max: usize,
    pub certificates: Vec<SectorCertificate>,
}

impl Spectrum {
    pub fn sector(&self, ell: usize) -> Vec<&EigenPair> {
        let mut v: Vec<&EigenPair> = self.pairs.iter().filter(|p| p.ell == ell).collect();
        v.sort_by_key(|p| p.index);
        v
    }

    /// Rates of the axisymmetric sector, in increasing order.
    pub fn axisymmetric_gammas(&self) -> Vec<f64> {
        self.sector(0).iter().map(|p| p.gamma).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.certificates.iter().all(|c| c.count_below == self.k_max)
    }
}

fn sign_changes(v: &[f64]) -> usize {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut last = 0.0;
    let mut count = 0;
    for &x in v {
        if x.abs() <= 1e-9 * max {
            continue;
        }
        if last != 0.0 && (x > 0.0) != (last > 0.0) {
            count += 1;
        }
        last = x;
    }
    count
}

/// Number of interior sign changes of a sampled function.
pub fn oscillation_count(phi: &ScalarField) -> usize {
    sign_changes(&phi.values)
}

fn sector_pairs(
    domain: &CapDomain,
    rho: &ScalarField,
    k: &ModelConstants,
    ell: usize,
    k_max: usize,
) -> Result<(Vec<EigenPair>, SectorCertificate)> {
    let op = SingularOperator::new(domain, rho, k, ell)?;
    let sym = op.symmetric();
    if k_max > sym.len() {
        return Err(Error::InvalidInput(format!("k_max = {k_max} exceeds {} unknowns", sym.len())));
    }
    let mut ys: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    let mut pairs = Vec::with_capacity(k_max);
    for idx in 0..k_max {
        let lambda = sym.eigenvalue(idx);
        let mut y = sym.eigenvector(lambda);
        for prev in &ys {
            let c: f64 = y.iter().zip(prev).map(|(a, b)| a * b).sum();
            y.iter_mut().zip(prev).for_each(|(a, b)| *a -= c * b);
        }
        let nrm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(nrm > 0.5) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency(format!(
                "eigensolver breakdown in sector {ell} at index {idx} (lambda {lambda}, residual norm after orthogonalisation {nrm})"
            )));
        }
        y.iter_mut().for_each(|v| *v /= nrm);
        let max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lead = y.iter().find(|v| v.abs() >= 1e-3 * max).copied().unwrap_or(1.0);
        if lead < 0.0 {
            y.iter_mut().for_each(|v| *v = -*v);
        }
        let phi_u: Vec<f64> = y.iter().zip(&op.weights).map(|(v, w)| v / w.sqrt()).collect();
        ys.push(y);
        let phi = ScalarField::dirichlet_zero(op.extend(phi_u));
        pairs.push(EigenPair {
            lambda,
            ell,
            gamma: (lambda + k.beta * k.beta).sqrt(),
            phi,
            multiplicity: k.azimuthal_multiplicity(ell),
            index: idx,
        });
    }
    let top = pairs.last().map(|p| p.lambda).unwrap_or(0.0);
    let bound = top + 1e-9 * (1.0 + top.abs());
    let cert = SectorCertificate { ell, count_below: sym.sturm_count(bound), bound };
    Ok((pairs, cert))
}

/// Lowest `k_max` eigenpairs of -L in every sector `ell <= ell_max`.
pub fn eigen_spectrum(domain: &CapDomain, rho: &ScalarField, k: &ModelConstants, ell_max: usize, k_max: usize) -> Result<Spectrum> {
    if k_max < 1 {
        return Err(Error::InvalidInput("k_max must be at least 1".into()));
    }
    let sectors: Vec<Result<(Vec<EigenPair>, SectorCertificate)>> =
        (0..=ell_max).into_par_iter().map(|ell| sector_pairs(domain, rho, k, ell, k_max)).collect();
    let mut pairs = Vec::new();
    let mut certificates = Vec::new();
    for s in sectors {
        let (p, c) = s?;
        pairs.extend(p);
        certificates.push(c);
    }
    pairs.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.ell.cmp(&b.ell)));
    if let Some(first) = pairs.first() {
        if first.ell != 0 {
            return Err(Error::Consistency(format!("lowest eigenvalue found in sector {}", first.ell)));
        }
    }
    Ok(Spectrum { pairs, k_max, ell_max, certificates })
}

/// Relative eigenvalue changes between grids N and 2N, per (ell, index).
pub fn richardson_changes(coarse: &Spectrum, fine: &Spectrum) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for c in &coarse.pairs {
        if let Some(f) = fine.pairs.iter().find(|f| f.ell == c.ell && f.index == c.index) {
            out.push((c.ell, c.index, ((f.lambda - c.lambda) / f.lambda).abs()));
        }
    }
    out.sort_by_key(|x| (x.0, x.1));
    out
}

/// Solves `L u + lambda u = f` with zero Dirichlet data in the
/// axisymmetric sector, observing the Fredholm alternative.
pub fn solve_fredholm(domain: &CapDomain, rho: &ScalarField, k: &ModelConstants, lambda: f64, f: &ScalarField) -> Result<ScalarField> {
    let op = SingularOperator::new(domain, rho, k, 0)?;
    solve_fredholm_op(&op, lambda, &f.values, RES_TOL).map(ScalarField::dirichlet_zero)
}

/// Eigenvalue of `op` closest to `lambda`, with its gap to the neighbours.
fn nearest_eigenvalue(sym: &SymTridiagonal, lambda: f64) -> (usize, f64, f64) {
    let n = sym.len();
    let below = sym.sturm_count(lambda);
    let mut cands = Vec::new();
    if below > 0 {
        cands.push(below - 1);
    }
    if below < n {
        cands.push(below);
    }
    let (idx, mu) = cands
        .into_iter()
        .map(|i| (i, sym.eigenvalue(i)))
        .min_by(|a, b| (a.1 - lambda).abs().total_cmp(&(b.1 - lambda).abs()))
        .expect("non-empty operator");
    let mut gap = f64::INFINITY;
    if idx > 0 {
        gap = gap.min(mu - sym.eigenvalue(idx - 1));
    }
    if idx + 1 < n {
        gap = gap.min(sym.eigenvalue(idx + 1) - mu);
    }
    (idx, mu, gap)
}

pub fn solve_fredholm_op(op: &SingularOperator, lambda: f64, f: &[f64], tol: f64) -> Result<Vec<f64>> {
    let sym = op.symmetric();
    let (_, mu, gap) = nearest_eigenvalue(&sym, lambda);
    let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
    if (lambda - mu).abs() > tol * (1.0 + mu.abs()) {
        return Ok(op.solve_shifted(lambda, &rhs));
    }
    let y = sym.eigenvector(mu);
    let phi = op.extend(y.iter().zip(&op.weights).map(|(v, w)| v / w.sqrt()).collect());
    let fnorm = op.inner(f, f).sqrt();
    let comp = op.inner(f, &phi);
    if fnorm > 0.0 && (comp / fnorm).abs() > tol.max(1e-8) {
        return Err(Error::AlternativeViolation { lambda, eigenvalue: mu, component: comp / fnorm });
    }
    let mut g = rhs;
    g.iter_mut().zip(&phi).for_each(|(a, b)| *a += comp * b);
    Ok(op.solve_deflated(mu, &phi, &g, gap))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub count: usize,
}

/// Least-squares slope of log|field| against log(rho) over nodes with rho in
/// `window`.
pub fn boundary_exponent_fit(field: &ScalarField, rho: &ScalarField, window: (f64, f64)) -> Result<ExponentFit> {
    let (lo, hi) = window;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!("bad window ({lo}, {hi})")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (f, r) in field.values.iter().zip(&rho.values) {
        if *r >= lo && *r <= hi && f.abs() > 0.0 {
            xs.push(r.ln());
            ys.push(f.abs().ln());
        }
    }
    if xs.len() < 6 {
        return Err(Error::InvalidInput(format!("only {} nodes in window ({lo}, {hi})", xs.len())));
    }
    let (c, resid) = least_squares(&[vec![1.0; xs.len()], xs.clone()], &ys)?;
    Ok(ExponentFit { slope: c[1], intercept: c[0], residual: resid, count: xs.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub rate: f64,
    /// Indices j with gamma_j equal to this rate.
    pub pure: Vec<usize>,
    /// Multisets {(i, n_i)} with sum n_i >= 2 producing this rate.
    pub combinations: Vec<Vec<(usize, u32)>>,
    /// A pure rate coinciding with a combination.
    pub resonant: bool,
    /// Largest power of t that can accompany this rate.
    pub degree_bound: usize,
}

impl IndexEntry {
    pub fn is_pure(&self) -> bool {
        !self.pure.is_empty()
    }

    pub fn is_combination(&self) -> bool {
        !self.combinations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSet {
    pub entries: Vec<IndexEntry>,
    pub gammas: Vec<f64>,
    pub gamma_max: f64,
    pub res_tol: f64,
}

impl IndexSet {
    pub fn rates(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.rate).collect()
    }

    /// mu_i, 1-based as in the expansion.
    pub fn mu(&self, i: usize) -> Option<f64> {
        self.entries.get(i.checked_sub(1)?).map(|e| e.rate)
    }
}

fn enumerate(gammas: &[f64], gamma_max: f64, i: usize, acc: f64, counts: &mut Vec<u32>, out: &mut Vec<(f64, Vec<(usize, u32)>)>) {
    if i == gammas.len() {
        let total: u32 = counts.iter().sum();
        if total >= 1 {
            let ms = counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(j, c)| (j, *c)).collect();
            out.push((acc, ms));
        }
        return;
    }
    let mut c = 0u32;
    loop {
        let val = acc + c as f64 * gammas[i];
        if val > gamma_max * (1.0 + 1e-12) {
            break;
        }
        counts[i] = c;
        enumerate(gammas, gamma_max, i + 1, val, counts, out);
        c += 1;
    }
    counts[i] = 0;
}

/// All values sum n_i gamma_i <= gamma_max with their provenance, merged
/// within `res_tol` (relative).
pub fn index_set(gammas: &[f64], gamma_max: f64, res_tol: f64) -> Result<IndexSet> {
    if gammas.is_empty() {
        return Err(Error::InvalidInput("no rates supplied".into()));
    }
    if gammas.windows(2).any(|w| w[1] < w[0]) || gammas[0] <= 0.0 {
        return Err(Error::InvalidInput("rates must be positive and increasing".into()));
    }
    if !(gamma_max > 2.0 * gammas[0]) {
        return Err(Error::InvalidInput(format!("cutoff {gamma_max} must exceed 2 gamma_1 = {}", 2.0 * gammas[0])));
    }
    let mut raw = Vec::new();
    enumerate(gammas, gamma_max, 0, 0.0, &mut vec![0; gammas.len()], &mut raw);
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut entries: Vec<IndexEntry> = Vec::new();
    let mut group_start = 0.0;
    for (rate, ms) in raw {
        let total: u32 = ms.iter().map(|x| x.1).sum();
        let same = entries
            .last()
            .map(|e: &IndexEntry| (rate - group_start).abs() <= res_tol * group_start.abs().max(1.0) && e.rate.is_finite())
            .unwrap_or(false);
        if !same {
            group_start = rate;
            entries.push(IndexEntry { rate, pure: vec![], combinations: vec![], resonant: false, degree_bound: 0 });
        }
        let e = entries.last_mut().expect("pushed above");
        if total == 1 {
            e.pure.push(ms[0].0);
            // report the pure rate itself when one is present
            e.rate = gammas[ms[0].0];
        } else {
            e.combinations.push(ms);
        }
    }
    for e in entries.iter_mut() {
        e.resonant = e.is_pure() && e.is_combination();
    }
    // Degree bound: products add t-powers, each resonance adds one.
    for i in 0..entries.len() {
        let r = entries[i].rate;
        let mut best = 0usize;
        if entries[i].is_combination() {
            for a in 0..i {
                for b in a..i {
                    let sum = entries[a].rate + entries[b].rate;
                    if (sum - r).abs() <= res_tol * r.max(1.0) * 2.0 {
                        best = best.max(entries[a].degree_bound + entries[b].degree_bound);
                    }
                }
            }
        }
        let deg = best + usize::from(entries[i].resonant);
        entries[i].degree_bound = deg.min(i);
    }
    Ok(IndexSet { entries, gammas: gammas.to_vec(), gamma_max, res_tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{constants, make_cap};
    use std::f64::consts::PI;

    fn half_sphere(n: usize, n_int: usize) -> (CapDomain, ScalarField, ModelConstants) {
        let d = make_cap(n, PI / 2.0, n_int).unwrap();
        let rho = ScalarField::sample(&d, f64::cos);
        (d, rho, constants(n).unwrap())
    }

    #[test]
    fn half_sphere_first_eigenvalue() {
        for n in [3usize, 4, 5] {
            let (d, rho, k) = half_sphere(n, 1000);
            let sp = eigen_spectrum(&d, &rho, &k, 1, 3).unwrap();
            let nf = n as f64;
            let exact = (nf + 2.0) * (3.0 * nf - 2.0) / 4.0;
            let l1 = sp.pairs[0].lambda;
            assert!(((l1 - exact) / exact).abs() < 1e-4, "n={n} {l1} vs {exact}");
            assert!((sp.pairs[0].gamma - nf).abs() < 1e-4);
            assert!(sp.is_complete());
            // the weighted eigenfunction is positive
            assert!(sp.pairs[0].phi.values.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn fredholm_examples() {
        let (d, rho, k) = half_sphere(3, 400);
        let zero = ScalarField::dirichlet_zero(vec![0.0; d.len()]);
        let u = solve_fredholm(&d, &rho, &k, 0.0, &zero).unwrap();
        assert!(u.values.iter().all(|v| *v == 0.0));
        let sp = eigen_spectrum(&d, &rho, &k, 0, 2).unwrap();
        let p1 = &sp.pairs[0];
        let u = solve_fredholm(&d, &rho, &k, 0.0, &p1.phi).unwrap();
        for (a, b) in u.values.iter().zip(&p1.phi.values) {
            assert!((a + b / p1.lambda).abs() < 1e-9 * (1.0 + b.abs()));
        }
        // case (ii): lambda at an eigenvalue, f along another eigenfunction
        let p2 = &sp.pairs[1];
        let u = solve_fredholm(&d, &rho, &k, p1.lambda, &p2.phi).unwrap();
        let expect = 1.0 / (p1.lambda - p2.lambda);
        for (a, b) in u.values.iter().zip(&p2.phi.values) {
            assert!((a - expect * b).abs() < 1e-8 * (1.0 + b.abs()));
        }
        let err = solve_fredholm(&d, &rho, &k, p1.lambda, &p1.phi);
        assert!(matches!(err, Err(Error::AlternativeViolation { .. })));
    }

    #[test]
    fn exponent_of_exact_power() {
        let d = make_cap(3, PI / 2.0, 400).unwrap();
        let rho = ScalarField::sample(&d, f64::cos);
        let f = ScalarField::dirichlet_zero(rho.values.iter().map(|r| r.powf(2.5)).collect());
        let fit = boundary_exponent_fit(&f, &rho, (0.01, 0.1)).unwrap();
        assert!((fit.slope - 2.5).abs() < 1e-6);
        assert!(boundary_exponent_fit(&f, &rho, (0.001, 0.002)).is_err());
    }

    #[test]
    fn index_set_examples() {
        let s = index_set(&[3.0, 8.0], 10.0, RES_TOL).unwrap();
        assert_eq!(s.rates(), vec![3.0, 6.0, 8.0, 9.0]);
        assert!(s.entries[1].is_combination() && !s.entries[1].is_pure());
        assert!(s.entries[3].is_combination());
        assert!(s.entries.iter().all(|e| !e.resonant));
        let r = index_set(&[3.0, 6.0], 13.0, RES_TOL).unwrap();
        let six = r.entries.iter().find(|e| (e.rate - 6.0).abs() < 1e-12).unwrap();
        assert!(six.resonant && six.degree_bound == 1);
        for (i, e) in r.entries.iter().enumerate() {
            assert!(e.degree_bound <= i);
        }
        assert!(index_set(&[3.0], 5.0, RES_TOL).is_err());
    }
}
