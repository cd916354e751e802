//! Model constants, axisymmetric grids on spherical caps and bands, and the
//! discrete Laplace-Beltrami operator in one polar variable.

use crate::error::{Error, Result};
use crate::linalg::Tridiagonal;
use std::f64::consts::PI;

/// Constants of the transformed problem in dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConstants {
    pub n: usize,
    /// n(n+2)/4, the strength of the inverse-square potential.
    pub kappa: f64,
    /// (n-2)/2, the shift in the cylinder equation.
    pub beta: f64,
    /// (n-2)/2, the zeroth-order coefficient of the weight equation.
    pub big_s: f64,
    /// (n+2)/2, the boundary exponent; s(s-1) = kappa.
    pub s: f64,
}

impl ModelConstants {
    /// Exponent (n+2)/(n-2) of the nonlinearity.
    pub fn p(&self) -> f64 {
        (self.n as f64 + 2.0) / (self.n as f64 - 2.0)
    }

    /// n(n-2)/4, the coefficient in front of u^p.
    pub fn yamabe(&self) -> f64 {
        let n = self.n as f64;
        n * (n - 2.0) / 4.0
    }

    /// Eigenvalue l(l+n-3) of the Laplacian on the (n-2)-sphere.
    pub fn azimuthal_eigenvalue(&self, ell: usize) -> f64 {
        let l = ell as f64;
        l * (l + self.n as f64 - 3.0)
    }

    /// Dimension of degree-l spherical harmonics on the (n-2)-sphere.
    pub fn azimuthal_multiplicity(&self, ell: usize) -> usize {
        let d = self.n - 2;
        if d == 1 {
            return if ell == 0 { 1 } else { 2 };
        }
        let c = |a: usize, b: usize| -> usize {
            if a < b {
                return 0;
            }
            let mut r: u128 = 1;
            for i in 0..b {
                r = r * (a - i) as u128 / (i + 1) as u128;
            }
            r as usize
        };
        c(ell + d, d) - if ell >= 2 { c(ell + d - 2, d) } else { 0 }
    }
}

pub fn constants(n: usize) -> Result<ModelConstants> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("dimension n = {n} must be at least 3")));
    }
    let nf = n as f64;
    Ok(ModelConstants { n, kappa: nf * (nf + 2.0) / 4.0, beta: (nf - 2.0) / 2.0, big_s: (nf - 2.0) / 2.0, s: (nf + 2.0) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainKind {
    /// {theta < theta0}, centred at the north pole.
    Cap { theta0: f64 },
    /// {theta_a < theta < theta_b}.
    Band { theta_a: f64, theta_b: f64 },
}

/// Uniform polar grid on a cap or band.
///
/// For a cap the stored nodes are the pole `theta = 0` followed by the `N`
/// interior nodes `k h`, `h = theta0/(N+1)`; the Dirichlet node `theta0` is
/// eliminated. For a band the stored nodes are the `N` interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CapDomain {
    pub n: usize,
    pub kind: DomainKind,
    pub interior: usize,
    pub h: f64,
    pub nodes: Vec<f64>,
    /// Cell volumes divided by h: sin^{n-2} at regular nodes.
    pub(crate) cell: Vec<f64>,
    /// Face coefficients between consecutive points of the full grid
    /// (`faces[j]` joins full-grid points j and j+1; full grid includes both
    /// endpoints).
    pub(crate) faces: Vec<f64>,
}

impl CapDomain {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_pole(&self) -> bool {
        matches!(self.kind, DomainKind::Cap { .. })
    }

    pub fn is_cap(&self) -> bool {
        self.has_pole()
    }

    /// Distance to the boundary of the domain on the sphere.
    pub fn distance(&self, theta: f64) -> f64 {
        match self.kind {
            DomainKind::Cap { theta0 } => theta0 - theta,
            DomainKind::Band { theta_a, theta_b } => (theta - theta_a).min(theta_b - theta),
        }
    }

    pub fn distances(&self) -> Vec<f64> {
        self.nodes.iter().map(|&t| self.distance(t)).collect()
    }

    /// Quadrature weights for the discrete inner product: h sin^{n-2} at
    /// regular nodes, the pole cell volume at the pole.
    pub fn weights(&self) -> Vec<f64> {
        self.cell.iter().map(|c| c * self.h).collect()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).zip(&self.cell).map(|((a, b), c)| a * b * c).sum::<f64>() * self.h
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    /// Offset of stored node 0 inside the full grid (1 for bands, whose
    /// full grid starts at the left Dirichlet point).
    fn full_offset(&self) -> usize {
        if self.has_pole() {
            0
        } else {
            1
        }
    }

    /// Face coefficient between stored node `k` and its right neighbour.
    pub(crate) fn face_right(&self, k: usize) -> f64 {
        self.faces[k + self.full_offset()]
    }

    /// Face coefficient between stored node `k` and its left neighbour
    /// (zero on the pole cell).
    pub(crate) fn face_left(&self, k: usize) -> f64 {
        let j = k + self.full_offset();
        if j == 0 {
            0.0
        } else {
            self.faces[j - 1]
        }
    }

    /// Centred first differences with zero Dirichlet values at the
    /// boundary and even reflection at the pole.
    pub fn gradient(&self, f: &[f64]) -> Vec<f64> {
        self.gradient_with_boundary(f, 0.0)
    }

    pub fn gradient_with_boundary(&self, f: &[f64], bval: f64) -> Vec<f64> {
        let m = f.len();
        assert_eq!(m, self.len());
        (0..m)
            .map(|k| {
                let right = if k + 1 < m { f[k + 1] } else { bval };
                let left = if k > 0 {
                    f[k - 1]
                } else if self.has_pole() {
                    f[1.min(m - 1)]
                } else {
                    bval
                };
                (right - left) / (2.0 * self.h)
            })
            .collect()
    }

    /// One-sided second-order slope at the outer boundary point, for a
    /// field vanishing there.
    pub fn outer_boundary_slope(&self, f: &[f64]) -> f64 {
        let m = f.len();
        (-4.0 * f[m - 1] + f[m - 2]) / (2.0 * self.h)
    }
}

pub fn make_cap(n: usize, theta0: f64, interior: usize) -> Result<CapDomain> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("dimension n = {n} must be at least 3")));
    }
    if !(theta0 > 0.0 && theta0 < PI) {
        return Err(Error::InvalidInput(format!("cap half-angle {theta0} outside (0, pi)")));
    }
    if interior < 16 {
        return Err(Error::InvalidInput(format!("need at least 16 interior nodes, got {interior}")));
    }
    let h = theta0 / (interior as f64 + 1.0);
    let nodes: Vec<f64> = (0..=interior).map(|k| k as f64 * h).collect();
    let e = n as f64 - 2.0;
    let mut cell: Vec<f64> = nodes.iter().map(|t| t.sin().powf(e)).collect();
    cell[0] = (0.5 * h).sin().powf(e) / (2.0 * (n as f64 - 1.0));
    // Face coefficients chosen so the discrete divergence of the flux of
    // cos(theta) reproduces -(n-1) cos(theta) cell by cell.
    let c: Vec<f64> = (0..=interior + 1).map(|k| (k as f64 * h).cos()).collect();
    let mut q = 0.0;
    let mut faces = Vec::with_capacity(interior + 1);
    for j in 0..=interior {
        q += h * cell[j] * (-(n as f64 - 1.0)) * c[j];
        faces.push(h * q / (c[j + 1] - c[j]));
    }
    Ok(CapDomain { n, kind: DomainKind::Cap { theta0 }, interior, h, nodes, cell, faces })
}

pub fn make_band(n: usize, theta_a: f64, theta_b: f64, interior: usize) -> Result<CapDomain> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("dimension n = {n} must be at least 3")));
    }
    if !(theta_a > 0.0 && theta_b < PI && theta_a < theta_b) {
        return Err(Error::InvalidInput(format!("band ({theta_a}, {theta_b}) not inside (0, pi)")));
    }
    if interior < 16 {
        return Err(Error::InvalidInput(format!("need at least 16 interior nodes, got {interior}")));
    }
    let h = (theta_b - theta_a) / (interior as f64 + 1.0);
    let full: Vec<f64> = (0..=interior + 1).map(|k| theta_a + k as f64 * h).collect();
    let nodes = full[1..=interior].to_vec();
    let e = n as f64 - 2.0;
    let cell: Vec<f64> = nodes.iter().map(|t| t.sin().powf(e)).collect();
    let c: Vec<f64> = full.iter().map(|t| t.cos()).collect();
    let mid = theta_a + 0.5 * h;
    let first = mid.sin().powf(e) * (0.5 * h) / (0.5 * h).sin();
    let mut q = first * (c[1] - c[0]) / h;
    let mut faces = Vec::with_capacity(interior + 1);
    faces.push(first);
    for j in 1..=interior {
        q += h * cell[j - 1] * (-(n as f64 - 1.0)) * c[j];
        faces.push(h * q / (c[j + 1] - c[j]));
    }
    Ok(CapDomain { n, kind: DomainKind::Band { theta_a, theta_b }, interior, h, nodes, cell, faces })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Finite Dirichlet value at the eliminated boundary node(s).
    Dirichlet(f64),
    /// The field is infinite on the boundary.
    BlowUp,
}

/// Field sampled on the stored nodes of a [`CapDomain`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
    pub boundary: Boundary,
}

impl ScalarField {
    pub fn new(values: Vec<f64>, boundary: Boundary) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite field value at node {k}")));
        }
        Ok(Self { values, boundary })
    }

    pub fn dirichlet_zero(values: Vec<f64>) -> Self {
        Self { values, boundary: Boundary::Dirichlet(0.0) }
    }

    pub fn sample(domain: &CapDomain, f: impl Fn(f64) -> f64) -> Self {
        Self::dirichlet_zero(domain.nodes.iter().map(|&t| f(t)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn boundary_value(&self) -> f64 {
        match self.boundary {
            Boundary::Dirichlet(v) => v,
            Boundary::BlowUp => f64::INFINITY,
        }
    }
}

/// Discrete f'' + (n-2) cot(theta) f' - l(l+n-3) f / sin^2(theta) on the
/// unknown nodes of one azimuthal sector.
///
/// In flux form, `(L f)_k = (F_{k+1/2}(f_{k+1}-f_k) - F_{k-1/2}(f_k-f_{k-1})) / (h^2 c_k)`
/// with cell volumes `c_k`; it is symmetric in the inner product with
/// weights `h c_k`.
#[derive(Debug, Clone)]
pub struct LaplaceBeltrami {
    pub ell: usize,
    /// Index of the first unknown among the stored domain nodes (1 when
    /// the pole is a Dirichlet point of the sector).
    pub first: usize,
    pub matrix: Tridiagonal,
    /// Coefficient coupling the last unknown to the outer boundary value.
    pub outer_coupling: f64,
    /// Coefficient coupling the first unknown to the inner boundary value
    /// (band inner edge; zero for caps).
    pub inner_coupling: f64,
    /// Inner-product weights on the unknowns.
    pub weights: Vec<f64>,
}

impl LaplaceBeltrami {
    pub fn unknowns(&self) -> usize {
        self.matrix.len()
    }

    /// Applies the operator to a field on all stored nodes, with a Dirichlet
    /// value `bval` on the boundary. Returns values on all stored nodes
    /// (zero on a pole excluded from the sector).
    pub fn apply_field(&self, f: &[f64], bval: f64) -> Vec<f64> {
        let u = &f[self.first..];
        let mut out = self.matrix.apply(u);
        let m = out.len();
        out[m - 1] += self.outer_coupling * bval;
        out[0] += self.inner_coupling * bval;
        let mut full = vec![0.0; self.first];
        full.extend(out);
        full
    }
}

pub fn laplace_beltrami(domain: &CapDomain, ell: usize) -> LaplaceBeltrami {
    let first = if domain.has_pole() && ell > 0 { 1 } else { 0 };
    let h2 = domain.h * domain.h;
    let consts = constants(domain.n).expect("domain dimension validated at construction");
    let ang = consts.azimuthal_eigenvalue(ell);
    let m = domain.len() - first;
    let mut diag = Vec::with_capacity(m);
    let mut lower = Vec::with_capacity(m.saturating_sub(1));
    let mut upper = Vec::with_capacity(m.saturating_sub(1));
    for i in 0..m {
        let k = i + first;
        let c = domain.cell[k];
        let fr = domain.face_right(k);
        let fl = domain.face_left(k);
        let mut d = -(fr + fl) / (h2 * c);
        if ell > 0 {
            let s = domain.nodes[k].sin();
            d -= ang / (s * s);
        }
        diag.push(d);
        if i + 1 < m {
            upper.push(fr / (h2 * c));
            lower.push(fr / (h2 * domain.cell[k + 1]));
        }
    }
    let last = domain.len() - 1;
    let outer_coupling = domain.face_right(last) / (h2 * domain.cell[last]);
    let inner_coupling = if domain.has_pole() { 0.0 } else { domain.face_left(0) / (h2 * domain.cell[0]) };
    // With a Dirichlet pole the face to the pole stays on the diagonal.
    let weights = domain.weights()[first..].to_vec();
    LaplaceBeltrami { ell, first, matrix: Tridiagonal::new(lower, diag, upper), outer_coupling, inner_coupling, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_examples() {
        let c3 = constants(3).unwrap();
        assert_eq!(c3.kappa, 15.0 / 4.0);
        assert_eq!(c3.beta, 0.5);
        assert_eq!(c3.s, 2.5);
        let c4 = constants(4).unwrap();
        assert_eq!((c4.kappa, c4.beta, c4.big_s, c4.s), (6.0, 1.0, 1.0, 3.0));
        let c10 = constants(10).unwrap();
        assert_eq!(c10.s * (c10.s - 1.0), c10.kappa);
        assert_eq!(c10.kappa, 30.0);
        assert!(constants(2).is_err());
    }

    #[test]
    fn multiplicities() {
        let c3 = constants(3).unwrap();
        assert_eq!(c3.azimuthal_multiplicity(0), 1);
        assert_eq!(c3.azimuthal_multiplicity(2), 2);
        let c4 = constants(4).unwrap();
        assert_eq!(c4.azimuthal_multiplicity(1), 3);
        assert_eq!(c4.azimuthal_multiplicity(2), 5);
    }

    #[test]
    fn cap_grid_layout() {
        let d = make_cap(3, PI / 2.0, 99).unwrap();
        assert!((d.h - PI / 200.0).abs() < 1e-15);
        assert_eq!(d.interior, 99);
        assert_eq!(d.len(), 100);
        for (k, &t) in d.nodes.iter().enumerate() {
            assert!((d.distance(t) - (PI / 2.0 - k as f64 * d.h)).abs() < 1e-14);
        }
        assert!(make_cap(3, PI, 99).is_err());
        assert!(make_cap(3, 0.0, 99).is_err());
    }

    #[test]
    fn band_distance_is_two_sided() {
        let d = make_band(3, PI / 6.0, PI / 3.0, 40).unwrap();
        for &t in &d.nodes {
            let expect = (t - PI / 6.0).min(PI / 3.0 - t);
            assert!((d.distance(t) - expect).abs() < 1e-15);
            assert!(d.distance(t) > 0.0);
        }
    }

    #[test]
    fn constants_are_harmonic() {
        for n in 3..7 {
            let d = make_cap(n, 1.2, 60).unwrap();
            let lb = laplace_beltrami(&d, 0);
            let out = lb.apply_field(&vec![1.0; d.len()], 1.0);
            assert!(out.iter().all(|v| v.abs() < 1e-9), "n={n}");
        }
    }

    #[test]
    fn cosine_eigenfunction_of_sphere() {
        for n in [3usize, 5] {
            let d = make_cap(n, PI / 2.0, 200).unwrap();
            let lb = laplace_beltrami(&d, 0);
            let f: Vec<f64> = d.nodes.iter().map(|t| t.cos()).collect();
            let out = lb.apply_field(&f, 0.0);
            for (o, t) in out.iter().zip(&d.nodes) {
                let exact = -(n as f64 - 1.0) * t.cos();
                assert!((o - exact).abs() < 10.0 * d.h * d.h, "n={n}");
            }
        }
    }
}
