//! Small dense-free kernels: tridiagonal solves, banded LU and a symmetric
//! tridiagonal eigensolver (Sturm bisection + inverse iteration).

use crate::error::{Error, Result};

/// Tridiagonal matrix with `lower[i] = A[i+1][i]` and `upper[i] = A[i][i+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn new(lower: Vec<f64>, diag: Vec<f64>, upper: Vec<f64>) -> Self {
        let n = diag.len();
        assert!(n >= 1);
        assert_eq!(lower.len(), n - 1);
        assert_eq!(upper.len(), n - 1);
        Self { lower, diag, upper }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    /// Returns `A + shift * I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut out = self.clone();
        out.diag.iter_mut().for_each(|d| *d += shift);
        out
    }

    /// Thomas algorithm without pivoting. Intended for diagonally dominant or
    /// definite systems; a vanishing pivot is reported instead of producing
    /// non-finite output.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        assert_eq!(rhs.len(), n);
        let scale = self.diag.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(1e-300);
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut piv = self.diag[0];
        if piv.abs() <= 1e-300 * scale {
            return Err(Error::SingularPivot { context: "tridiagonal solve", row: 0, pivot: piv });
        }
        if n > 1 {
            c[0] = self.upper[0] / piv;
        }
        d[0] = rhs[0] / piv;
        for i in 1..n {
            piv = self.diag[i] - self.lower[i - 1] * c[i - 1];
            if piv.abs() <= 1e-300 * scale || !piv.is_finite() {
                return Err(Error::SingularPivot { context: "tridiagonal solve", row: i, pivot: piv });
            }
            if i + 1 < n {
                c[i] = self.upper[i] / piv;
            }
            d[i] = (rhs[i] - self.lower[i - 1] * d[i - 1]) / piv;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }

    /// Gaussian elimination with partial pivoting (the `gtsv` scheme). Zero
    /// pivots are replaced by `eps * norm`, which is what inverse iteration
    /// needs when the shift is an eigenvalue to machine precision.
    pub fn solve_pivoted(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.len();
        assert_eq!(rhs.len(), n);
        let norm =
            self.diag.iter().chain(self.lower.iter()).chain(self.upper.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let tiny = f64::EPSILON * norm;
        let mut d = self.diag.clone();
        let mut du = self.upper.clone();
        let mut dl = self.lower.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut b = rhs.to_vec();
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == 0.0 {
                    d[i] = tiny;
                }
                let f = dl[i] / d[i];
                d[i + 1] -= f * du[i];
                b[i + 1] -= f * b[i];
                dl[i] = 0.0;
            } else {
                let f = d[i] / dl[i];
                d[i] = dl[i];
                let tmp = d[i + 1];
                d[i + 1] = du[i] - f * tmp;
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -f * du2[i];
                }
                du[i] = tmp;
                b.swap(i, i + 1);
                b[i + 1] -= f * b[i];
            }
        }
        if d[n - 1] == 0.0 {
            d[n - 1] = tiny;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = b[n - 1] / d[n - 1];
        if n > 1 {
            x[n - 2] = (b[n - 2] - du[n - 2] * x[n - 1]) / d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            x[i] = (b[i] - du[i] * x[i + 1] - du2[i] * x[i + 2]) / d[i];
        }
        x
    }
}

/// Symmetric tridiagonal matrix `diag` / `off` (`off[i] = T[i][i+1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert!(!diag.is_empty());
        assert_eq!(off.len(), diag.len() - 1);
        Self { diag, off }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Number of eigenvalues strictly below `x`.
    pub fn sturm_count(&self, x: f64) -> usize {
        let n = self.len();
        let mut count = 0;
        let mut q = self.diag[0] - x;
        let floor = f64::MIN_POSITIVE.sqrt();
        for i in 0..n {
            if i > 0 {
                let e2 = self.off[i - 1] * self.off[i - 1];
                q = self.diag[i] - x - e2 / q;
            }
            if q.abs() < floor {
                q = -floor;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    pub fn gershgorin(&self) -> (f64, f64) {
        let n = self.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let mut r = 0.0;
            if i > 0 {
                r += self.off[i - 1].abs();
            }
            if i + 1 < n {
                r += self.off[i].abs();
            }
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    /// The `k`-th smallest eigenvalue (0-based) by bisection on the Sturm count.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        assert!(k < self.len());
        let (mut lo, mut hi) = self.gershgorin();
        let pad = 1e-12 * (lo.abs().max(hi.abs())).max(1.0);
        lo -= pad;
        hi += pad;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.sturm_count(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let t = Tridiagonal::new(self.off.clone(), self.diag.clone(), self.off.clone());
        t.apply(x)
    }

    /// Unit eigenvector for an eigenvalue `lambda` that is accurate to
    /// working precision, by inverse iteration from a deterministic start.
    pub fn eigenvector(&self, lambda: f64) -> Vec<f64> {
        let n = self.len();
        let shifted = Tridiagonal::new(self.off.clone(), self.diag.iter().map(|d| d - lambda).collect(), self.off.clone());
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7531).sin()).collect();
        normalize(&mut x);
        for _ in 0..4 {
            let mut y = shifted.solve_pivoted(&x);
            normalize(&mut y);
            x = y;
        }
        x
    }
}

fn normalize(x: &mut [f64]) {
    let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nrm > 0.0 && nrm.is_finite() {
        x.iter_mut().for_each(|v| *v /= nrm);
    }
}

/// General band matrix stored row-wise, `kl` sub- and `ku` super-diagonals.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self { n, kl, ku, data: vec![0.0; n * (kl + ku + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku);
        i * (self.kl + self.ku + 1) + (j + self.kl - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let j0 = i.saturating_sub(self.kl);
                let j1 = (i + self.ku).min(self.n - 1);
                (j0..=j1).map(|j| self.data[self.idx(i, j)] * x[j]).sum()
            })
            .collect()
    }

    /// In-place LU without pivoting. Fill-in stays inside the band, which is
    /// adequate for the definite operators assembled by the cylinder solvers.
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for k in 0..n {
            let piv = self.data[self.idx(k, k)];
            if piv.abs() <= 1e-14 * scale || !piv.is_finite() {
                return Err(Error::SingularPivot { context: "banded LU", row: k, pivot: piv });
            }
            let imax = (k + self.kl).min(n - 1);
            let jmax = (k + self.ku).min(n - 1);
            for i in k + 1..=imax {
                let ik = self.idx(i, k);
                let l = self.data[ik] / piv;
                if l == 0.0 {
                    continue;
                }
                self.data[ik] = l;
                let row_k = self.idx(k, k);
                let row_i = self.idx(i, k);
                for off in 1..=(jmax - k) {
                    self.data[row_i + off] -= l * self.data[row_k + off];
                }
            }
        }
        Ok(BandLu { m: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
}

impl BandLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let a = &self.m;
        let n = a.n;
        assert_eq!(rhs.len(), n);
        let mut y = rhs.to_vec();
        for i in 0..n {
            let j0 = i.saturating_sub(a.kl);
            let mut acc = y[i];
            for j in j0..i {
                acc -= a.data[a.idx(i, j)] * y[j];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let j1 = (i + a.ku).min(n - 1);
            let mut acc = y[i];
            for j in i + 1..=j1 {
                acc -= a.data[a.idx(i, j)] * y[j];
            }
            y[i] = acc / a.data[a.idx(i, i)];
        }
        y
    }
}

/// Least squares `min |A c - y|` for a small dense design matrix given by
/// columns, via Householder QR. Returns coefficients and residual 2-norm.
pub fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let p = columns.len();
    let m = y.len();
    if p == 0 || m < p {
        return Err(Error::DegenerateFit(format!("{m} samples for {p} unknowns")));
    }
    // Equilibrate columns so the rank test is scale-free.
    let scales: Vec<f64> = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(k) = scales.iter().position(|s| *s == 0.0) {
        return Err(Error::DegenerateFit(format!("rank-deficient column {k}")));
    }
    let mut a: Vec<Vec<f64>> = columns.iter().zip(&scales).map(|(c, s)| c.iter().map(|v| v / s).collect()).collect();
    let mut b = y.to_vec();
    for k in 0..p {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateFit(format!("rank-deficient column {k}")));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(k) {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(x, y)| x * y).sum();
                let f = 2.0 * dot / vnorm2;
                for (c, vi) in col[k..].iter_mut().zip(&v) {
                    *c -= f * vi;
                }
            }
            let dot: f64 = v.iter().zip(&b[k..]).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in b[k..].iter_mut().zip(&v) {
                *c -= f * vi;
            }
        }
    }
    let rmax = (0..p).map(|k| a[k][k].abs()).fold(0.0, f64::max);
    let mut c = vec![0.0; p];
    for k in (0..p).rev() {
        if a[k][k].abs() <= 1e-13 * rmax {
            return Err(Error::DegenerateFit(format!("ill-conditioned design at column {k}")));
        }
        let mut acc = b[k];
        for j in k + 1..p {
            acc -= a[j][k] * c[j];
        }
        c[k] = acc / a[k][k];
    }
    let resid = b[p..].iter().map(|v| v * v).sum::<f64>().sqrt();
    c.iter_mut().zip(&scales).for_each(|(x, s)| *x /= s);
    Ok((c, resid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(n: usize) -> SymTridiagonal {
        SymTridiagonal::new(vec![2.0; n], vec![-1.0; n - 1])
    }

    #[test]
    fn thomas_matches_pivoted() {
        let t = Tridiagonal::new(vec![-1.0, 0.5, 2.0], vec![4.0, 5.0, 6.0, 7.0], vec![1.0, -2.0, 0.3]);
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let x1 = t.solve(&b).unwrap();
        let x2 = t.solve_pivoted(&b);
        let r = t.apply(&x1);
        for i in 0..4 {
            assert!((r[i] - b[i]).abs() < 1e-13);
            assert!((x1[i] - x2[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn pivoted_handles_zero_diagonal() {
        let t = Tridiagonal::new(vec![1.0, 1.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0]);
        let b = vec![1.0, 2.0, 3.0];
        let x = t.solve_pivoted(&b);
        let r = t.apply(&x);
        for i in 0..3 {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_laplacian_spectrum() {
        let n = 50;
        let t = laplacian(n);
        for k in 0..5 {
            let exact = 2.0 - 2.0 * (((k + 1) as f64) * std::f64::consts::PI / (n as f64 + 1.0)).cos();
            let lam = t.eigenvalue(k);
            assert!((lam - exact).abs() < 1e-12, "{lam} vs {exact}");
            let v = t.eigenvector(lam);
            let tv = t.apply(&v);
            let res = tv.iter().zip(&v).map(|(a, b)| (a - lam * b).abs()).fold(0.0, f64::max);
            assert!(res < 1e-12);
        }
        assert_eq!(t.sturm_count(0.0), 0);
        assert_eq!(t.sturm_count(4.0), n);
    }

    #[test]
    fn band_lu_matches_tridiagonal() {
        let n = 30;
        let mut m = BandMatrix::zeros(n, 3, 3);
        for i in 0..n {
            m.add(i, i, 10.0 + i as f64);
            if i >= 3 {
                m.add(i, i - 3, -1.0);
            }
            if i + 1 < n {
                m.add(i, i + 1, -2.0);
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let x = m.clone().factor().unwrap().solve(&b);
        let r = m.apply(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn least_squares_line() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = t.iter().map(|t| 2.0 - 0.5 * t).collect();
        let (c, r) = least_squares(&[vec![1.0; 10], t.clone()], &y).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-12 && (c[1] + 0.5).abs() < 1e-12 && r < 1e-12);
    }
}
