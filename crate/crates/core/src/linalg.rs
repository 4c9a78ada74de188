//! Small dense complex linear algebra.
//!
//! Everything here works on row-major `dim x dim` matrices of `Complex64`.
//! Sizes are tiny (3x3 for the device, at most 6x6 for the permanent oracle),
//! so the routines favour clarity over blocking or SIMD.

use std::fmt;
use std::ops::{Add, Mul};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Maximum tolerated `max |U^dagger U - I|` for a matrix to count as unitary.
pub const UNITARITY_TOL: f64 = 1e-10;

/// Largest matrix the permanent oracle accepts.
pub const PERMANENT_MAX_DIM: usize = 6;

const JACOBI_MAX_SWEEPS: usize = 64;

#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(dim: usize, data: Vec<Complex64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::Shape { dim, expected: dim * dim, got: data.len() });
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { dim, data })
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self::new(dim, data)
    }

    pub fn from_real(dim: usize, data: &[f64]) -> Result<Self> {
        Self::new(dim, data.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![Complex64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        Self { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![Complex64::new(0.0, 0.0); dim * dim] }
    }

    pub fn diagonal(entries: &[Complex64]) -> Self {
        let mut m = Self::zeros(entries.len());
        for (i, &z) in entries.iter().enumerate() {
            m[(i, i)] = z;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn scale(&self, factor: Complex64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|&z| z * factor).collect() }
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Submatrix with rows and columns picked (with repetition) by index.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        assert_eq!(rows.len(), cols.len(), "selection must be square");
        for &k in rows.iter().chain(cols) {
            if k >= self.dim {
                return Err(Error::IndexOutOfRange { index: k, dim: self.dim });
            }
        }
        Self::from_fn(rows.len(), |a, b| self[(rows[a], cols[b])])
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.dim + j]
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        let n = self.dim;
        let mut out = ComplexMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                for j in 0..n {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        ComplexMatrix { dim: self.dim, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for i in 0..self.dim {
            if i > 0 {
                write!(f, "; ")?;
            }
            for j in 0..self.dim {
                if j > 0 {
                    write!(f, ", ")?;
                }
                let z = self[(i, j)];
                write!(f, "{:.6}{:+.6}i", z.re, z.im)?;
            }
        }
        write!(f, "]")
    }
}

/// Hermitian matrix stored as a real diagonal plus the strict lower triangle,
/// so `h[(i, j)] == conj(h[(j, i)])` holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix {
    dim: usize,
    diag: Vec<f64>,
    /// Row-major strict lower triangle: (1,0), (2,0), (2,1), ...
    lower: Vec<Complex64>,
}

impl HermitianMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, diag: vec![0.0; dim], lower: vec![Complex64::new(0.0, 0.0); dim * (dim.saturating_sub(1)) / 2] }
    }

    /// Build from a real symmetric matrix given row-major; only the lower
    /// triangle is read.
    pub fn from_real_symmetric(dim: usize, data: &[f64]) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::Shape { dim, expected: dim * dim, got: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut h = Self::zeros(dim);
        for i in 0..dim {
            h.diag[i] = data[i * dim + i];
            for j in 0..i {
                h.lower[Self::lower_index(i, j)] = Complex64::new(data[i * dim + j], 0.0);
            }
        }
        Ok(h)
    }

    /// Accepts a general matrix if it is Hermitian to within `tol`.
    pub fn from_matrix(m: &ComplexMatrix, tol: f64) -> Result<Self> {
        let n = m.dim();
        let mut asymmetry: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                asymmetry = asymmetry.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if asymmetry > tol {
            return Err(Error::NotHermitian { asymmetry });
        }
        let mut h = Self::zeros(n);
        for i in 0..n {
            h.diag[i] = m[(i, i)].re;
            for j in 0..i {
                h.lower[Self::lower_index(i, j)] = m[(i, j)];
            }
        }
        Ok(h)
    }

    #[inline]
    fn lower_index(i: usize, j: usize) -> usize {
        debug_assert!(j < i);
        i * (i - 1) / 2 + j
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => Complex64::new(self.diag[i], 0.0),
            std::cmp::Ordering::Greater => self.lower[Self::lower_index(i, j)],
            std::cmp::Ordering::Less => self.lower[Self::lower_index(j, i)].conj(),
        }
    }

    pub fn to_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.dim, |i, j| self.get(i, j)).expect("finite by construction")
    }

    /// Eigen-decomposition by cyclic complex Jacobi rotations.
    ///
    /// Returns eigenvalues and the unitary whose columns are the eigenvectors.
    pub fn eigh(&self) -> Result<(Vec<f64>, ComplexMatrix)> {
        let n = self.dim;
        let mut a = self.to_matrix();
        let mut v = ComplexMatrix::identity(n);
        let scale = a.entries().iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if scale == 0.0 {
            return Ok((vec![0.0; n], v));
        }
        let off_norm = |a: &ComplexMatrix| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += a[(i, j)].norm_sqr();
                    }
                }
            }
            s.sqrt()
        };

        let mut sweeps = 0;
        while off_norm(&a) > 1e-15 * scale {
            if sweeps == JACOBI_MAX_SWEEPS {
                return Err(Error::EigenNoConvergence { sweeps, matrix: format!("{:?}", self.to_matrix()) });
            }
            sweeps += 1;
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    let d = apq.norm();
                    if d == 0.0 {
                        continue;
                    }
                    // Phase the (p,q) element real, then a real Givens rotation.
                    let phase = Complex64::from_polar(1.0, -apq.arg());
                    let angle = 0.5 * (2.0 * d).atan2(a[(p, p)].re - a[(q, q)].re);
                    let (s, c) = angle.sin_cos();
                    let r_pp = Complex64::new(c, 0.0);
                    let r_pq = Complex64::new(-s, 0.0);
                    let r_qp = phase * s;
                    let r_qq = phase * c;

                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = akp * r_pp + akq * r_qp;
                        a[(k, q)] = akp * r_pq + akq * r_qq;
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = vkp * r_pp + vkq * r_qp;
                        v[(k, q)] = vkp * r_pq + vkq * r_qq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = r_pp.conj() * apk + r_qp.conj() * aqk;
                        a[(q, k)] = r_pq.conj() * apk + r_qq.conj() * aqk;
                    }
                    a[(p, q)] = Complex64::new(0.0, 0.0);
                    a[(q, p)] = Complex64::new(0.0, 0.0);
                    a[(p, p)] = Complex64::new(a[(p, p)].re, 0.0);
                    a[(q, q)] = Complex64::new(a[(q, q)].re, 0.0);
                }
            }
        }
        let eigenvalues = (0..n).map(|i| a[(i, i)].re).collect();
        Ok((eigenvalues, v))
    }
}

/// A matrix verified to be unitary within [`UNITARITY_TOL`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryMatrix(ComplexMatrix);

impl UnitaryMatrix {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        let defect = unitarity_defect(&m);
        if defect > UNITARITY_TOL {
            return Err(Error::NotUnitary { defect });
        }
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(ComplexMatrix::identity(dim))
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    /// Composition `self * rhs`.
    pub fn compose(&self, rhs: &UnitaryMatrix) -> Result<UnitaryMatrix> {
        UnitaryMatrix::new(&self.0 * &rhs.0)
    }
}

impl std::ops::Index<(usize, usize)> for UnitaryMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, idx: (usize, usize)) -> &Complex64 {
        &self.0[idx]
    }
}

/// `exp(i * scale * H)` via the Jacobi eigen-decomposition of `H`.
pub fn herm_expm(h: &HermitianMatrix, scale: f64) -> Result<UnitaryMatrix> {
    let (lambda, v) = h.eigh()?;
    let n = h.dim();
    let mut out = ComplexMatrix::zeros(n);
    for (k, &l) in lambda.iter().enumerate() {
        let phase = Complex64::from_polar(1.0, scale * l);
        for i in 0..n {
            let vik = v[(i, k)] * phase;
            for j in 0..n {
                out[(i, j)] += vik * v[(j, k)].conj();
            }
        }
    }
    UnitaryMatrix::new(out)
}

/// `max |M^dagger M - I|` over all entries.
pub fn unitarity_defect(m: &ComplexMatrix) -> f64 {
    let gram = &m.adjoint() * m;
    gram.max_abs_diff(&ComplexMatrix::identity(m.dim()))
}

/// Matrix permanent by Ryser's formula, walking subsets in Gray-code order.
pub fn permanent(m: &ComplexMatrix) -> Result<Complex64> {
    let n = m.dim();
    if n > PERMANENT_MAX_DIM {
        return Err(Error::UnsupportedSize { dim: n, max: PERMANENT_MAX_DIM });
    }
    let mut row_sums = vec![Complex64::new(0.0, 0.0); n];
    let mut in_subset = vec![false; n];
    let mut total = Complex64::new(0.0, 0.0);
    for k in 1u32..(1u32 << n) {
        let col = k.trailing_zeros() as usize;
        let sign = if in_subset[col] { -1.0 } else { 1.0 };
        in_subset[col] = !in_subset[col];
        for (i, s) in row_sums.iter_mut().enumerate() {
            *s += m[(i, col)] * sign;
        }
        let size = in_subset.iter().filter(|&&b| b).count();
        let prod: Complex64 = row_sums.iter().product();
        if size % 2 == 0 {
            total += prod;
        } else {
            total -= prod;
        }
    }
    if n % 2 == 1 {
        total = -total;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn naive_permanent(m: &ComplexMatrix) -> Complex64 {
        fn rec(m: &ComplexMatrix, row: usize, used: &mut Vec<bool>) -> Complex64 {
            let n = m.dim();
            if row == n {
                return c(1.0, 0.0);
            }
            let mut s = c(0.0, 0.0);
            for col in 0..n {
                if !used[col] {
                    used[col] = true;
                    s += m[(row, col)] * rec(m, row + 1, used);
                    used[col] = false;
                }
            }
            s
        }
        rec(m, 0, &mut vec![false; m.dim()])
    }

    fn hermitian_strategy(n: usize) -> impl Strategy<Value = HermitianMatrix> {
        prop::collection::vec(-3.0f64..3.0, n * n * 2).prop_map(move |v| {
            let m = ComplexMatrix::from_fn(n, |i, j| {
                let (a, b) = if i >= j { (i, j) } else { (j, i) };
                let z = c(v[2 * (a * n + b)], v[2 * (a * n + b) + 1]);
                if i == j {
                    c(z.re, 0.0)
                } else if i > j {
                    z
                } else {
                    z.conj()
                }
            })
            .unwrap();
            HermitianMatrix::from_matrix(&m, 0.0).unwrap()
        })
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let u = herm_expm(&HermitianMatrix::zeros(3), -1.0).unwrap();
        assert!(u.matrix().max_abs_diff(&ComplexMatrix::identity(3)) < 1e-15);
    }

    #[test]
    fn expm_of_scalar_is_global_phase() {
        let h = HermitianMatrix::from_real_symmetric(3, &[0.7, 0., 0., 0., 0.7, 0., 0., 0., 0.7]).unwrap();
        let u = herm_expm(&h, -1.0).unwrap();
        let expect = ComplexMatrix::identity(3).scale(Complex64::from_polar(1.0, -0.7));
        assert!(u.matrix().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn expm_two_mode_coupler_closed_form() {
        let g = FRAC_PI_4;
        let h = HermitianMatrix::from_real_symmetric(2, &[0.0, g, g, 0.0]).unwrap();
        let u = herm_expm(&h, -1.0).unwrap();
        let (s, co) = g.sin_cos();
        let expect = ComplexMatrix::new(2, vec![c(co, 0.0), c(0.0, -s), c(0.0, -s), c(co, 0.0)]).unwrap();
        assert!(u.matrix().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn jacobi_handles_complex_hermitian() {
        let m = ComplexMatrix::new(
            3,
            vec![
                c(1.0, 0.0),
                c(0.3, 0.4),
                c(-0.2, 0.1),
                c(0.3, -0.4),
                c(-0.5, 0.0),
                c(0.0, 0.7),
                c(-0.2, -0.1),
                c(0.0, -0.7),
                c(2.0, 0.0),
            ],
        )
        .unwrap();
        let h = HermitianMatrix::from_matrix(&m, 0.0).unwrap();
        let (lambda, v) = h.eigh().unwrap();
        let d = ComplexMatrix::diagonal(&lambda.iter().map(|&l| c(l, 0.0)).collect::<Vec<_>>());
        let rebuilt = &(&v * &d) * &v.adjoint();
        assert!(rebuilt.max_abs_diff(&m) < 1e-13);
        assert!(unitarity_defect(&v) < 1e-13);
    }

    #[test]
    fn rejects_non_hermitian() {
        let m = ComplexMatrix::new(2, vec![c(0., 0.), c(1., 0.), c(2., 0.), c(0., 0.)]).unwrap();
        assert!(matches!(HermitianMatrix::from_matrix(&m, 1e-12), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn rejects_nan_entries() {
        assert!(matches!(ComplexMatrix::new(1, vec![c(f64::NAN, 0.0)]), Err(Error::NonFinite)));
    }

    #[test]
    fn permanent_small_cases() {
        let z = c(0.3, -1.2);
        assert_eq!(permanent(&ComplexMatrix::new(1, vec![z]).unwrap()).unwrap(), z);
        let (a, b, cc, d) = (c(1., 2.), c(-0.5, 0.1), c(3., 0.), c(0.2, -0.7));
        let m = ComplexMatrix::new(2, vec![a, b, cc, d]).unwrap();
        assert!((permanent(&m).unwrap() - (a * d + b * cc)).norm() < 1e-14);
        // 3! permutations of an all-ones matrix each contribute 1.
        let ones = ComplexMatrix::from_real(3, &[1.0; 9]).unwrap();
        assert!((permanent(&ones).unwrap() - c(6.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn permanent_size_limit() {
        let m = ComplexMatrix::identity(7);
        assert!(matches!(permanent(&m), Err(Error::UnsupportedSize { dim: 7, .. })));
        assert!((permanent(&ComplexMatrix::identity(6)).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn defect_examples() {
        assert_eq!(unitarity_defect(&ComplexMatrix::identity(3)), 0.0);
        let twice = ComplexMatrix::identity(3).scale(c(2.0, 0.0));
        assert!((unitarity_defect(&twice) - 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn expm_is_unitary(h in hermitian_strategy(3), s in -5.0f64..5.0) {
            let u = herm_expm(&h, s).unwrap();
            prop_assert!(unitarity_defect(u.matrix()) <= 1e-10);
        }

        #[test]
        fn expm_semigroup(h in hermitian_strategy(3), s1 in -2.0f64..2.0, s2 in -2.0f64..2.0) {
            let a = herm_expm(&h, s1).unwrap();
            let b = herm_expm(&h, s2).unwrap();
            let ab = herm_expm(&h, s1 + s2).unwrap();
            prop_assert!((a.matrix() * b.matrix()).max_abs_diff(ab.matrix()) < 1e-9);
        }

        #[test]
        fn ryser_matches_naive_expansion(v in prop::collection::vec(-1.0f64..1.0, 2 * 16)) {
            let m = ComplexMatrix::from_fn(4, |i, j| c(v[2 * (4 * i + j)], v[2 * (4 * i + j) + 1])).unwrap();
            prop_assert!((permanent(&m).unwrap() - naive_permanent(&m)).norm() < 1e-12);
        }

        #[test]
        fn permanent_symmetries(v in prop::collection::vec(-1.0f64..1.0, 2 * 9), r in 0usize..3, p in 0usize..6) {
            let m = ComplexMatrix::from_fn(3, |i, j| c(v[2 * (3 * i + j)], v[2 * (3 * i + j) + 1])).unwrap();
            let zeroed = ComplexMatrix::from_fn(3, |i, j| if i == r { c(0., 0.) } else { m[(i, j)] }).unwrap();
            prop_assert!(permanent(&zeroed).unwrap().norm() < 1e-15);

            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[p];
            let rows = m.select(&perm, &[0, 1, 2]).unwrap();
            let cols = m.select(&[0, 1, 2], &perm).unwrap();
            let base = permanent(&m).unwrap();
            prop_assert!((permanent(&rows).unwrap() - base).norm() < 1e-13);
            prop_assert!((permanent(&cols).unwrap() - base).norm() < 1e-13);
        }
    }
}
