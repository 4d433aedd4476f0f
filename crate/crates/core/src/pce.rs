//! Total-degree Legendre polynomial chaos bases.
//!
//! Univariate polynomials are normalized against the uniform probability
//! measure on `[-1, 1]` (density 1/2), so `E[ψ_j ψ_k] = δ_jk` and
//! `ψ_j(y) = sqrt(2j + 1) P_j(y)`. Multivariate polynomials are tensor
//! products indexed by a [`MultiIndex`].

use std::cmp::Ordering;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Per-dimension polynomial degrees of one tensor basis function.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> Self {
        Self(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|α| = Σ α_i`
    pub fn total_degree(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&a| a == 0)
    }

    /// Graded ordering: lower total degree first, ties broken by the first
    /// differing entry with the larger value coming first.
    pub fn graded_cmp(&self, other: &Self) -> Ordering {
        self.total_degree()
            .cmp(&other.total_degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

/// Ordered total-degree index set `Λ_{p,d}`. The order defines the column
/// order of every measurement matrix and coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndexBasis {
    dim: usize,
    degree: usize,
    indices: Vec<MultiIndex>,
    // (dimension, degree) pairs of the nonzero entries, per index
    sparse: Vec<Vec<(usize, usize)>>,
}

/// Number of multi-indices with `d` entries and total degree at most `p`,
/// `(p + d)! / (p! d!)`, or `None` on overflow.
pub fn basis_cardinality(d: usize, p: usize) -> Option<usize> {
    // C(p + d, min(p, d)) built incrementally; every partial product is an
    // exact binomial coefficient so the division is exact.
    let k = p.min(d);
    let n = p.checked_add(d)?;
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = acc.checked_mul((n - k + i) as u128)? / i as u128;
        if acc > usize::MAX as u128 {
            return None;
        }
    }
    usize::try_from(acc).ok()
}

// Largest basis this crate will enumerate in memory.
const MAX_BASIS_SIZE: usize = 50_000_000;

/// Builds the graded total-degree basis for `d` inputs and maximum degree `p`.
pub fn build_basis(d: usize, p: usize) -> Result<MultiIndexBasis> {
    if d == 0 {
        return Err(Error::Config("input dimension d must be at least 1".into()));
    }
    let size = basis_cardinality(d, p)
        .ok_or_else(|| Error::Config(format!("basis size for d={d}, p={p} overflows usize")))?;
    if size > MAX_BASIS_SIZE {
        return Err(Error::Config(format!(
            "basis size {size} for d={d}, p={p} exceeds the supported maximum {MAX_BASIS_SIZE}"
        )));
    }

    let mut indices = Vec::with_capacity(size);
    let mut scratch = vec![0usize; d];
    for total in 0..=p {
        compositions(total, 0, &mut scratch, &mut indices);
    }
    indices.sort_by(|a, b| a.graded_cmp(b));
    debug_assert_eq!(indices.len(), size);

    let sparse = indices
        .iter()
        .map(|a| {
            a.entries()
                .iter()
                .enumerate()
                .filter(|(_, &deg)| deg > 0)
                .map(|(dim, &deg)| (dim, deg))
                .collect()
        })
        .collect();

    Ok(MultiIndexBasis { dim: d, degree: p, indices, sparse })
}

fn compositions(remaining: usize, pos: usize, scratch: &mut [usize], out: &mut Vec<MultiIndex>) {
    if pos + 1 == scratch.len() {
        scratch[pos] = remaining;
        out.push(MultiIndex(scratch.to_vec()));
        scratch[pos] = 0;
        return;
    }
    for v in 0..=remaining {
        scratch[pos] = v;
        compositions(remaining - v, pos + 1, scratch, out);
    }
    scratch[pos] = 0;
}

impl MultiIndexBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions `P`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn get(&self, i: usize) -> &MultiIndex {
        &self.indices[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MultiIndex> {
        self.indices.iter()
    }

    /// Position of `alpha` in the basis, if present.
    pub fn position(&self, alpha: &MultiIndex) -> Option<usize> {
        self.indices
            .binary_search_by(|probe| probe.graded_cmp(alpha))
            .ok()
    }

    /// Largest possible `|ψ_α|` over the hypercube, `3^{p/2}`.
    pub fn sup_bound(&self) -> f64 {
        3f64.powf(self.degree as f64 / 2.0)
    }

    /// Evaluates every basis function at `y`, which must lie in `[-1, 1]^d`.
    pub fn eval_row(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.dim);
        debug_assert_eq!(out.len(), self.len());
        let table = univariate_table(self.degree, y);
        let stride = self.degree + 1;
        for (o, nz) in out.iter_mut().zip(&self.sparse) {
            *o = nz
                .iter()
                .map(|&(dim, deg)| table[dim * stride + deg])
                .product();
        }
    }
}

// Row-major table of ψ_j(y_i) for j = 0..=max_degree.
fn univariate_table(max_degree: usize, y: &[f64]) -> Vec<f64> {
    let stride = max_degree + 1;
    let mut table = vec![0.0; y.len() * stride];
    for (i, &yi) in y.iter().enumerate() {
        orthonormal_legendre_upto(max_degree, yi, &mut table[i * stride..(i + 1) * stride]);
    }
    table
}

/// Fills `out[j] = ψ_j(y)` for `j = 0..out.len()` by the three-term recurrence.
pub fn orthonormal_legendre_upto(max_degree: usize, y: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), max_degree + 1);
    let mut prev = 1.0;
    let mut curr = y;
    out[0] = 1.0;
    if max_degree >= 1 {
        out[1] = 3f64.sqrt() * y;
    }
    for j in 1..max_degree {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0) * y * curr - jf * prev) / (jf + 1.0);
        prev = curr;
        curr = next;
        out[j + 1] = (2.0 * (jf + 1.0) + 1.0).sqrt() * next;
    }
}

fn check_unit_interval(y: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&y) {
        return Err(Error::ScalarDomain(format!("point {y} outside [-1, 1]")));
    }
    Ok(())
}

/// Orthonormal Legendre polynomial `ψ_j(y) = sqrt(2j+1) P_j(y)`.
pub fn legendre_eval(j: usize, y: f64) -> Result<f64> {
    check_unit_interval(y)?;
    let mut buf = vec![0.0; j + 1];
    orthonormal_legendre_upto(j, y, &mut buf);
    Ok(buf[j])
}

/// Tensor-product polynomial `Π_i ψ_{α_i}(y_i)`.
pub fn multivariate_eval(alpha: &MultiIndex, y: &[f64]) -> Result<f64> {
    if alpha.dim() != y.len() {
        return Err(Error::Dimension(format!(
            "multi-index has {} entries but point has {}",
            alpha.dim(),
            y.len()
        )));
    }
    let mut value = 1.0;
    for (&deg, &yi) in alpha.entries().iter().zip(y) {
        value *= legendre_eval(deg, yi)?;
    }
    Ok(value)
}

/// Dense `N × P` matrix of basis evaluations, `Ψ_ij = ψ_{α^{(j)}}(y^{(i)})`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    values: DMatrix<f64>,
    dim: usize,
    degree: usize,
}

impl MeasurementMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    pub fn sample_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn basis_size(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
}

/// Assembles the measurement matrix for `samples` (one sample per row).
pub fn assemble_matrix(basis: &MultiIndexBasis, samples: &DMatrix<f64>) -> Result<MeasurementMatrix> {
    if samples.ncols() != basis.dim() {
        return Err(Error::Dimension(format!(
            "samples have {} columns, basis dimension is {}",
            samples.ncols(),
            basis.dim()
        )));
    }
    for row in 0..samples.nrows() {
        for col in 0..samples.ncols() {
            let value = samples[(row, col)];
            if !(-1.0..=1.0).contains(&value) {
                return Err(Error::Domain { row, col, value });
            }
        }
    }

    let n = samples.nrows();
    let size = basis.len();
    let mut values = DMatrix::zeros(n, size);
    let mut y = vec![0.0; basis.dim()];
    let mut row = vec![0.0; size];
    for i in 0..n {
        for (k, yk) in y.iter_mut().enumerate() {
            *yk = samples[(i, k)];
        }
        basis.eval_row(&y, &mut row);
        for (j, &v) in row.iter().enumerate() {
            values[(i, j)] = v;
        }
    }

    let bound = basis.sup_bound() * (1.0 + 1e-12);
    if let Some(bad) = values.iter().find(|v| v.abs() > bound) {
        return Err(Error::Numerical(format!(
            "basis evaluation {bad} exceeds the sup bound {}",
            basis.sup_bound()
        )));
    }

    Ok(MeasurementMatrix { values, dim: basis.dim(), degree: basis.degree() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mi(v: &[usize]) -> MultiIndex {
        MultiIndex::new(v.to_vec())
    }

    #[test]
    fn two_dim_degree_two_order() {
        let basis = build_basis(2, 2).unwrap();
        let expected = [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]];
        let got: Vec<_> = basis.iter().map(|a| a.entries().to_vec()).collect();
        assert_eq!(got, expected.iter().map(|e| e.to_vec()).collect::<Vec<_>>());
    }

    #[test]
    fn order_matches_brute_force_enumeration() {
        // Brute force: every vector in {0..=p}^d, filtered by total degree,
        // then ordered by the two ranking rules applied pairwise.
        for (d, p) in [(3usize, 3usize), (4, 2), (2, 5), (1, 4)] {
            let mut all = Vec::new();
            let count = (p + 1).pow(d as u32);
            for code in 0..count {
                let mut c = code;
                let mut v = vec![0; d];
                for e in v.iter_mut() {
                    *e = c % (p + 1);
                    c /= p + 1;
                }
                if v.iter().sum::<usize>() <= p {
                    all.push(v);
                }
            }
            all.sort_by(|a, b| {
                let (sa, sb): (usize, usize) = (a.iter().sum(), b.iter().sum());
                if sa != sb {
                    return sa.cmp(&sb);
                }
                let k = (0..d).find(|&k| a[k] != b[k]);
                match k {
                    Some(k) => b[k].cmp(&a[k]),
                    None => Ordering::Equal,
                }
            });
            let basis = build_basis(d, p).unwrap();
            let got: Vec<_> = basis.iter().map(|a| a.entries().to_vec()).collect();
            assert_eq!(got, all, "d={d} p={p}");
        }
    }

    #[test]
    fn cardinalities() {
        assert_eq!(build_basis(14, 3).unwrap().len(), 680);
        assert_eq!(build_basis(20, 3).unwrap().len(), 1771);
        assert_eq!(build_basis(52, 2).unwrap().len(), 1431);
        let b = build_basis(7, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.get(0).is_zero());
    }

    #[test]
    fn overflow_and_zero_dim_rejected() {
        assert!(matches!(build_basis(0, 3), Err(Error::Config(_))));
        assert!(matches!(build_basis(usize::MAX, 3), Err(Error::Config(_))));
        assert!(matches!(build_basis(1000, 1000), Err(Error::Config(_))));
        assert_eq!(basis_cardinality(usize::MAX - 1, 5), None);
    }

    #[test]
    fn position_lookup() {
        let b = build_basis(3, 3).unwrap();
        for (i, a) in b.iter().enumerate() {
            assert_eq!(b.position(a), Some(i));
        }
        assert_eq!(b.position(&mi(&[4, 0, 0])), None);
    }

    #[test]
    fn univariate_closed_forms() {
        assert_eq!(legendre_eval(0, 0.37).unwrap(), 1.0);
        assert_abs_diff_eq!(legendre_eval(1, 1.0).unwrap(), 1.732_050_807_568_877_2, epsilon = 1e-15);
        assert_abs_diff_eq!(legendre_eval(2, 0.0).unwrap(), -1.118_033_988_749_895, epsilon = 1e-15);
        assert!(matches!(legendre_eval(2, 1.5), Err(Error::ScalarDomain(_))));
        assert!(legendre_eval(2, f64::NAN).is_err());
    }

    // Explicit monomial coefficients of P_j from
    // P_j(y) = 2^{-j} Σ_k (-1)^k C(j,k) C(2j-2k, j) y^{j-2k}.
    fn legendre_monomial(j: usize, y: f64) -> f64 {
        fn binom(n: usize, k: usize) -> f64 {
            (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        }
        let mut s = 0.0;
        for k in 0..=j / 2 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * binom(j, k) * binom(2 * j - 2 * k, j) * y.powi((j - 2 * k) as i32);
        }
        s / 2f64.powi(j as i32) * ((2 * j + 1) as f64).sqrt()
    }

    #[test]
    fn recurrence_matches_monomial_expansion() {
        for j in 0..=10 {
            for i in 0..=40 {
                let y = -1.0 + i as f64 / 20.0;
                let a = legendre_eval(j, y).unwrap();
                let b = legendre_monomial(j, y);
                assert!((a - b).abs() < 1e-10, "j={j} y={y}: {a} vs {b}");
                assert!(a.abs() <= ((2 * j + 1) as f64).sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn multivariate_examples() {
        assert_eq!(multivariate_eval(&mi(&[0, 0]), &[0.2, -0.9]).unwrap(), 1.0);
        assert_abs_diff_eq!(multivariate_eval(&mi(&[1, 1]), &[1.0, 1.0]).unwrap(), 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            multivariate_eval(&mi(&[2, 0, 1]), &[0.0, 0.42, -1.0]).unwrap(),
            1.936_491_673_103_708_5,
            epsilon = 1e-14
        );
        assert!(matches!(multivariate_eval(&mi(&[1, 1]), &[0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_sample_row() {
        let basis = build_basis(3, 3).unwrap();
        let m = assemble_matrix(&basis, &DMatrix::zeros(1, 3)).unwrap();
        assert_eq!(m.matrix()[(0, 0)], 1.0);
        for (j, a) in basis.iter().enumerate() {
            let direct = multivariate_eval(a, &[0.0, 0.0, 0.0]).unwrap();
            assert_abs_diff_eq!(m.matrix()[(0, j)], direct, epsilon = 1e-14);
            if a.entries().iter().any(|&e| e % 2 == 1) {
                assert_eq!(m.matrix()[(0, j)], 0.0);
            }
        }
    }

    #[test]
    fn all_ones_sample_hits_sup_bound() {
        let basis = build_basis(4, 3).unwrap();
        let m = assemble_matrix(&basis, &DMatrix::from_element(1, 4, 1.0)).unwrap();
        let max = m.matrix().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert_abs_diff_eq!(max, 3f64.powf(1.5), epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_sample_reports_location() {
        let basis = build_basis(2, 1).unwrap();
        let mut s = DMatrix::zeros(3, 2);
        s[(2, 1)] = 1.01;
        match assemble_matrix(&basis, &s) {
            Err(Error::Domain { row, col, .. }) => assert_eq!((row, col), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
