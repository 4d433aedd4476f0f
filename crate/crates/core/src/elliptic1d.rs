//! Stochastic 1D elliptic benchmark: `-(a(x, y) u')' = 1` on `(0, 1)` with
//! `u(0) = u(1) = 0` and a log-free diffusion coefficient
//!
//! ```text
//! a(x, y) = ā + σ Σ_i sqrt(λ_i) φ_i(x) y_i,   y ∈ [-1, 1]^d,
//! ```
//!
//! where `(λ_i, φ_i)` are the leading eigenpairs of the Gaussian covariance
//! kernel `exp(-(x1 - x2)² / L²)`. The quantity of interest is `u(0.5, y)`.

use gauss_quad::legendre::GaussLegendre;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMetadata};
use crate::error::{Error, Result};

/// Recorded in dataset metadata; bump when generated values change.
pub const GENERATOR_VERSION: &str = "elliptic1d-1";

/// Gauss–Legendre nodes and weights mapped to `(0, 1)`, nodes ascending.
pub fn gauss_legendre_unit(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rule = GaussLegendre::new(n).map_err(|_| Error::Config(format!("Gauss-Legendre rule needs at least 2 nodes, got {n}")))?;
    let mut pairs = rule.into_node_weight_pairs();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).unzip())
}

pub fn gaussian_kernel(x1: f64, x2: f64, corr_len: f64) -> f64 {
    let r = (x1 - x2) / corr_len;
    (-r * r).exp()
}

/// Leading eigenpairs of the covariance operator, stored as Nyström node
/// values.
#[derive(Debug, Clone)]
pub struct KlExpansion {
    corr_len: f64,
    eigenvalues: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `node_values[(k, i)] = φ_i(x_k)`.
    node_values: DMatrix<f64>,
    operator_trace: f64,
    all_eigenvalues: Vec<f64>,
}

impl KlExpansion {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn corr_len(&self) -> f64 {
        self.corr_len
    }

    /// Descending, strictly positive.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Every eigenvalue of the discretized operator, descending.
    pub fn spectrum(&self) -> &[f64] {
        &self.all_eigenvalues
    }

    /// Trace of the discretized operator, `Σ_k w_k C(x_k, x_k)`.
    pub fn operator_trace(&self) -> f64 {
        self.operator_trace
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node_values(&self) -> &DMatrix<f64> {
        &self.node_values
    }

    /// All eigenfunctions at `x` via the Nyström extension
    /// `φ_i(x) = λ_i⁻¹ Σ_k w_k C(x, x_k) φ_i(x_k)`.
    pub fn eigenfunctions_at(&self, x: f64) -> DVector<f64> {
        let kernel = DVector::from_iterator(
            self.nodes.len(),
            self.nodes.iter().zip(&self.weights).map(|(&xk, &wk)| wk * gaussian_kernel(x, xk, self.corr_len)),
        );
        let mut phi = self.node_values.tr_mul(&kernel);
        for (p, l) in phi.iter_mut().zip(&self.eigenvalues) {
            *p /= l;
        }
        phi
    }
}

/// Nyström discretization of the covariance eigenproblem on `n_quad`
/// Gauss–Legendre nodes. Eigenfunctions are L²-normalized and signed so
/// their value at the first node is non-negative.
pub fn kl_eigenpairs(corr_len: f64, d: usize, n_quad: usize) -> Result<KlExpansion> {
    if !(corr_len > 0.0) || !corr_len.is_finite() {
        return Err(Error::Config(format!("correlation length must be positive, got {corr_len}")));
    }
    if d == 0 {
        return Err(Error::Config("need at least one KL term".into()));
    }
    if n_quad < 4 * d {
        return Err(Error::Config(format!("need at least {} quadrature nodes for {d} terms, got {n_quad}", 4 * d)));
    }
    let (nodes, weights) = gauss_legendre_unit(n_quad)?;
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(n_quad, n_quad, |i, j| sqrt_w[i] * gaussian_kernel(nodes[i], nodes[j], corr_len) * sqrt_w[j]);
    let operator_trace = a.trace();
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..n_quad).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let all_eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvalues: Vec<f64> = all_eigenvalues[..d].to_vec();
    if let Some(i) = eigenvalues.iter().position(|&l| !(l > 0.0)) {
        return Err(Error::Numerical(format!(
            "eigenvalue {} is {:e}; the kernel cannot support {d} positive modes at this resolution",
            i + 1,
            eigenvalues[i]
        )));
    }

    let mut node_values = DMatrix::zeros(n_quad, d);
    for (col, &src) in order[..d].iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        let sign = if v[0] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n_quad {
            node_values[(k, col)] = sign * v[k] / sqrt_w[k];
        }
    }
    Ok(KlExpansion { corr_len, eigenvalues, nodes, weights, node_values, operator_trace, all_eigenvalues })
}

/// `a(x, y) = ā + σ Σ sqrt(λ_i) φ_i(x) y_i`, validated to stay positive for
/// every `y ∈ [-1, 1]^d`.
#[derive(Debug, Clone)]
pub struct DiffusionField {
    kl: KlExpansion,
    a_bar: f64,
    sigma: f64,
    lower_bound: f64,
}

// Dense grid for the worst-case coefficient bound.
const SUP_GRID: usize = 2000;

impl DiffusionField {
    /// Fails with a configuration error unless
    /// `ā − σ max_x Σ sqrt(λ_i) |φ_i(x)| > 0`, evaluated on a dense grid.
    pub fn new(kl: KlExpansion, a_bar: f64, sigma: f64) -> Result<Self> {
        if !(a_bar > 0.0) || !a_bar.is_finite() {
            return Err(Error::Config(format!("mean diffusion must be positive, got {a_bar}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
        }
        // for fixed x the worst y is y_i = -sign(φ_i(x)), so the infimum of a
        // is ā − σ max_x Σ sqrt(λ_i) |φ_i(x)|
        let scales: Vec<f64> = kl.eigenvalues.iter().map(|l| l.sqrt()).collect();
        let spread = (0..=SUP_GRID)
            .map(|k| k as f64 / SUP_GRID as f64)
            .chain(kl.nodes.iter().copied())
            .map(|x| kl.eigenfunctions_at(x).iter().zip(&scales).map(|(p, s)| s * p.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let lower_bound = a_bar - sigma * spread;
        if !(lower_bound > 0.0) {
            return Err(Error::Config(format!(
                "diffusion coefficient can reach {lower_bound:e} <= 0 (a_bar = {a_bar}, sigma = {sigma}); reduce sigma or the term count"
            )));
        }
        Ok(Self { kl, a_bar, sigma, lower_bound })
    }

    pub fn kl(&self) -> &KlExpansion {
        &self.kl
    }

    pub fn a_bar(&self) -> f64 {
        self.a_bar
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Guaranteed minimum of `a` over `[0, 1] × [-1, 1]^d`.
    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn dim(&self) -> usize {
        self.kl.dim()
    }

    fn eval_unchecked(&self, x: f64, y: &[f64]) -> f64 {
        let phi = self.kl.eigenfunctions_at(x);
        let fluct: f64 = (0..self.dim()).map(|i| self.kl.eigenvalues[i].sqrt() * phi[i] * y[i]).sum();
        self.a_bar + self.sigma * fluct
    }
}

/// Evaluates the diffusion coefficient at `x ∈ [0, 1]`.
pub fn diffusion_eval(field: &DiffusionField, x: f64, y: &[f64]) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::ScalarDomain(format!("x = {x} outside [0, 1]")));
    }
    if y.len() != field.dim() {
        return Err(Error::Dimension(format!("y has length {}, field has {} terms", y.len(), field.dim())));
    }
    if let Some(v) = y.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::ScalarDomain(format!("y entry {v} outside [-1, 1]")));
    }
    Ok(field.eval_unchecked(x, y))
}

/// Uniform mesh of quadratic elements; node `2e + 1` is the midpoint of
/// element `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct FemMesh {
    element_count: usize,
    nodes: Vec<f64>,
}

// 3-point Gauss rule on the reference element [-1, 1].
const GAUSS3_POINTS: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GAUSS3_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

impl FemMesh {
    pub fn new(element_count: usize) -> Result<Self> {
        if element_count == 0 {
            return Err(Error::Config("mesh needs at least one element".into()));
        }
        let m = 2 * element_count;
        let nodes = (0..=m).map(|k| k as f64 / m as f64).collect();
        Ok(Self { element_count, nodes })
    }

    pub fn element_count(&self) -> usize {
        self.element_count
    }

    /// Vertices and midpoints, ascending from 0 to 1.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn h(&self) -> f64 {
        1.0 / self.element_count as f64
    }

    /// Physical Gauss points, three per element in element order.
    pub fn quadrature_points(&self) -> Vec<f64> {
        let h = self.h();
        (0..self.element_count)
            .flat_map(|e| GAUSS3_POINTS.iter().map(move |xi| h * (e as f64 + 0.5 * (xi + 1.0))))
            .collect()
    }
}

/// Nodal values of a FEM solution, boundary zeros included.
#[derive(Debug, Clone)]
pub struct FemSolution {
    pub mesh: FemMesh,
    pub values: Vec<f64>,
}

impl FemSolution {
    /// Value at `x = 0.5`; requires an even element count.
    pub fn midpoint_value(&self) -> Result<f64> {
        midpoint_node(&self.mesh).map(|k| self.values[k])
    }
}

fn midpoint_node(mesh: &FemMesh) -> Result<usize> {
    if !mesh.element_count.is_multiple_of(2) {
        return Err(Error::Config(format!("x = 0.5 is a vertex only for an even element count, got {}", mesh.element_count)));
    }
    Ok(mesh.element_count)
}

/// Galerkin solution of `-(a u')' = 1`, `u(0) = u(1) = 0`, with quadratic
/// Lagrange elements and 3-point Gauss quadrature.
pub fn fem_solve(a_fn: impl Fn(f64) -> f64, element_count: usize) -> Result<FemSolution> {
    let mesh = FemMesh::new(element_count)?;
    let a_q: Vec<f64> = mesh.quadrature_points().into_iter().map(a_fn).collect();
    let values = solve_from_quadrature_values(&mesh, &a_q)?;
    Ok(FemSolution { mesh, values })
}

// Assembles and solves with the coefficient given at the Gauss points.
fn solve_from_quadrature_values(mesh: &FemMesh, a_q: &[f64]) -> Result<Vec<f64>> {
    let ne = mesh.element_count;
    let h = mesh.h();
    let n_all = 2 * ne + 1;
    // band[i][o] holds entry (i, i - o) of the full (boundary-inclusive) matrix
    let mut band = vec![[0.0f64; 3]; n_all];
    let mut rhs = vec![0.0f64; n_all];
    let load = [h / 6.0, 2.0 * h / 3.0, h / 6.0];
    for e in 0..ne {
        let mut k_loc = [[0.0f64; 3]; 3];
        for q in 0..3 {
            let xi = GAUSS3_POINTS[q];
            let dn = [xi - 0.5, -2.0 * xi, xi + 0.5];
            let scale = GAUSS3_WEIGHTS[q] * a_q[3 * e + q] * 2.0 / h;
            for i in 0..3 {
                for j in 0..=i {
                    k_loc[i][j] += scale * dn[i] * dn[j];
                }
            }
        }
        let base = 2 * e;
        for i in 0..3 {
            rhs[base + i] += load[i];
            for j in 0..=i {
                band[base + i][i - j] += k_loc[i][j];
            }
        }
    }

    // interior unknowns 1..n_all-1, half-bandwidth 2
    let m = n_all - 2;
    let mut l = vec![[0.0f64; 3]; m];
    for i in 0..m {
        for o in (0..3).rev() {
            if o > i {
                continue;
            }
            let j = i - o;
            let mut s = band[i + 1][o];
            for k in i.saturating_sub(2)..j {
                s -= l[i][i - k] * l[j][j - k];
            }
            if o == 0 {
                if !(s > 0.0) {
                    return Err(Error::Numerical(format!(
                        "stiffness matrix is not positive definite at unknown {i} (pivot {s:e}); is the diffusion coefficient positive?"
                    )));
                }
                l[i][0] = s.sqrt();
            } else {
                l[i][o] = s / l[j][0];
            }
        }
    }
    let mut x: Vec<f64> = rhs[1..n_all - 1].to_vec();
    for i in 0..m {
        let mut s = x[i];
        for k in i.saturating_sub(2)..i {
            s -= l[i][i - k] * x[k];
        }
        x[i] = s / l[i][0];
    }
    for i in (0..m).rev() {
        let mut s = x[i];
        for k in i + 1..(i + 3).min(m) {
            s -= l[k][k - i] * x[k];
        }
        x[i] = s / l[i][0];
    }
    let mut values = Vec::with_capacity(n_all);
    values.push(0.0);
    values.extend(x);
    values.push(0.0);
    Ok(values)
}

/// Maps `y` to `u(0.5, y)` on a fixed mesh. The scaled eigenfunctions are
/// tabulated at the Gauss points once, so each sample costs one banded solve.
#[derive(Debug, Clone)]
pub struct QoiEvaluator {
    field: DiffusionField,
    mesh: FemMesh,
    /// `modes[(q, i)] = σ sqrt(λ_i) φ_i(x_q)`.
    modes: DMatrix<f64>,
}

impl QoiEvaluator {
    pub fn new(field: DiffusionField, element_count: usize) -> Result<Self> {
        let mesh = FemMesh::new(element_count)?;
        midpoint_node(&mesh)?;
        let points = mesh.quadrature_points();
        let d = field.dim();
        let mut modes = DMatrix::zeros(points.len(), d);
        for (q, &x) in points.iter().enumerate() {
            let phi = field.kl.eigenfunctions_at(x);
            for i in 0..d {
                modes[(q, i)] = field.sigma * field.kl.eigenvalues[i].sqrt() * phi[i];
            }
        }
        Ok(Self { field, mesh, modes })
    }

    pub fn field(&self) -> &DiffusionField {
        &self.field
    }

    pub fn element_count(&self) -> usize {
        self.mesh.element_count
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn qoi(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::Dimension(format!("y has length {}, field has {} terms", y.len(), self.dim())));
        }
        if let Some(v) = y.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::ScalarDomain(format!("y entry {v} outside [-1, 1]")));
        }
        let yv = DVector::from_column_slice(y);
        let a_q: Vec<f64> = (&self.modes * yv).iter().map(|f| self.field.a_bar + f).collect();
        let values = solve_from_quadrature_values(&self.mesh, &a_q)?;
        Ok(values[self.mesh.element_count])
    }

    pub fn metadata(&self, seed: u64) -> DatasetMetadata {
        DatasetMetadata {
            d: self.dim(),
            corr_len: self.field.kl.corr_len,
            a_bar: self.field.a_bar,
            sigma: self.field.sigma,
            element_count: self.mesh.element_count,
            seed,
            generator_version: GENERATOR_VERSION.into(),
        }
    }
}

/// `u(0.5, y)` for a single sample.
pub fn qoi_sample(field: &DiffusionField, element_count: usize, y: &[f64]) -> Result<f64> {
    QoiEvaluator::new(field.clone(), element_count)?.qoi(y)
}

/// `n` i.i.d. uniform samples on `[-1, 1]^d`. Row `i` comes from its own
/// ChaCha stream, so any subset of rows can be regenerated independently.
pub fn uniform_samples(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect()
        })
        .collect();
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

/// Draws `n` samples from `seed` and evaluates the QoI at each (in parallel;
/// the result does not depend on the thread count).
pub fn generate_dataset(evaluator: &QoiEvaluator, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let samples = uniform_samples(n, evaluator.dim(), seed);
    let qoi: Vec<f64> =
        (0..n).into_par_iter().map(|i| evaluator.qoi(samples.row(i).transpose().as_slice())).collect::<Result<_>>()?;
    Dataset::new(samples, DVector::from_vec(qoi), seed, 0.0)
}

/// Parameters of the elliptic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipticParams {
    pub d: usize,
    #[serde(rename = "L")]
    pub corr_len: f64,
    pub a_bar: f64,
    pub sigma: f64,
    pub element_count: usize,
    pub n_quad: usize,
}

impl Default for EllipticParams {
    fn default() -> Self {
        Self { d: 14, corr_len: 0.2, a_bar: 0.1, sigma: 0.03, element_count: 64, n_quad: 200 }
    }
}

impl EllipticParams {
    pub fn evaluator(&self) -> Result<QoiEvaluator> {
        let kl = kl_eigenpairs(self.corr_len, self.d, self.n_quad)?;
        QoiEvaluator::new(DiffusionField::new(kl, self.a_bar, self.sigma)?, self.element_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn benchmark_field() -> DiffusionField {
        DiffusionField::new(kl_eigenpairs(0.2, 14, 200).unwrap(), 0.1, 0.03).unwrap()
    }

    #[test]
    fn kl_trace_and_ordering() {
        let kl = kl_eigenpairs(0.2, 14, 200).unwrap();
        assert!((kl.spectrum().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((kl.operator_trace() - 1.0).abs() < 1e-12);
        assert!(kl.eigenvalues().windows(2).all(|w| w[0] > w[1]));
        assert!(kl.eigenvalues().iter().all(|&l| l > 0.0));
        // truncation energy grows with d and stays below the trace
        let mut energy = 0.0;
        for &l in kl.eigenvalues() {
            energy += l;
            assert!(energy <= kl.operator_trace());
        }
    }

    #[test]
    fn kl_resolution() {
        let a = kl_eigenpairs(0.2, 14, 200).unwrap();
        let b = kl_eigenpairs(0.2, 14, 400).unwrap();
        assert!((a.eigenvalues()[0] - b.eigenvalues()[0]).abs() < 1e-8);
        for i in 0..14 {
            assert!((a.eigenvalues()[i] - b.eigenvalues()[i]).abs() < 1e-8 * a.eigenvalues()[0]);
        }
        // eigenfunctions agree between resolutions at off-node points
        for x in [0.013, 0.37, 0.5, 0.91] {
            let pa = a.eigenfunctions_at(x);
            let pb = b.eigenfunctions_at(x);
            assert!((pa - pb).amax() < 1e-7);
        }
    }

    #[test]
    fn eigenfunctions_are_normalized_and_signed() {
        let kl = kl_eigenpairs(0.2, 14, 200).unwrap();
        let (xs, ws) = gauss_legendre_unit(301).unwrap();
        let mut gram = DMatrix::zeros(14, 14);
        for (&x, &w) in xs.iter().zip(&ws) {
            let phi = kl.eigenfunctions_at(x);
            gram += &phi * phi.transpose() * w;
        }
        assert!((gram - DMatrix::identity(14, 14)).amax() < 1e-8);
        assert!(kl.node_values().row(0).iter().all(|&v| v >= 0.0));
        // the extension reproduces the node values
        let k = 17;
        let phi = kl.eigenfunctions_at(kl.nodes()[k]);
        assert!((phi.transpose() - kl.node_values().row(k)).amax() < 1e-9);
    }

    #[test]
    fn kl_rejects_bad_input() {
        assert!(kl_eigenpairs(0.0, 3, 40).is_err());
        assert!(kl_eigenpairs(0.2, 0, 40).is_err());
        assert!(kl_eigenpairs(0.2, 14, 40).is_err());
    }

    #[test]
    fn diffusion_mean_and_positivity() {
        let field = benchmark_field();
        assert!(field.lower_bound() > 0.0);
        let zero = vec![0.0; 14];
        assert_eq!(diffusion_eval(&field, 0.3, &zero).unwrap(), 0.1);
        let flat = DiffusionField::new(kl_eigenpairs(0.2, 14, 200).unwrap(), 0.1, 0.0).unwrap();
        assert_eq!(diffusion_eval(&flat, 0.7, &[0.9; 14]).unwrap(), 0.1);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(0.0..=1.0);
            let y: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let a = diffusion_eval(&field, x, &y).unwrap();
            assert!(a >= field.lower_bound() && a > 0.0);
        }
        assert!(diffusion_eval(&field, 1.5, &zero).is_err());
        assert!(diffusion_eval(&field, 0.5, &[0.0; 3]).is_err());
    }

    #[test]
    fn positivity_violation_is_a_config_error() {
        let kl = kl_eigenpairs(0.2, 14, 200).unwrap();
        assert!(matches!(DiffusionField::new(kl, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_coefficient_is_exact() {
        for (a, expected) in [(1.0, 0.125), (0.1, 1.25)] {
            for ne in [2, 3, 8, 64] {
                let sol = fem_solve(|_| a, ne).unwrap();
                for (x, u) in sol.mesh.nodes().iter().zip(&sol.values) {
                    assert!((u - x * (1.0 - x) / (2.0 * a)).abs() < 1e-12);
                }
                if ne % 2 == 0 {
                    assert!((sol.midpoint_value().unwrap() - expected).abs() < 1e-12);
                }
            }
        }
    }

    // u(x) = ∫_0^x (C - s) / a(s) ds with C fixing u(1) = 0
    fn exact_midpoint(a: impl Fn(f64) -> f64) -> f64 {
        let (xs, ws) = gauss_legendre_unit(200).unwrap();
        let int = |lo: f64, hi: f64, f: &dyn Fn(f64) -> f64| -> f64 {
            xs.iter().zip(&ws).map(|(&x, &w)| (hi - lo) * w * f(lo + (hi - lo) * x)).sum()
        };
        let c = int(0.0, 1.0, &|s| s / a(s)) / int(0.0, 1.0, &|s| 1.0 / a(s));
        int(0.0, 0.5, &|s| (c - s) / a(s))
    }

    #[test]
    fn smooth_coefficient_converges_at_least_third_order() {
        let a = |x: f64| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).sin() + 0.3 * x * x;
        let exact = exact_midpoint(a);
        let errors: Vec<f64> =
            [8, 16, 32, 64].iter().map(|&ne| (fem_solve(a, ne).unwrap().midpoint_value().unwrap() - exact).abs()).collect();
        for w in errors.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 3.0, "observed order {order} from errors {errors:?}");
        }
    }

    #[test]
    fn non_positive_coefficient_is_rejected() {
        assert!(matches!(fem_solve(|x| x - 0.5, 8), Err(Error::Numerical(_))));
        assert!(fem_solve(|_| 1.0, 0).is_err());
        assert!(fem_solve(|_| 1.0, 3).unwrap().midpoint_value().is_err());
    }

    #[test]
    fn banded_solver_matches_dense_solve() {
        let mesh = FemMesh::new(5).unwrap();
        let a_q: Vec<f64> = mesh.quadrature_points().iter().map(|x| 0.5 + x).collect();
        let banded = solve_from_quadrature_values(&mesh, &a_q).unwrap();
        // dense assembly of the same system
        let n = 11;
        let mut k: DMatrix<f64> = DMatrix::zeros(n, n);
        let mut f: DVector<f64> = DVector::zeros(n);
        let h = mesh.h();
        for e in 0..5 {
            for q in 0..3 {
                let xi = GAUSS3_POINTS[q];
                let dn = [xi - 0.5, -2.0 * xi, xi + 0.5];
                let shape = [0.5 * xi * (xi - 1.0), 1.0 - xi * xi, 0.5 * xi * (xi + 1.0)];
                for i in 0..3 {
                    f[2 * e + i] += GAUSS3_WEIGHTS[q] * shape[i] * h / 2.0;
                    for j in 0..3 {
                        k[(2 * e + i, 2 * e + j)] += GAUSS3_WEIGHTS[q] * a_q[3 * e + q] * dn[i] * dn[j] * 2.0 / h;
                    }
                }
            }
        }
        let inner = k.view((1, 1), (9, 9)).into_owned();
        let sol = inner.lu().solve(&f.rows(1, 9).into_owned()).unwrap();
        for i in 0..9 {
            assert!((sol[i] - banded[i + 1]).abs() < 1e-13);
        }
    }

    #[test]
    fn qoi_properties() {
        let field = benchmark_field();
        let eval = QoiEvaluator::new(field.clone(), 64).unwrap();
        let flat = QoiEvaluator::new(DiffusionField::new(field.kl().clone(), 0.1, 0.0).unwrap(), 64).unwrap();
        assert!((flat.qoi(&[0.4; 14]).unwrap() - 1.25).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let base = eval.qoi(&y).unwrap();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((base - eval.qoi(&neg).unwrap()).abs() > 1e-6);
        let mut bumped = y.clone();
        bumped[3] += 1e-6 * if y[3] > 0.0 { -1.0 } else { 1.0 };
        let diff = (eval.qoi(&bumped).unwrap() - base).abs();
        assert!(diff > 0.0 && diff < 1e-4, "sensitivity {diff}");
        // the direct per-sample path agrees with the tabulated evaluator
        assert!((qoi_sample(&field, 64, &y).unwrap() - base).abs() < 1e-14);
        let direct = fem_solve(|x| diffusion_eval(&field, x, &y).unwrap(), 64).unwrap().midpoint_value().unwrap();
        assert!((direct - base).abs() < 1e-13);
        assert!(QoiEvaluator::new(field, 63).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_uniform() {
        let eval = QoiEvaluator::new(benchmark_field(), 16).unwrap();
        let a = generate_dataset(&eval, 50, 11).unwrap();
        let b = generate_dataset(&eval, 50, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, generate_dataset(&eval, 50, 12).unwrap().samples);
        // rows are independent of how many are drawn
        let c = generate_dataset(&eval, 20, 11).unwrap();
        assert_eq!(c.samples, a.samples.rows(0, 20).into_owned());

        let n = 10_000;
        let samples = uniform_samples(n, 3, 5);
        let critical = 1.628 / (n as f64).sqrt();
        for j in 0..3 {
            let mut col: Vec<f64> = samples.column(j).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let ks = col
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let cdf = (v + 1.0) / 2.0;
                    (cdf - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - cdf).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < critical, "column {j}: KS statistic {ks}");
        }
    }

    #[test]
    fn zero_sigma_gives_constant_qoi() {
        let kl = kl_eigenpairs(0.2, 4, 40).unwrap();
        let eval = QoiEvaluator::new(DiffusionField::new(kl, 0.1, 0.0).unwrap(), 8).unwrap();
        let ds = generate_dataset(&eval, 10, 3).unwrap();
        assert!(ds.qoi.iter().all(|&u| (u - 1.25).abs() < 1e-12));
    }

    #[test]
    fn params_round_trip_and_reject_unknown_keys() {
        let p: EllipticParams = serde_json::from_str(r#"{"L": 0.25, "d": 6}"#).unwrap();
        assert_eq!(p.corr_len, 0.25);
        assert_eq!(p.d, 6);
        assert_eq!(p.a_bar, 0.1);
        assert!(serde_json::from_str::<EllipticParams>(r#"{"l": 0.25}"#).is_err());
    }
}
