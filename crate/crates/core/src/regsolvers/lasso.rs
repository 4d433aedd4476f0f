//! Cyclic coordinate descent for the Lasso.
//!
//! Objective convention: `(1/(2N)) ‖Φw − u‖² + λ Σ_j ω_j |w_j|` with unit
//! penalty factors `ω` unless a weighted problem is requested. With this
//! scaling `λ_max = ‖Φᵀu‖_∞ / N` is the smallest penalty with a zero solution.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Stopping controls for coordinate descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Absolute tolerance on the KKT residual.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 100_000 }
    }
}

/// Solution plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub coefficients: DVector<f64>,
    pub sweeps: usize,
    pub kkt_violation: f64,
    pub converged: bool,
    /// Objective value after each sweep.
    pub objective_trace: Vec<f64>,
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `‖Φᵀu‖_∞ / N`.
pub fn lambda_max(phi: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    phi.tr_mul(u).amax() / phi.nrows() as f64
}

/// Geometric grid of `count` values from `λ_max` down to `ratio · λ_max`.
pub fn lambda_grid(phi: &DMatrix<f64>, u: &DVector<f64>, count: usize, ratio: f64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Config("lambda grid needs at least one value".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("lambda grid ratio must lie in (0, 1], got {ratio}")));
    }
    if phi.nrows() != u.len() {
        return Err(Error::Dimension(format!("{} rows vs {} observations", phi.nrows(), u.len())));
    }
    let top = lambda_max(phi, u);
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::Degenerate("lambda grid needs Φᵀu ≠ 0 (is u identically zero?)".into()));
    }
    if count == 1 {
        return Ok(vec![top]);
    }
    let step = ratio.ln() / (count - 1) as f64;
    Ok((0..count).map(|i| top * (step * i as f64).exp()).collect())
}

/// Lasso objective at `w`.
pub fn lasso_objective(phi: &DMatrix<f64>, u: &DVector<f64>, w: &DVector<f64>, lambda: f64) -> f64 {
    let n = phi.nrows() as f64;
    (phi * w - u).norm_squared() / (2.0 * n) + lambda * w.lp_norm(1)
}

/// Largest KKT violation of `w` for the (optionally weighted) problem.
pub fn kkt_violation(phi: &DMatrix<f64>, u: &DVector<f64>, w: &DVector<f64>, lambda: f64, penalty: Option<&DVector<f64>>) -> f64 {
    let n = phi.nrows() as f64;
    let grad = phi.tr_mul(&(u - phi * w)) / n;
    kkt_from_gradient(&grad, w, lambda, penalty)
}

fn kkt_from_gradient(grad: &DVector<f64>, w: &DVector<f64>, lambda: f64, penalty: Option<&DVector<f64>>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..w.len() {
        let t = lambda * penalty.map_or(1.0, |p| p[j]);
        let v = if w[j] == 0.0 {
            (grad[j].abs() - t).max(0.0)
        } else {
            (grad[j] - t * w[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Coordinate-descent solver bound to one design matrix. Column norms are
/// computed once so a sequence of penalties can be solved with warm starts.
pub(crate) struct CoordinateDescent<'a> {
    phi: &'a DMatrix<f64>,
    u: &'a DVector<f64>,
    col_sq: Vec<f64>,
    max_col: f64,
}

impl<'a> CoordinateDescent<'a> {
    pub(crate) fn new(phi: &'a DMatrix<f64>, u: &'a DVector<f64>) -> Result<Self> {
        if phi.nrows() != u.len() {
            return Err(Error::Dimension(format!("{} rows vs {} observations", phi.nrows(), u.len())));
        }
        if phi.nrows() == 0 {
            return Err(Error::Dimension("empty design matrix".into()));
        }
        let n = phi.nrows() as f64;
        let col_sq: Vec<f64> = phi.column_iter().map(|c| c.norm_squared() / n).collect();
        let max_col = col_sq.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
        Ok(Self { phi, u, col_sq, max_col })
    }

    fn objective(&self, residual: &DVector<f64>, w: &DVector<f64>, lambda: f64, penalty: Option<&DVector<f64>>) -> f64 {
        let n = self.phi.nrows() as f64;
        let l1: f64 = match penalty {
            Some(p) => w.iter().zip(p.iter()).map(|(a, b)| a.abs() * b).sum(),
            None => w.lp_norm(1),
        };
        residual.norm_squared() / (2.0 * n) + lambda * l1
    }

    // One pass over `coords`; returns the largest gradient-scale change.
    fn sweep(
        &self,
        coords: impl Iterator<Item = usize>,
        w: &mut DVector<f64>,
        residual: &mut DVector<f64>,
        lambda: f64,
        penalty: Option<&DVector<f64>>,
    ) -> f64 {
        let n = self.phi.nrows() as f64;
        let mut max_change = 0.0f64;
        for j in coords {
            let a = self.col_sq[j];
            if a == 0.0 {
                w[j] = 0.0;
                continue;
            }
            let col = self.phi.column(j);
            let old = w[j];
            let rho = col.dot(residual) / n + a * old;
            let t = lambda * penalty.map_or(1.0, |p| p[j]);
            let new = soft_threshold(rho, t) / a;
            let delta = new - old;
            if delta != 0.0 {
                residual.axpy(-delta, &col, 1.0);
                w[j] = new;
                max_change = max_change.max(delta.abs() * a.sqrt() * self.max_col);
            }
        }
        max_change
    }

    pub(crate) fn solve(
        &self,
        lambda: f64,
        warm: Option<&DVector<f64>>,
        penalty: Option<&DVector<f64>>,
        opts: &LassoOptions,
    ) -> LassoFit {
        let p = self.phi.ncols();
        let n = self.phi.nrows() as f64;
        let mut w = warm.cloned().unwrap_or_else(|| DVector::zeros(p));
        let mut residual = self.u - self.phi * &w;
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let inner_tol = 0.1 * opts.tol;
        loop {
            self.sweep(0..p, &mut w, &mut residual, lambda, penalty);
            sweeps += 1;
            trace.push(self.objective(&residual, &w, lambda, penalty));

            while sweeps < opts.max_sweeps {
                let active: Vec<usize> = (0..p).filter(|&j| w[j] != 0.0).collect();
                let change = self.sweep(active.into_iter(), &mut w, &mut residual, lambda, penalty);
                sweeps += 1;
                trace.push(self.objective(&residual, &w, lambda, penalty));
                if change < inner_tol {
                    break;
                }
            }

            // residual drifts under many axpy updates; refresh before certifying
            residual = self.u - self.phi * &w;
            let grad = self.phi.tr_mul(&residual) / n;
            let kkt = kkt_from_gradient(&grad, &w, lambda, penalty);
            if kkt <= opts.tol || sweeps >= opts.max_sweeps {
                return LassoFit {
                    coefficients: w,
                    sweeps,
                    kkt_violation: kkt,
                    converged: kkt <= opts.tol,
                    objective_trace: trace,
                };
            }
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

/// Full-control entry point: optional warm start and per-coordinate penalty
/// factors. Never fails on slow convergence; inspect [`LassoFit::converged`].
pub fn lasso_fit(
    phi: &DMatrix<f64>,
    u: &DVector<f64>,
    lambda: f64,
    opts: &LassoOptions,
    warm: Option<&DVector<f64>>,
    penalty: Option<&DVector<f64>>,
) -> Result<LassoFit> {
    check_lambda(lambda)?;
    if let Some(w) = warm {
        if w.len() != phi.ncols() {
            return Err(Error::Dimension(format!("warm start length {} vs {} columns", w.len(), phi.ncols())));
        }
    }
    if let Some(pen) = penalty {
        if pen.len() != phi.ncols() {
            return Err(Error::Dimension(format!("penalty length {} vs {} columns", pen.len(), phi.ncols())));
        }
        if pen.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("penalty factors must be non-negative".into()));
        }
    }
    Ok(CoordinateDescent::new(phi, u)?.solve(lambda, warm, penalty, opts))
}

/// Lasso solution certified by the KKT conditions to within `tol`.
pub fn lasso(phi: &DMatrix<f64>, u: &DVector<f64>, lambda: f64, tol: f64, max_sweeps: usize) -> Result<DVector<f64>> {
    let fit = lasso_fit(phi, u, lambda, &LassoOptions { tol, max_sweeps }, None, None)?;
    if !fit.converged {
        return Err(Error::NonConvergence { iterations: fit.sweeps, residual: fit.kkt_violation });
    }
    Ok(fit.coefficients)
}

/// Weighted Lasso `(1/(2N))‖Φw − u‖² + λ Σ ω_j |w_j|`.
pub fn weighted_lasso(
    phi: &DMatrix<f64>,
    u: &DVector<f64>,
    weights: &DVector<f64>,
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<DVector<f64>> {
    let fit = lasso_fit(phi, u, lambda, &LassoOptions { tol, max_sweeps }, None, Some(weights))?;
    if !fit.converged {
        return Err(Error::NonConvergence { iterations: fit.sweeps, residual: fit.kkt_violation });
    }
    Ok(fit.coefficients)
}
