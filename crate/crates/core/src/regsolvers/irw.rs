//! Iteratively reweighted Lasso with `W_ii = 1 / (|c_i| + τ)` and
//! escalation of `τ` when the iteration stalls.

use nalgebra::{DMatrix, DVector};

use super::cv::{lasso_cv_stderr, CvOptions};
use super::lasso::lambda_grid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrwOptions {
    pub tau0: f64,
    pub tau_max: f64,
    /// Reweighting iterations allowed per value of `τ`.
    pub max_iter: usize,
    /// Convergence threshold on `‖c^{(k)} − c^{(k−1)}‖₂`.
    pub conv_tol: f64,
    pub grid_count: usize,
    pub grid_ratio: f64,
    pub cv: CvOptions,
}

impl Default for IrwOptions {
    fn default() -> Self {
        Self {
            tau0: 1e-4,
            tau_max: 1e-1,
            max_iter: 10,
            conv_tol: 1e-6,
            grid_count: 100,
            grid_ratio: 1e-3,
            cv: CvOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IrwResult {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    /// Total reweighted solves across all values of `τ`.
    pub iterations: usize,
    /// `τ` in effect when the loop ended.
    pub tau: f64,
}

/// Cross-validated Lasso on `Ψ` with an automatically generated grid. A zero
/// target short-circuits to the zero vector.
pub(crate) fn cv_lasso_auto(psi: &DMatrix<f64>, u: &DVector<f64>, count: usize, ratio: f64, cv: &CvOptions) -> Result<DVector<f64>> {
    if u.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(psi.ncols()));
    }
    let grid = match lambda_grid(psi, u, count, ratio) {
        Ok(g) => g,
        // Φᵀu = 0: nothing in the column space, the zero vector is optimal
        Err(Error::Degenerate(_)) => return Ok(DVector::zeros(psi.ncols())),
        Err(e) => return Err(e),
    };
    Ok(lasso_cv_stderr(psi, u, &grid, cv)?.solution)
}

/// One reweighting step: solve the CV Lasso on `Ψ W^{-1}` with
/// `W^{-1} = diag(|c_prev| + τ)` and map back, `c = W^{-1} x`.
pub fn reweighted_step(psi: &DMatrix<f64>, u: &DVector<f64>, c_prev: &DVector<f64>, tau: f64, opts: &IrwOptions) -> Result<DVector<f64>> {
    let scale = c_prev.map(|c| c.abs() + tau);
    let mut design = psi.clone();
    for (mut col, s) in design.column_iter_mut().zip(scale.iter()) {
        col *= *s;
    }
    let x = cv_lasso_auto(&design, u, opts.grid_count, opts.grid_ratio, &opts.cv)?;
    Ok(x.component_mul(&scale))
}

/// IRW-Lasso. Starts from the unweighted CV Lasso solution, reweights until
/// successive iterates agree to `conv_tol`, and multiplies `τ` by ten (keeping
/// the current iterate) whenever `max_iter` iterations pass without
/// convergence. Past `tau_max` the last iterate is returned unconverged.
pub fn irw_lasso(psi: &DMatrix<f64>, u: &DVector<f64>, opts: &IrwOptions) -> Result<IrwResult> {
    if psi.nrows() != u.len() {
        return Err(Error::Dimension(format!("{} rows vs {} observations", psi.nrows(), u.len())));
    }
    if !(opts.tau0 > 0.0) || opts.tau_max < opts.tau0 {
        return Err(Error::Config(format!("need 0 < tau0 <= tau_max, got {} and {}", opts.tau0, opts.tau_max)));
    }
    if opts.max_iter == 0 {
        return Err(Error::Config("max_iter must be positive".into()));
    }
    if u.iter().all(|&v| v == 0.0) {
        return Ok(IrwResult { coefficients: DVector::zeros(psi.ncols()), converged: true, iterations: 1, tau: opts.tau0 });
    }

    let mut tau = opts.tau0;
    let mut current = cv_lasso_auto(psi, u, opts.grid_count, opts.grid_ratio, &opts.cv)?;
    let mut iterations = 0;
    let mut since_escalation = 0;
    loop {
        let next = reweighted_step(psi, u, &current, tau, opts)?;
        iterations += 1;
        since_escalation += 1;
        let change = (&next - &current).norm();
        current = next;
        if change < opts.conv_tol {
            return Ok(IrwResult { coefficients: current, converged: true, iterations, tau });
        }
        if since_escalation >= opts.max_iter {
            since_escalation = 0;
            tau *= 10.0;
            if tau > opts.tau_max * (1.0 + 1e-12) {
                return Ok(IrwResult { coefficients: current, converged: false, iterations, tau });
            }
        }
    }
}
