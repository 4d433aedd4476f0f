//! The GenMod fitting loop.
//!
//! Coefficient signs are fixed up front from a cross-validated OMP fit. The
//! latent vector `z` is then trained by Adam on the optimization rows, the
//! best Adam iterate is picked on the validation rows, and a weighted Lasso
//! on all rows updates the sparse deviation `ν`. The loop stops as soon as
//! the validation loss goes up.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{loss_and_grad, loss_grad_z, loss_unchecked, weight_matrix, DecayModel, GenModelState, WeightRule, DEFAULT_WEIGHT_EPS};
use crate::pce::MultiIndexBasis;
use crate::regsolvers::{lambda_grid, lasso_cv_stderr, omp_cv, CvOptions, OmpCvOptions};

/// Moment estimates and hyperparameters of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    /// Number of steps taken so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub alpha_lr: f64,
}

impl AdamState {
    /// Zero moments with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    pub fn new(dim: usize, alpha_lr: f64) -> Self {
        Self { m: DVector::zeros(dim), v: DVector::zeros(dim), t: 0, beta1: 0.9, beta2: 0.999, eps_adam: 1e-8, alpha_lr }
    }
}

/// One Adam update. Returns the new point; `state` is advanced in place.
pub fn adam_step(z: &DVector<f64>, grad: &DVector<f64>, state: &mut AdamState) -> Result<DVector<f64>> {
    if grad.len() != z.len() || state.m.len() != z.len() || state.v.len() != z.len() {
        return Err(Error::Dimension(format!(
            "adam step: point {}, gradient {}, moments {}",
            z.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient entry {} at index {i} after {} Adam steps",
            grad[i], state.t
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut next = z.clone();
    for i in 0..z.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grad[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        next[i] -= state.alpha_lr * m_hat / (v_hat.sqrt() + state.eps_adam);
    }
    Ok(next)
}

/// Controls for the inner Adam loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOptions {
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Break once `|ΔL| < delta_tol`, with `ΔL` the relative loss change.
    pub delta_tol: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self { learning_rate: 5e-2, max_iter: 50_000, delta_tol: 1e-6 }
    }
}

/// Runs Adam on `z ↦ ‖Ψ(D_ζ G(z) + ν) − u‖²`, clipping negative decay rates
/// to zero after every step. Returns every iterate, `z_init` first.
pub fn run_adam(
    model: &DecayModel,
    z_init: &DVector<f64>,
    nu: &DVector<f64>,
    zeta: &DVector<f64>,
    psi: &DMatrix<f64>,
    u: &DVector<f64>,
    opts: &AdamOptions,
) -> Result<Vec<DVector<f64>>> {
    let state = GenModelState::new(z_init.clone(), zeta.clone(), nu.clone())?;
    // validates every dimension once; the loop below uses unchecked helpers
    loss_grad_z(&state, model, psi, u)?;
    let (mut current_loss, mut grad) = loss_and_grad(model, z_init, zeta, nu, psi, u);
    if !current_loss.is_finite() {
        return Err(Error::Divergence(format!("initial loss is {current_loss}")));
    }
    let d = model.dim();
    let mut adam = AdamState::new(z_init.len(), opts.learning_rate);
    let mut iterates = vec![z_init.clone()];
    let mut z = z_init.clone();
    for _ in 0..opts.max_iter {
        let mut next = adam_step(&z, &grad, &mut adam)?;
        for g in next.rows_mut(1, d).iter_mut() {
            if *g < 0.0 {
                *g = 0.0;
            }
        }
        let (next_loss, next_grad) = loss_and_grad(model, &next, zeta, nu, psi, u);
        iterates.push(next.clone());
        if current_loss == 0.0 {
            break;
        }
        let delta = (next_loss - current_loss) / current_loss;
        if !delta.is_finite() {
            return Err(Error::Divergence(format!("loss became {next_loss} after {} Adam steps", adam.t)));
        }
        z = next;
        current_loss = next_loss;
        grad = next_grad;
        if delta.abs() < opts.delta_tol {
            break;
        }
    }
    Ok(iterates)
}

/// Sign prediction from a cross-validated OMP fit `c̃`: `sign(c̃_i)` on the
/// support, otherwise the sign of the residual correlation `ψ_iᵀ(u − Ψc̃)`.
/// Zero correlations map to `+1`.
pub fn predict_signs(psi: &DMatrix<f64>, u: &DVector<f64>, opts: &OmpCvOptions) -> Result<DVector<f64>> {
    let fit = omp_cv(psi, u, opts)?.fit;
    let residual = u - psi * &fit.coefficients;
    let corr = psi.tr_mul(&residual);
    Ok(DVector::from_fn(psi.ncols(), |i, _| {
        let c = fit.coefficients[i];
        let s = if c != 0.0 { c } else { corr[i] };
        if s < 0.0 {
            -1.0
        } else {
            1.0
        }
    }))
}

/// `c = D_ζ G(z) + ν` for a fitted state.
pub fn assemble_coefficients(state: &GenModelState, basis: &MultiIndexBasis) -> Result<DVector<f64>> {
    crate::genmodel::coefficients(&DecayModel::new(basis), &state.z, &state.zeta, &state.nu)
}

/// Number of entries whose sign was overridden by the sparse deviation.
pub fn sign_flip_count(state: &GenModelState, model: &DecayModel) -> Result<usize> {
    let g = model.eval(&state.z)?.into_inner();
    Ok((0..g.len())
        .filter(|&i| {
            let zeta = state.zeta[i];
            let c = zeta * g[i] + state.nu[i];
            state.nu[i] != 0.0 && c.signum() != zeta
        })
        .count())
}

/// Settings of [`genmod_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenModConfig {
    pub learning_rate: f64,
    pub max_iter: usize,
    pub max_adam_iter: usize,
    pub delta_tol: f64,
    pub weight_eps: f64,
    pub weight_rule: WeightRule,
    /// Single Adam pass with `ν = 0` (the NoSparse variant).
    pub no_sparse: bool,
    pub folds: usize,
    pub fold_seed: u64,
    pub lasso_grid_count: usize,
    pub lasso_grid_ratio: f64,
    /// KKT tolerance of the Lasso solves relative to `λ_max`.
    pub lasso_relative_tol: f64,
    pub lasso_max_sweeps: usize,
    pub omp_max_atoms: Option<usize>,
}

impl Default for GenModConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-2,
            max_iter: 20,
            max_adam_iter: 50_000,
            delta_tol: 1e-6,
            weight_eps: DEFAULT_WEIGHT_EPS,
            weight_rule: WeightRule::default(),
            no_sparse: false,
            folds: 5,
            fold_seed: 0,
            lasso_grid_count: 100,
            lasso_grid_ratio: 1e-3,
            lasso_relative_tol: 1e-7,
            lasso_max_sweeps: 20_000,
            omp_max_atoms: None,
        }
    }
}

impl GenModConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.max_iter == 0 || self.max_adam_iter == 0 {
            return Err(Error::Config("iteration caps must be positive".into()));
        }
        if !(self.delta_tol >= 0.0) {
            return Err(Error::Config(format!("delta_tol must be non-negative, got {}", self.delta_tol)));
        }
        if !(self.weight_eps > 0.0) {
            return Err(Error::Config(format!("weight_eps must be positive, got {}", self.weight_eps)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.lasso_grid_count == 0 || !(self.lasso_grid_ratio > 0.0 && self.lasso_grid_ratio <= 1.0) {
            return Err(Error::Config("lasso grid needs a positive count and a ratio in (0, 1]".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamOptions {
        AdamOptions { learning_rate: self.learning_rate, max_iter: self.max_adam_iter, delta_tol: self.delta_tol }
    }

    fn cv(&self) -> CvOptions {
        CvOptions {
            folds: self.folds,
            fold_seed: self.fold_seed,
            relative_tol: self.lasso_relative_tol,
            max_sweeps: self.lasso_max_sweeps,
        }
    }

    fn omp(&self) -> OmpCvOptions {
        OmpCvOptions { folds: self.folds, fold_seed: self.fold_seed, max_atoms: self.omp_max_atoms }
    }
}

/// Outcome of [`genmod_fit`].
#[derive(Debug, Clone)]
pub struct GenModFitReport {
    pub state: GenModelState,
    /// Outer iterations executed, including a final rejected one.
    pub outer_iterations: usize,
    /// Validation loss of the initial state and of every accepted iterate.
    pub validation_loss_trace: Vec<f64>,
    pub sign_flip_count: usize,
    /// Penalty picked by the one-standard-error rule in each accepted
    /// iteration; empty in NoSparse mode.
    pub chosen_lambdas: Vec<f64>,
}

/// `(log|mean u|, 1, …, 1)`, falling back to `log RMS(u)` for zero mean.
pub fn initial_latent(u: &DVector<f64>, dim: usize) -> Result<DVector<f64>> {
    let n = u.len() as f64;
    let mean = u.sum() / n;
    let scale = if mean != 0.0 { mean.abs() } else { (u.norm_squared() / n).sqrt() };
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate(
            "observations are identically zero (or non-finite); the constant-term magnitude cannot be initialized".into(),
        ));
    }
    let mut z = DVector::from_element(2 * dim + 1, 1.0);
    z[0] = scale.ln();
    Ok(z)
}

fn check_inputs(p: usize, psi_op: &DMatrix<f64>, u_op: &DVector<f64>, psi_va: &DMatrix<f64>, u_va: &DVector<f64>) -> Result<()> {
    for (name, m, v) in [("optimization", psi_op, u_op), ("validation", psi_va, u_va)] {
        if m.ncols() != p {
            return Err(Error::Dimension(format!("{name} matrix has {} columns, basis has {p}", m.ncols())));
        }
        if m.nrows() != v.len() || v.is_empty() {
            return Err(Error::Dimension(format!("{name} data: {} rows vs {} observations", m.nrows(), v.len())));
        }
    }
    Ok(())
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn vconcat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Fits GenMod on optimization rows `(Ψ_op, u_op)` with validation rows
/// `(Ψ_va, u_va)`.
pub fn genmod_fit(
    basis: &MultiIndexBasis,
    psi_op: &DMatrix<f64>,
    u_op: &DVector<f64>,
    psi_va: &DMatrix<f64>,
    u_va: &DVector<f64>,
    config: &GenModConfig,
) -> Result<GenModFitReport> {
    config.validate()?;
    check_inputs(basis.len(), psi_op, u_op, psi_va, u_va)?;
    let psi = vstack(psi_op, psi_va);
    let u = vconcat(u_op, u_va);
    let zeta = predict_signs(&psi, &u, &config.omp())?;
    genmod_fit_with_signs(basis, psi_op, u_op, psi_va, u_va, zeta, config)
}

/// [`genmod_fit`] with a prescribed sign vector instead of the OMP
/// prediction.
pub fn genmod_fit_with_signs(
    basis: &MultiIndexBasis,
    psi_op: &DMatrix<f64>,
    u_op: &DVector<f64>,
    psi_va: &DMatrix<f64>,
    u_va: &DVector<f64>,
    zeta: DVector<f64>,
    config: &GenModConfig,
) -> Result<GenModFitReport> {
    config.validate()?;
    let p = basis.len();
    check_inputs(p, psi_op, u_op, psi_va, u_va)?;
    if zeta.len() != p {
        return Err(Error::Dimension(format!("sign vector has length {}, basis has {p}", zeta.len())));
    }
    let model = DecayModel::new(basis);
    let psi = vstack(psi_op, psi_va);
    let u = vconcat(u_op, u_va);
    let mut z = initial_latent(&u, basis.dim())?;
    let mut nu = DVector::zeros(p);
    let val_loss = |z: &DVector<f64>, nu: &DVector<f64>| loss_unchecked(&model, z, &zeta, nu, psi_va, u_va);

    let mut trace = vec![val_loss(&z, &nu)];
    let mut lambdas = Vec::new();
    let max_iter = if config.no_sparse { 1 } else { config.max_iter };
    let mut outer = 0;
    for _ in 0..max_iter {
        outer += 1;
        let iterates = run_adam(&model, &z, &nu, &zeta, psi_op, u_op, &config.adam())?;
        let z_k = iterates
            .iter()
            .map(|zi| (val_loss(zi, &nu), zi))
            .filter(|(l, _)| l.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, zi)| zi.clone())
            .ok_or_else(|| Error::Divergence("validation loss is non-finite at every Adam iterate".into()))?;

        let (nu_k, lambda) = if config.no_sparse { (nu.clone(), None) } else { sparse_update(&model, &z_k, &zeta, &psi, &u, config)? };

        let l_k = val_loss(&z_k, &nu_k);
        if !(l_k <= *trace.last().expect("trace starts non-empty")) {
            break;
        }
        // a fixed point repeats itself deterministically
        let stalled = z_k == z && nu_k == nu;
        z = z_k;
        nu = nu_k;
        trace.push(l_k);
        lambdas.extend(lambda);
        if stalled {
            break;
        }
    }

    let state = GenModelState { z, zeta, nu };
    let sign_flip_count = sign_flip_count(&state, &model)?;
    Ok(GenModFitReport { state, outer_iterations: outer, validation_loss_trace: trace, sign_flip_count, chosen_lambdas: lambdas })
}

// Weighted Lasso for ν in the variable x = Wν on the combined rows.
fn sparse_update(
    model: &DecayModel,
    z: &DVector<f64>,
    zeta: &DVector<f64>,
    psi: &DMatrix<f64>,
    u: &DVector<f64>,
    config: &GenModConfig,
) -> Result<(DVector<f64>, Option<f64>)> {
    let p = psi.ncols();
    let signed_g = model.eval(z)?.into_inner().component_mul(zeta);
    let target = u - psi * signed_g;
    let inv_w = weight_matrix(z, model, config.weight_eps, config.weight_rule)?.map(|w| 1.0 / w);
    let mut design = psi.clone();
    for (mut col, s) in design.column_iter_mut().zip(inv_w.iter()) {
        col *= *s;
    }
    if target.iter().all(|&r| r == 0.0) {
        return Ok((DVector::zeros(p), None));
    }
    let grid = match lambda_grid(&design, &target, config.lasso_grid_count, config.lasso_grid_ratio) {
        Ok(g) => g,
        Err(Error::Degenerate(_)) => return Ok((DVector::zeros(p), None)),
        Err(e) => return Err(e),
    };
    let path = lasso_cv_stderr(&design, &target, &grid, &config.cv())?;
    Ok((path.solution.component_mul(&inv_w), Some(path.chosen_lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::coefficients;
    use crate::pce::{assemble_matrix, build_basis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_samples(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..=1.0))
    }

    #[test]
    fn zero_gradient_leaves_point_unchanged() {
        let z = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let mut s = AdamState::new(3, 0.1);
        let next = adam_step(&z, &DVector::zeros(3), &mut s).unwrap();
        assert_eq!(next, z);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let z = DVector::zeros(4);
        for c in [2.5, -0.75] {
            let mut s = AdamState::new(4, 0.01);
            let next = adam_step(&z, &DVector::from_element(4, c), &mut s).unwrap();
            // m̂ = c, v̂ = c², so the step is α c / (|c| + ε)
            let expected = -0.01 * c / (c.abs() + 1e-8);
            assert!(next.iter().all(|&v| (v - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn two_steps_match_straight_line_reimplementation() {
        let z0 = [0.5, -0.2, 1.0];
        let g = [[0.3, -1.2, 4.0], [0.1, 0.7, -2.0]];
        let mut s = AdamState::new(3, 0.05);
        let mut z = DVector::from_row_slice(&z0);
        for gi in &g {
            z = adam_step(&z, &DVector::from_row_slice(gi), &mut s).unwrap();
        }
        for i in 0..3 {
            let (b1, b2, a, e) = (0.9f64, 0.999f64, 0.05, 1e-8);
            let m1 = (1.0 - b1) * g[0][i];
            let v1 = (1.0 - b2) * g[0][i] * g[0][i];
            let z1 = z0[i] - a * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + e);
            let m2 = b1 * m1 + (1.0 - b1) * g[1][i];
            let v2 = b2 * v1 + (1.0 - b2) * g[1][i] * g[1][i];
            let z2 = z1 - a * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + e);
            assert!((z[i] - z2).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut s = AdamState::new(2, 0.1);
        let err = adam_step(&DVector::zeros(2), &DVector::from_vec(vec![1.0, f64::NAN]), &mut s).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    fn planted_latent(d: usize) -> DVector<f64> {
        let mut z = DVector::zeros(2 * d + 1);
        z[0] = 0.4;
        for j in 0..d {
            z[1 + j] = 1.0 + 0.3 * j as f64;
            z[1 + d + j] = 0.5 - 0.2 * j as f64;
        }
        z
    }

    #[test]
    fn adam_fits_planted_latent_vector() {
        let basis = build_basis(2, 3).unwrap();
        let model = DecayModel::new(&basis);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi = assemble_matrix(&basis, &uniform_samples(&mut rng, 5000, 2)).unwrap().into_matrix();
        let zeta = DVector::from_element(basis.len(), 1.0);
        let nu = DVector::zeros(basis.len());
        let u = &psi * model.eval(&planted_latent(2)).unwrap().into_inner();
        let z_init = initial_latent(&u, 2).unwrap();
        let iterates = run_adam(&model, &z_init, &nu, &zeta, &psi, &u, &AdamOptions::default()).unwrap();
        assert_eq!(iterates[0], z_init);
        let last = iterates.last().unwrap();
        let l = loss_unchecked(&model, last, &zeta, &nu, &psi, &u);
        assert!(l < 1e-6 * u.norm_squared(), "loss ratio {}", l / u.norm_squared());
        for z in &iterates {
            assert!(z.rows(1, 2).iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn clipping_keeps_decay_rates_non_negative() {
        // growing coefficients pull the decay rates negative
        let basis = build_basis(2, 2).unwrap();
        let model = DecayModel::new(&basis);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = assemble_matrix(&basis, &uniform_samples(&mut rng, 40, 2)).unwrap().into_matrix();
        let c = DVector::from_fn(basis.len(), |i, _| 1.0 + basis.get(i).total_degree() as f64);
        let u = &psi * c;
        let zeta = DVector::from_element(basis.len(), 1.0);
        let z_init = DVector::from_vec(vec![0.0, 0.1, 0.1, 0.0, 0.0]);
        let opts = AdamOptions { max_iter: 500, ..AdamOptions::default() };
        let iterates = run_adam(&model, &z_init, &DVector::zeros(basis.len()), &zeta, &psi, &u, &opts).unwrap();
        assert!(iterates.len() > 2);
        assert!(iterates.iter().any(|z| z[1] == 0.0));
        for z in &iterates {
            assert!(z[1] >= 0.0 && z[2] >= 0.0);
        }
    }

    #[test]
    fn zero_loss_start_stops_immediately() {
        let basis = build_basis(2, 2).unwrap();
        let model = DecayModel::new(&basis);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = assemble_matrix(&basis, &uniform_samples(&mut rng, 20, 2)).unwrap().into_matrix();
        let z = planted_latent(2);
        let zeta = DVector::from_element(basis.len(), 1.0);
        let nu = DVector::zeros(basis.len());
        let u = &psi * model.eval(&z).unwrap().into_inner();
        let iterates = run_adam(&model, &z, &nu, &zeta, &psi, &u, &AdamOptions::default()).unwrap();
        assert_eq!(iterates.len(), 2);
    }

    #[test]
    fn signs_of_positive_dense_truth() {
        let basis = build_basis(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = assemble_matrix(&basis, &uniform_samples(&mut rng, 50, 2)).unwrap().into_matrix();
        let c = DVector::from_fn(basis.len(), |i, _| 1.0 / (1.0 + i as f64));
        let zeta = predict_signs(&psi, &(&psi * c), &OmpCvOptions::default()).unwrap();
        assert!(zeta.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn single_negative_atom() {
        let mut psi = DMatrix::zeros(10, 5);
        for j in 0..5 {
            psi[(j, j)] = 1.0;
            psi[(j + 5, j)] = 1.0;
        }
        let u = psi.column(3) * -1.0;
        let opts = OmpCvOptions { folds: 2, ..OmpCvOptions::default() };
        let zeta = predict_signs(&psi, &u, &opts).unwrap();
        assert_eq!(zeta[3], -1.0);
        // the remaining columns are orthogonal to every residual: tie goes to +1
        assert!((0..5).filter(|&j| j != 3).all(|j| zeta[j] == 1.0));
        assert_eq!(zeta, predict_signs(&psi, &u, &opts).unwrap());
    }

    #[test]
    fn assembly_and_sign_flips() {
        let basis = build_basis(3, 2).unwrap();
        let model = DecayModel::new(&basis);
        let z = planted_latent(3);
        let g = model.eval(&z).unwrap().into_inner();
        let ones = DVector::from_element(basis.len(), 1.0);
        let zero = DVector::zeros(basis.len());
        let state = GenModelState::new(z.clone(), ones.clone(), zero.clone()).unwrap();
        assert_eq!(assemble_coefficients(&state, &basis).unwrap(), g);
        assert_eq!(sign_flip_count(&state, &model).unwrap(), 0);

        let mut nu = zero.clone();
        nu[4] = -2.0 * g[4];
        nu[6] = 0.1 * g[6];
        let state = GenModelState::new(z.clone(), ones, nu).unwrap();
        let c = assemble_coefficients(&state, &basis).unwrap();
        assert!((c[4] + g[4]).abs() < 1e-15);
        assert_eq!(sign_flip_count(&state, &model).unwrap(), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zeta = DVector::from_fn(basis.len(), |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        let nu = DVector::from_fn(basis.len(), |_, _| rng.gen_range(-0.1..0.1));
        let state = GenModelState::new(z.clone(), zeta.clone(), nu.clone()).unwrap();
        let c = assemble_coefficients(&state, &basis).unwrap();
        for i in 0..basis.len() {
            assert_eq!(c[i], zeta[i] * g[i] + nu[i]);
        }
    }

    #[test]
    fn initial_latent_rules() {
        let z = initial_latent(&DVector::from_vec(vec![2.0, 4.0]), 2).unwrap();
        assert_eq!(z.as_slice(), &[3.0f64.ln(), 1.0, 1.0, 1.0, 1.0]);
        let z = initial_latent(&DVector::from_vec(vec![-3.0, 3.0]), 1).unwrap();
        assert!((z[0] - 3.0f64.ln()).abs() < 1e-15);
        assert!(matches!(initial_latent(&DVector::zeros(3), 1), Err(Error::Degenerate(_))));
    }

    // c* = D_ζ* G(z*) + ν* with random signs and five spikes of size
    // comparable to the local magnitude, split 48/12
    fn planted_problem(seed: u64) -> (MultiIndexBasis, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let basis = build_basis(5, 3).unwrap();
        let model = DecayModel::new(&basis);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = DVector::zeros(11);
        for j in 0..5 {
            z[1 + j] = 2.5 + 0.25 * j as f64;
        }
        let g = model.eval(&z).unwrap().into_inner();
        let zeta = DVector::from_fn(basis.len(), |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        let mut nu = DVector::zeros(basis.len());
        for _ in 0..5 {
            let i = rng.gen_range(1..basis.len());
            nu[i] = rng.gen_range(0.5..1.5) * g[i] * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        let c = coefficients(&model, &z, &zeta, &nu).unwrap();
        let psi = assemble_matrix(&basis, &uniform_samples(&mut rng, 60, 5)).unwrap().into_matrix();
        let u = &psi * &c;
        (basis, psi, u, c)
    }

    #[test]
    fn planted_model_recovery() {
        let (basis, psi, u, c) = planted_problem(17);
        let report = genmod_fit(
            &basis,
            &psi.rows(0, 48).into_owned(),
            &u.rows(0, 48).into_owned(),
            &psi.rows(48, 12).into_owned(),
            &u.rows(48, 12).into_owned(),
            &GenModConfig::default(),
        )
        .unwrap();
        let c_hat = assemble_coefficients(&report.state, &basis).unwrap();
        let rel = (&c_hat - &c).norm() / c.norm();
        assert!(rel < 1e-2, "relative error {rel}");
        assert!(report.validation_loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.state.decay_rates().iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn no_sparse_mode_keeps_zero_deviation() {
        let (basis, psi, u, _) = planted_problem(3);
        let config = GenModConfig { no_sparse: true, ..GenModConfig::default() };
        let report = genmod_fit(
            &basis,
            &psi.rows(0, 48).into_owned(),
            &u.rows(0, 48).into_owned(),
            &psi.rows(48, 12).into_owned(),
            &u.rows(48, 12).into_owned(),
            &config,
        )
        .unwrap();
        assert!(report.state.nu.iter().all(|&v| v == 0.0));
        assert_eq!(report.outer_iterations, 1);
        assert!(report.chosen_lambdas.is_empty());
        assert_eq!(report.sign_flip_count, 0);
    }

    #[test]
    fn zero_residual_target_gives_zero_deviation() {
        let basis = build_basis(2, 2).unwrap();
        let model = DecayModel::new(&basis);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let psi = assemble_matrix(&basis, &uniform_samples(&mut rng, 20, 2)).unwrap().into_matrix();
        let z = planted_latent(2);
        let zeta = DVector::from_element(basis.len(), 1.0);
        let u = &psi * model.eval(&z).unwrap().into_inner();
        let (nu, lambda) = sparse_update(&model, &z, &zeta, &psi, &u, &GenModConfig::default()).unwrap();
        assert!(nu.iter().all(|&v| v == 0.0));
        assert!(lambda.is_none());
    }

    #[test]
    fn fit_is_deterministic() {
        let (basis, psi, u, _) = planted_problem(5);
        let run = || {
            genmod_fit(
                &basis,
                &psi.rows(0, 48).into_owned(),
                &u.rows(0, 48).into_owned(),
                &psi.rows(48, 12).into_owned(),
                &u.rows(48, 12).into_owned(),
                &GenModConfig { max_iter: 3, ..GenModConfig::default() },
            )
            .unwrap()
        };
        assert_eq!(run().state, run().state);
    }

    #[test]
    fn config_validation() {
        assert!(GenModConfig::default().validate().is_ok());
        assert!(GenModConfig { learning_rate: 0.0, ..GenModConfig::default() }.validate().is_err());
        assert!(GenModConfig { folds: 1, ..GenModConfig::default() }.validate().is_err());
        let parsed: GenModConfig = serde_json::from_str(r#"{"learning_rate": 0.05, "weight_rule": "absolute"}"#).unwrap();
        assert_eq!(parsed.learning_rate, 0.05);
        assert_eq!(parsed.weight_rule, WeightRule::Absolute);
        assert!(serde_json::from_str::<GenModConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
