//! k-fold cross-validation for the Lasso with the one-standard-error rule.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lasso::{lambda_max, CoordinateDescent, LassoOptions};
use crate::error::{Error, Result};

/// Shuffled partition of `0..n` into `k` folds whose sizes differ by at most
/// one. Deterministic in `seed`.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("{n} samples cannot fill {k} non-empty folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

/// Complement of `fold` in `0..n`.
pub(crate) fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in fold {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    m.select_rows(rows.iter())
}

pub(crate) fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

/// Cross-validation settings shared by the Lasso and OMP selectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub fold_seed: u64,
    /// KKT tolerance as a fraction of the all-data `λ_max`.
    pub relative_tol: f64,
    pub max_sweeps: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { folds: 5, fold_seed: 0, relative_tol: 1e-7, max_sweeps: 20_000 }
    }
}

/// Outcome of [`lasso_cv_stderr`].
#[derive(Debug, Clone)]
pub struct LassoPathResult {
    pub lambda_grid: Vec<f64>,
    /// `fold_errors[ℓ][j]`: squared hold-out error of fold `j` at `λ_ℓ`.
    pub fold_errors: Vec<Vec<f64>>,
    pub cv_mean_error: Vec<f64>,
    /// Population std of the fold errors divided by `sqrt(N)`.
    pub cv_stderr: Vec<f64>,
    /// Error-minimizing penalty `λ_L`.
    pub min_error_lambda: f64,
    pub chosen_lambda: f64,
    pub chosen_index: usize,
    pub solution: DVector<f64>,
    /// False if any coordinate-descent solve hit its sweep cap.
    pub all_converged: bool,
}

fn population_std(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt()
}

/// Penalty selection by k-fold CV and the one-standard-error rule, followed
/// by a fit on all data at the chosen penalty.
///
/// The chosen penalty is the largest `λ_ℓ` with `e_ℓ < e_L + s_L` where
/// `e_L` is the smallest mean fold error and `s_L = std(e_{L,·}) / sqrt(N)`.
pub fn lasso_cv_stderr(phi: &DMatrix<f64>, u: &DVector<f64>, grid: &[f64], opts: &CvOptions) -> Result<LassoPathResult> {
    let n = phi.nrows();
    if u.len() != n {
        return Err(Error::Dimension(format!("{n} rows vs {} observations", u.len())));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if grid.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::Config("lambda grid entries must be non-negative".into()));
    }
    let folds = fold_partition(n, opts.folds, opts.fold_seed)?;
    let tol = opts.relative_tol * lambda_max(phi, u).max(f64::MIN_POSITIVE);
    let lasso_opts = LassoOptions { tol, max_sweeps: opts.max_sweeps };

    // descending order for warm starts, results mapped back to grid order
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let mut fold_errors = vec![vec![0.0; folds.len()]; grid.len()];
    let mut all_converged = true;
    for (j, fold) in folds.iter().enumerate() {
        let train = complement(n, fold);
        let phi_tr = select_rows(phi, &train);
        let u_tr = select_entries(u, &train);
        let phi_te = select_rows(phi, fold);
        let u_te = select_entries(u, fold);
        let solver = CoordinateDescent::new(&phi_tr, &u_tr)?;
        let mut warm: Option<DVector<f64>> = None;
        for &l in &order {
            let fit = solver.solve(grid[l], warm.as_ref(), None, &lasso_opts);
            all_converged &= fit.converged;
            fold_errors[l][j] = (&phi_te * &fit.coefficients - &u_te).norm_squared();
            warm = Some(fit.coefficients);
        }
    }

    let k = folds.len() as f64;
    let cv_mean_error: Vec<f64> = fold_errors.iter().map(|e| e.iter().sum::<f64>() / k).collect();
    let sqrt_n = (n as f64).sqrt();
    let cv_stderr: Vec<f64> = fold_errors.iter().map(|e| population_std(e) / sqrt_n).collect();

    let best = (0..grid.len())
        .min_by(|&a, &b| cv_mean_error[a].total_cmp(&cv_mean_error[b]))
        .expect("non-empty grid");
    let threshold = cv_mean_error[best] + cv_stderr[best];
    let chosen_index = (0..grid.len())
        .filter(|&l| l == best || cv_mean_error[l] < threshold)
        .max_by(|&a, &b| grid[a].total_cmp(&grid[b]))
        .expect("best index qualifies");
    let chosen_lambda = grid[chosen_index];

    // all-data fit, warm-started down the grid to the chosen penalty
    let solver = CoordinateDescent::new(phi, u)?;
    let mut warm: Option<DVector<f64>> = None;
    for &l in order.iter().filter(|&&l| grid[l] >= chosen_lambda) {
        let fit = solver.solve(grid[l], warm.as_ref(), None, &lasso_opts);
        if l == chosen_index {
            all_converged &= fit.converged;
        }
        warm = Some(fit.coefficients);
    }
    let solution = warm.expect("chosen penalty is on the grid");

    Ok(LassoPathResult {
        lambda_grid: grid.to_vec(),
        fold_errors,
        cv_mean_error,
        cv_stderr,
        min_error_lambda: grid[best],
        chosen_lambda,
        chosen_index,
        solution,
        all_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regsolvers::lasso::{kkt_violation, lambda_grid, lasso};
    use rand::Rng;

    #[test]
    fn partition_is_balanced_and_deterministic() {
        let folds = fold_partition(23, 5, 7).unwrap();
        let sizes: Vec<_> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        let mut all: Vec<_> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(folds, fold_partition(23, 5, 7).unwrap());
        assert_ne!(folds, fold_partition(23, 5, 8).unwrap());
        assert!(fold_partition(4, 5, 0).is_err());
        assert!(fold_partition(4, 1, 0).is_err());
    }

    #[test]
    fn dense_noiseless_truth_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, p) = (80, 6);
        let phi = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
        let w_true = DVector::from_vec(vec![1.0, -0.7, 0.4, 0.25, -0.1, 0.05]);
        let u = &phi * &w_true;
        let grid = lambda_grid(&phi, &u, 100, 1e-3).unwrap();
        let opts = CvOptions { fold_seed: 3, relative_tol: 1e-10, max_sweeps: 200_000, ..CvOptions::default() };
        let res = lasso_cv_stderr(&phi, &u, &grid, &opts).unwrap();
        assert!(res.chosen_index >= 90, "chose index {}", res.chosen_index);
        let rel = (&res.solution - &w_true).norm() / w_true.norm();
        // the smallest grid penalty still leaves a shrinkage bias of order 1e-3
        assert!(rel < 1e-2, "relative error {rel}");
        assert!(res.chosen_lambda >= res.min_error_lambda);
    }

    #[test]
    fn chosen_lambda_never_below_minimizer() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = DMatrix::from_fn(25, 40, |_, _| rng.gen_range(-1.0..1.0));
            let u = DVector::from_fn(25, |_, _| rng.gen_range(-1.0..1.0));
            let grid = lambda_grid(&phi, &u, 30, 1e-2).unwrap();
            let res = lasso_cv_stderr(&phi, &u, &grid, &CvOptions { fold_seed: seed, ..CvOptions::default() }).unwrap();
            assert!(res.chosen_lambda >= res.min_error_lambda);
            let tol = 1e-6 * grid[0];
            assert!(kkt_violation(&phi, &u, &res.solution, res.chosen_lambda, None) <= tol);
        }
    }

    // Straight-line reimplementation: no warm starts, explicit loops.
    fn brute_force(phi: &DMatrix<f64>, u: &DVector<f64>, grid: &[f64], folds: &[Vec<usize>]) -> (f64, DVector<f64>) {
        let n = phi.nrows();
        let mut mean = Vec::new();
        let mut per_fold = Vec::new();
        for &lambda in grid {
            let mut errs = Vec::new();
            for fold in folds {
                let train: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
                let a = DMatrix::from_fn(train.len(), phi.ncols(), |r, c| phi[(train[r], c)]);
                let b = DVector::from_fn(train.len(), |r, _| u[train[r]]);
                let x = lasso(&a, &b, lambda, 1e-13, 1_000_000).unwrap();
                let mut e = 0.0;
                for &i in fold {
                    let pred: f64 = (0..phi.ncols()).map(|c| phi[(i, c)] * x[c]).sum();
                    e += (pred - u[i]).powi(2);
                }
                errs.push(e);
            }
            mean.push(errs.iter().sum::<f64>() / errs.len() as f64);
            per_fold.push(errs);
        }
        let mut best = 0;
        for l in 1..grid.len() {
            if mean[l] < mean[best] {
                best = l;
            }
        }
        let m = per_fold[best].iter().sum::<f64>() / per_fold[best].len() as f64;
        let var = per_fold[best].iter().map(|e| (e - m) * (e - m)).sum::<f64>() / per_fold[best].len() as f64;
        let s = var.sqrt() / (n as f64).sqrt();
        let mut chosen = grid[best];
        for l in 0..grid.len() {
            if mean[l] < mean[best] + s && grid[l] > chosen {
                chosen = grid[l];
            }
        }
        (chosen, lasso(phi, u, chosen, 1e-13, 1_000_000).unwrap())
    }

    #[test]
    fn tiny_instance_matches_brute_force() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let phi = DMatrix::from_fn(10, 3, |_, _| rng.gen_range(-1.0..1.0));
            let u = &phi * DVector::from_vec(vec![0.8, 0.0, -0.3]) + DVector::from_fn(10, |_, _| rng.gen_range(-0.2..0.2));
            let grid = lambda_grid(&phi, &u, 20, 1e-3).unwrap();
            let opts = CvOptions { fold_seed: seed, relative_tol: 1e-12, max_sweeps: 1_000_000, ..CvOptions::default() };
            let res = lasso_cv_stderr(&phi, &u, &grid, &opts).unwrap();
            let folds = fold_partition(10, 5, seed).unwrap();
            let (chosen, sol) = brute_force(&phi, &u, &grid, &folds);
            assert_eq!(res.chosen_lambda, chosen, "seed {seed}");
            assert!((res.solution - sol).amax() < 1e-9);
        }
    }
}
