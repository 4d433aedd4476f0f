//! Orthogonal matching pursuit with an incrementally updated QR factorization
//! of the selected columns.

use nalgebra::{DMatrix, DVector};

use super::cv::{complement, fold_partition, select_entries, select_rows};
use crate::error::{Error, Result};

/// Greedy sparse fit.
#[derive(Debug, Clone)]
pub struct OmpResult {
    /// Selected columns in selection order.
    pub support: Vec<usize>,
    /// Length-`P` coefficients, zero off the support.
    pub coefficients: DVector<f64>,
    pub residual_norm: f64,
}

// Relative size below which an orthogonalized column counts as dependent.
const DEPENDENCE_TOL: f64 = 1e-10;

/// Incremental OMP state: `Φ_S = Q R` over the selected columns `S`.
struct OmpPath<'a> {
    psi: &'a DMatrix<f64>,
    col_norms: Vec<f64>,
    selected: Vec<bool>,
    support: Vec<usize>,
    q: Vec<DVector<f64>>,
    // column-major upper triangle: r[k] holds column k (length k + 1)
    r: Vec<Vec<f64>>,
    qtu: Vec<f64>,
    residual: DVector<f64>,
    u_norm: f64,
}

impl<'a> OmpPath<'a> {
    fn new(psi: &'a DMatrix<f64>, u: &DVector<f64>) -> Self {
        Self {
            psi,
            col_norms: psi.column_iter().map(|c| c.norm()).collect(),
            selected: vec![false; psi.ncols()],
            support: Vec::new(),
            q: Vec::new(),
            r: Vec::new(),
            qtu: Vec::new(),
            residual: u.clone(),
            u_norm: u.norm(),
        }
    }

    fn residual_is_zero(&self) -> bool {
        self.residual.norm() <= 1e-13 * self.u_norm.max(f64::MIN_POSITIVE)
    }

    /// Adds the column most correlated with the residual. Returns `Ok(false)`
    /// when nothing is left to explain.
    fn step(&mut self) -> Result<bool> {
        if self.residual_is_zero() || self.support.len() == self.psi.ncols() {
            return Ok(false);
        }
        let corr = self.psi.tr_mul(&self.residual);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.psi.ncols() {
            if self.selected[j] || self.col_norms[j] == 0.0 {
                continue;
            }
            let c = corr[j].abs() / self.col_norms[j];
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let Some((j, _)) = best else { return Ok(false) };

        // classical Gram-Schmidt, applied twice
        let mut v: DVector<f64> = self.psi.column(j).into_owned();
        let mut coeffs = vec![0.0; self.q.len() + 1];
        for _ in 0..2 {
            for (i, qi) in self.q.iter().enumerate() {
                let c = qi.dot(&v);
                v.axpy(-c, qi, 1.0);
                coeffs[i] += c;
            }
        }
        let nv = v.norm();
        if nv <= DEPENDENCE_TOL * self.col_norms[j] {
            return Err(Error::RankDeficient { pivot: j, magnitude: nv / self.col_norms[j] });
        }
        v /= nv;
        coeffs[self.q.len()] = nv;
        let proj = v.dot(&self.residual);
        self.residual.axpy(-proj, &v, 1.0);

        self.q.push(v);
        self.r.push(coeffs);
        self.qtu.push(proj);
        self.selected[j] = true;
        self.support.push(j);
        Ok(true)
    }

    /// Least-squares coefficients on the current support, in support order.
    fn support_coefficients(&self) -> Vec<f64> {
        let k = self.support.len();
        let mut x = self.qtu.clone();
        for i in (0..k).rev() {
            let s: f64 = x[i] - (i + 1..k).map(|c| self.r[c][i] * x[c]).sum::<f64>();
            x[i] = s / self.r[i][i];
        }
        x
    }

    fn full_coefficients(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.psi.ncols());
        for (&j, v) in self.support.iter().zip(self.support_coefficients()) {
            c[j] = v;
        }
        c
    }
}

fn check_system(psi: &DMatrix<f64>, u: &DVector<f64>) -> Result<()> {
    if psi.nrows() != u.len() {
        return Err(Error::Dimension(format!("{} rows vs {} observations", psi.nrows(), u.len())));
    }
    Ok(())
}

/// Runs `n_atoms` greedy steps with a full least-squares refit on the support
/// after each one. Stops early if the residual vanishes.
pub fn omp(psi: &DMatrix<f64>, u: &DVector<f64>, n_atoms: usize) -> Result<OmpResult> {
    check_system(psi, u)?;
    let limit = psi.nrows().min(psi.ncols());
    if n_atoms == 0 || n_atoms > limit {
        return Err(Error::Config(format!("atom count {n_atoms} must lie in 1..={limit}")));
    }
    let mut path = OmpPath::new(psi, u);
    for _ in 0..n_atoms {
        if !path.step()? {
            break;
        }
    }
    let coefficients = path.full_coefficients();
    let residual_norm = (u - psi * &coefficients).norm();
    Ok(OmpResult { support: path.support, coefficients, residual_norm })
}

/// Settings for [`omp_cv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmpCvOptions {
    pub folds: usize,
    pub fold_seed: u64,
    /// Largest atom count tried; `None` uses `min(N − N/folds, P, 10√N)`.
    pub max_atoms: Option<usize>,
}

impl Default for OmpCvOptions {
    fn default() -> Self {
        Self { folds: 5, fold_seed: 0, max_atoms: None }
    }
}

impl OmpCvOptions {
    pub fn atom_ceiling(&self, n: usize, p: usize) -> usize {
        let default = (n - n / self.folds).min(p).min((10.0 * (n as f64).sqrt()) as usize);
        self.max_atoms.unwrap_or(default).max(1)
    }
}

/// OMP fit with the atom count chosen by k-fold cross-validation.
#[derive(Debug, Clone)]
pub struct OmpCvResult {
    pub fit: OmpResult,
    pub chosen_atoms: usize,
    /// Mean squared hold-out error for atom counts `1..=cv_errors.len()`.
    pub cv_errors: Vec<f64>,
}

/// Sweeps atom counts `1..=max_atoms`, picks the count with the smallest mean
/// hold-out error (ties go to fewer atoms) and refits on all data.
pub fn omp_cv(psi: &DMatrix<f64>, u: &DVector<f64>, opts: &OmpCvOptions) -> Result<OmpCvResult> {
    check_system(psi, u)?;
    let n = psi.nrows();
    let folds = fold_partition(n, opts.folds, opts.fold_seed)?;
    let ceiling = opts.atom_ceiling(n, psi.ncols());
    let mut totals = vec![0.0; ceiling];
    let mut max_usable = ceiling;

    for fold in &folds {
        let train = complement(n, fold);
        max_usable = max_usable.min(train.len().min(psi.ncols()));
        let psi_tr = select_rows(psi, &train);
        let u_tr = select_entries(u, &train);
        let psi_te = select_rows(psi, fold);
        let u_te = select_entries(u, fold);
        let mut path = OmpPath::new(&psi_tr, &u_tr);
        let mut err = u_te.norm_squared() / fold.len() as f64;
        for total in totals.iter_mut() {
            // once the path stalls the last fit carries forward
            if path.step()? {
                let pred = support_prediction(&psi_te, &path.support, &path.support_coefficients());
                err = (pred - &u_te).norm_squared() / fold.len() as f64;
            }
            *total += err;
        }
    }
    let k = folds.len() as f64;
    let cv_errors: Vec<f64> = totals.iter().map(|t| t / k).collect();
    let best = (0..max_usable.max(1))
        .min_by(|&a, &b| cv_errors[a].total_cmp(&cv_errors[b]).then(a.cmp(&b)))
        .expect("at least one atom count");
    let chosen_atoms = best + 1;
    let fit = omp(psi, u, chosen_atoms.min(n.min(psi.ncols())))?;
    Ok(OmpCvResult { fit, chosen_atoms, cv_errors })
}

fn support_prediction(psi: &DMatrix<f64>, support: &[usize], coeffs: &[f64]) -> DVector<f64> {
    let mut pred = DVector::zeros(psi.nrows());
    for (&j, &c) in support.iter().zip(coeffs) {
        pred.axpy(c, &psi.column(j), 1.0);
    }
    pred
}
