use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Overdetermined least squares `argmin ‖Ψc − u‖₂` via Householder QR.
///
/// Fails with [`Error::RankDeficient`] naming the first diagonal entry of `R`
/// that is negligible relative to the largest one.
pub fn least_squares(psi: &DMatrix<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = psi.shape();
    if u.len() != n {
        return Err(Error::Dimension(format!("{n} rows vs {} observations", u.len())));
    }
    if n < p {
        return Err(Error::Dimension(format!("least squares needs N >= P, got N={n}, P={p}")));
    }
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let qr = psi.clone().qr();
    let mut rhs = u.clone();
    qr.q_tr_mul(&mut rhs);
    let r = qr.r();

    let diag_max = (0..p).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
    let cutoff = diag_max * n.max(p) as f64 * f64::EPSILON;
    if let Some(pivot) = (0..p).find(|&i| r[(i, i)].abs() <= cutoff) {
        return Err(Error::RankDeficient { pivot, magnitude: r[(pivot, pivot)].abs() });
    }

    let mut c = rhs.rows(0, p).into_owned();
    for i in (0..p).rev() {
        let mut s = c[i];
        for j in i + 1..p {
            s -= r[(i, j)] * c[j];
        }
        c[i] = s / r[(i, i)];
    }
    Ok(c)
}
