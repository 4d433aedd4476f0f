//! Decay-structured generative model for coefficient magnitudes.
//!
//! For a multi-index `α` the model predicts
//!
//! ```text
//! G_α(z) = exp(logC) · (|α|! / α!) · Π_j (1 + α_j)^{h_j} · exp(-g_j α_j)
//! ```
//!
//! with latent vector `z = (logC, g_1..g_d, h_1..h_d)`. Everything is
//! evaluated as `log G = F z + log(|α|!/α!)` where row `i` of the feature
//! matrix `F` is `(1, -α, ln(1 + α))`, so the Jacobian is `diag(G) F`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pce::MultiIndexBasis;

/// Default relative floor in the sparse-deviation weights.
pub const DEFAULT_WEIGHT_EPS: f64 = 1e-4;

/// Precomputed log-space features of a basis.
#[derive(Debug, Clone)]
pub struct DecayModel {
    dim: usize,
    features: DMatrix<f64>,
    log_multinomial: DVector<f64>,
}

/// Strictly positive magnitudes produced by the generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayProfile(DVector<f64>);

impl DecayProfile {
    pub fn magnitudes(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

impl DecayModel {
    pub fn new(basis: &MultiIndexBasis) -> Self {
        let d = basis.dim();
        let p = basis.len();
        let mut features = DMatrix::zeros(p, 2 * d + 1);
        let mut log_multinomial = DVector::zeros(p);
        for (i, alpha) in basis.iter().enumerate() {
            features[(i, 0)] = 1.0;
            let mut lm = ln_factorial(alpha.total_degree());
            for (j, &a) in alpha.entries().iter().enumerate() {
                features[(i, 1 + j)] = -(a as f64);
                features[(i, 1 + d + j)] = (a as f64).ln_1p();
                lm -= ln_factorial(a);
            }
            log_multinomial[i] = lm;
        }
        Self { dim: d, features, log_multinomial }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Latent dimension `2d + 1`.
    pub fn latent_dim(&self) -> usize {
        2 * self.dim + 1
    }

    pub fn basis_size(&self) -> usize {
        self.features.nrows()
    }

    /// Rows `(1, -α, ln(1 + α))`.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn log_multinomial(&self) -> &DVector<f64> {
        &self.log_multinomial
    }

    fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latent vector has length {}, expected {}",
                z.len(),
                self.latent_dim()
            )));
        }
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::ScalarDomain(format!("non-finite latent entry {bad}")));
        }
        Ok(())
    }

    /// Magnitudes `G(z)`.
    pub fn eval(&self, z: &DVector<f64>) -> Result<DecayProfile> {
        self.check_latent(z)?;
        Ok(DecayProfile(self.eval_unchecked(z)))
    }

    pub(crate) fn eval_unchecked(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut log_g = &self.features * z;
        log_g += &self.log_multinomial;
        log_g.map(f64::exp)
    }

    /// `P × (2d+1)` Jacobian of `G` with respect to `z`.
    pub fn jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_latent(z)?;
        let g = self.eval_unchecked(z);
        let mut jac = self.features.clone();
        for (mut row, gi) in jac.row_iter_mut().zip(g.iter()) {
            row *= *gi;
        }
        Ok(jac)
    }
}

/// Magnitudes `G(z)` for `basis`.
pub fn gen_eval(z: &DVector<f64>, basis: &MultiIndexBasis) -> Result<DecayProfile> {
    DecayModel::new(basis).eval(z)
}

/// Jacobian of [`gen_eval`].
pub fn gen_jacobian(z: &DVector<f64>, basis: &MultiIndexBasis) -> Result<DMatrix<f64>> {
    DecayModel::new(basis).jacobian(z)
}

/// Latent vector, coefficient signs and sparse deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenModelState {
    pub z: DVector<f64>,
    pub zeta: DVector<f64>,
    pub nu: DVector<f64>,
}

impl GenModelState {
    /// Validates that `zeta` holds only ±1 and lengths agree.
    pub fn new(z: DVector<f64>, zeta: DVector<f64>, nu: DVector<f64>) -> Result<Self> {
        if zeta.len() != nu.len() {
            return Err(Error::Dimension(format!(
                "sign vector length {} differs from deviation length {}",
                zeta.len(),
                nu.len()
            )));
        }
        if let Some(bad) = zeta.iter().find(|&&s| s != 1.0 && s != -1.0) {
            return Err(Error::ScalarDomain(format!("sign entry {bad} is not ±1")));
        }
        Ok(Self { z, zeta, nu })
    }

    /// `g`-block of the latent vector.
    pub fn decay_rates(&self) -> &[f64] {
        let d = (self.z.len() - 1) / 2;
        &self.z.as_slice()[1..1 + d]
    }
}

/// `c = D_ζ G(z) + ν`.
pub fn coefficients(model: &DecayModel, z: &DVector<f64>, zeta: &DVector<f64>, nu: &DVector<f64>) -> Result<DVector<f64>> {
    let g = model.eval(z)?.into_inner();
    check_len("sign vector", zeta.len(), g.len())?;
    check_len("deviation", nu.len(), g.len())?;
    Ok(g.component_mul(zeta) + nu)
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Dimension(format!("{what} has length {got}, expected {expected}")));
    }
    Ok(())
}

fn check_system(model: &DecayModel, psi: &DMatrix<f64>, u: &DVector<f64>) -> Result<()> {
    check_len("measurement matrix column count", psi.ncols(), model.basis_size())?;
    check_len("observation vector", u.len(), psi.nrows())
}

/// `‖Ψ(D_ζ G(z) + ν) − u‖²`.
pub fn loss(state: &GenModelState, model: &DecayModel, psi: &DMatrix<f64>, u: &DVector<f64>) -> Result<f64> {
    check_system(model, psi, u)?;
    let c = coefficients(model, &state.z, &state.zeta, &state.nu)?;
    Ok((psi * c - u).norm_squared())
}

/// Gradient of [`loss`] with respect to `z`:
/// `2 (Ψ D_ζ J_G(z))ᵀ (Ψ c − u)`.
pub fn loss_grad_z(state: &GenModelState, model: &DecayModel, psi: &DMatrix<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_system(model, psi, u)?;
    model.check_latent(&state.z)?;
    check_len("sign vector", state.zeta.len(), model.basis_size())?;
    check_len("deviation", state.nu.len(), model.basis_size())?;
    Ok(loss_and_grad(model, &state.z, &state.zeta, &state.nu, psi, u).1)
}

// Shared by the Adam loop; inputs are assumed validated.
pub(crate) fn loss_and_grad(
    model: &DecayModel,
    z: &DVector<f64>,
    zeta: &DVector<f64>,
    nu: &DVector<f64>,
    psi: &DMatrix<f64>,
    u: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let signed_g = model.eval_unchecked(z).component_mul(zeta);
    let residual = psi * (&signed_g + nu) - u;
    let back = psi.tr_mul(&residual).component_mul(&signed_g);
    let grad = model.features.tr_mul(&back) * 2.0;
    (residual.norm_squared(), grad)
}

pub(crate) fn loss_unchecked(
    model: &DecayModel,
    z: &DVector<f64>,
    zeta: &DVector<f64>,
    nu: &DVector<f64>,
    psi: &DMatrix<f64>,
    u: &DVector<f64>,
) -> f64 {
    let c = model.eval_unchecked(z).component_mul(zeta) + nu;
    (psi * c - u).norm_squared()
}

/// Relative loss change `(L(z1) − L(z2)) / L(z2)` at fixed `ν`.
///
/// Returns `None` when `L(z2) = 0`; the caller treats that as convergence.
pub fn rel_loss_change(
    z1: &DVector<f64>,
    z2: &DVector<f64>,
    nu: &DVector<f64>,
    zeta: &DVector<f64>,
    model: &DecayModel,
    psi: &DMatrix<f64>,
    u: &DVector<f64>,
) -> Result<Option<f64>> {
    let s1 = GenModelState { z: z1.clone(), zeta: zeta.clone(), nu: nu.clone() };
    let s2 = GenModelState { z: z2.clone(), zeta: zeta.clone(), nu: nu.clone() };
    let l1 = loss(&s1, model, psi, u)?;
    let l2 = loss(&s2, model, psi, u)?;
    if l2 == 0.0 {
        return Ok(None);
    }
    Ok(Some((l1 - l2) / l2))
}

/// How the floor term in the sparse-deviation weights is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    /// `W_jj = 1 / (G_j + ε·G_0)` with `G_0 = exp(logC)`, the magnitude of
    /// the constant term.
    #[default]
    ZeroIndexScaled,
    /// `W_jj = 1 / (G_j + ε)`.
    Absolute,
}

/// Diagonal of the weight matrix used to penalize `ν`.
pub fn weight_matrix(z: &DVector<f64>, model: &DecayModel, eps: f64, rule: WeightRule) -> Result<DVector<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("weight floor eps must be positive, got {eps}")));
    }
    let g = model.eval(z)?.into_inner();
    let floor = match rule {
        WeightRule::ZeroIndexScaled => eps * z[0].exp(),
        WeightRule::Absolute => eps,
    };
    Ok(g.map(|gj| 1.0 / (gj + floor)))
}

/// Exponent vectors `b^{(i)} = (1, α^{(i)}, ln(1 + α^{(i)}))` writing each
/// magnitude as `c_i exp(-b^{(i)}ᵀ z)`, one row per basis function.
pub fn decay_exponents(basis: &MultiIndexBasis) -> DMatrix<f64> {
    let d = basis.dim();
    let mut b = DMatrix::zeros(basis.len(), 2 * d + 1);
    for (i, alpha) in basis.iter().enumerate() {
        b[(i, 0)] = 1.0;
        for (j, &a) in alpha.entries().iter().enumerate() {
            b[(i, 1 + j)] = a as f64;
            b[(i, 1 + d + j)] = (a as f64).ln_1p();
        }
    }
    b
}

/// Sharpness factor of the per-entry Lipschitz bound.
pub fn lipschitz_shape(b: f64) -> f64 {
    if b >= 2.0 {
        1.0
    } else {
        4.0 / (b * b) * (b - 2.0).exp()
    }
}

/// Lipschitz constant of `a ↦ (c_i exp(-b^{(i)}ᵀ z(a)))_i` on `[0, 1)^k`,
/// where `z_j(a) = a_j / (1 - a_j) + z0_j`:
/// `sqrt(P k) · max_{i,j} |c_i| b_j e^{-bᵀ z0} shape(b_j)`.
pub fn lipschitz_constant(basis: &MultiIndexBasis, z0: &DVector<f64>, c_scale: &DVector<f64>) -> Result<f64> {
    let b = decay_exponents(basis);
    let (p, k) = b.shape();
    check_len("lower-bound latent vector", z0.len(), k)?;
    check_len("coefficient scale", c_scale.len(), p)?;
    if let Some(bad) = c_scale.iter().find(|&&c| !(c > 0.0)) {
        return Err(Error::ScalarDomain(format!("coefficient scale {bad} must be positive")));
    }
    let offsets = &b * z0;
    let mut max_entry = 0.0f64;
    for i in 0..p {
        let prefactor = c_scale[i] * (-offsets[i]).exp();
        for j in 0..k {
            let bij = b[(i, j)];
            if bij > 0.0 {
                max_entry = max_entry.max(prefactor * bij * lipschitz_shape(bij));
            }
        }
    }
    Ok(((p * k) as f64).sqrt() * max_entry)
}
