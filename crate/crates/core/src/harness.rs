//! Experiment orchestration: dataset splitting, error metrics, seeded
//! replications of every method on shared data, benchmark summaries and the
//! empirical concentration experiment for Legendre measurement matrices.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::elliptic1d::{generate_dataset, uniform_samples, EllipticParams, QoiEvaluator};
use crate::error::{Error, Result};
use crate::genmod_opt::{assemble_coefficients, genmod_fit, GenModConfig};
use crate::genmodel::{coefficients, DecayModel, GenModelState};
use crate::pce::{assemble_matrix, build_basis, MultiIndexBasis};
use crate::regsolvers::{irw_lasso, least_squares, omp_cv, CvOptions, IrwOptions, OmpCvOptions};

/// Thresholds at which the concentration experiment reports exceedance.
pub const JL_THRESHOLDS: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

/// Header of the per-replication results CSV.
pub const RESULTS_HEADER: [&str; 9] = ["replication", "method", "N", "eps_c", "eps_u", "wall_ms", "outer_iters", "sign_flips", "status"];

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `tag` of item `index`, so that any replication can
/// be re-run on its own.
pub fn derive_seed(master: u64, index: u64, tag: &str) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ index);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Seeded random partition into optimization and validation parts with
/// `N_op = ⌈(1 − va_fraction)·N⌉`. Rows keep their original relative order.
pub fn split_dataset(ds: &Dataset, va_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n < 5 {
        return Err(Error::Config(format!("splitting needs at least 5 samples, got {n}")));
    }
    if !(va_fraction > 0.0 && va_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {va_fraction}")));
    }
    // the small offset keeps e.g. 0.8·40 from rounding up to 33
    let n_op = (((1.0 - va_fraction) * n as f64) - 1e-9).ceil().clamp(1.0, (n - 1) as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut op = order[..n_op].to_vec();
    let mut va = order[n_op..].to_vec();
    op.sort_unstable();
    va.sort_unstable();
    Ok((ds.subset(&op), ds.subset(&va)))
}

/// `‖ĉ − c_ref‖₂ / ‖c_ref‖₂`.
pub fn coefficient_error(c_hat: &DVector<f64>, c_ref: &DVector<f64>) -> Result<f64> {
    if c_hat.len() != c_ref.len() {
        return Err(Error::Dimension(format!("{} estimated vs {} reference coefficients", c_hat.len(), c_ref.len())));
    }
    let norm = c_ref.norm();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("reference coefficients have zero norm".into()));
    }
    Ok((c_hat - c_ref).norm() / norm)
}

/// `‖Ψ_te ĉ − u_te‖₂ / ‖u_te‖₂`.
pub fn reconstruction_error(c_hat: &DVector<f64>, psi_te: &DMatrix<f64>, u_te: &DVector<f64>) -> Result<f64> {
    if psi_te.ncols() != c_hat.len() || psi_te.nrows() != u_te.len() {
        return Err(Error::Dimension(format!(
            "test matrix {}x{} vs {} coefficients and {} observations",
            psi_te.nrows(),
            psi_te.ncols(),
            c_hat.len(),
            u_te.len()
        )));
    }
    let norm = u_te.norm();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("test observations have zero norm".into()));
    }
    Ok((psi_te * c_hat - u_te).norm() / norm)
}

/// Relative improvement of GenMod over another method, in percent.
pub fn improvement_percent(err_method: f64, err_genmod: f64) -> Result<f64> {
    if !(err_method > 0.0) {
        return Err(Error::Degenerate(format!("baseline error must be positive, got {err_method}")));
    }
    Ok((err_method - err_genmod) / err_method * 100.0)
}

/// How planted spike magnitudes are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpikeScale {
    /// `|ν_i| = U(lo, hi) · G_i(z*)`.
    #[default]
    Relative,
    /// `|ν_i| = U(lo, hi)`.
    Absolute,
}

/// Sparse deviation of a planted model: `count` distinct uniformly chosen
/// indices with random signs and magnitudes in `range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuSpec {
    pub count: usize,
    pub range: [f64; 2],
    pub scale: SpikeScale,
}

impl Default for NuSpec {
    fn default() -> Self {
        Self { count: 5, range: [0.5, 1.5], scale: SpikeScale::Relative }
    }
}

/// Ground truth `c* = D_ζ* G(z*) + ν*` of a synthetic problem.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub basis: MultiIndexBasis,
    pub state: GenModelState,
    pub coefficients: DVector<f64>,
}

/// Latent vector with zero constant-term exponent, decay rates
/// `2.5 + 0.25 j` and no algebraic correction.
pub fn default_latent(d: usize) -> DVector<f64> {
    let mut z = DVector::zeros(2 * d + 1);
    for j in 0..d {
        z[1 + j] = 2.5 + 0.25 * j as f64;
    }
    z
}

/// Draws the planted truth. `zeta_star = None` draws independent random signs.
pub fn planted_model(
    basis: &MultiIndexBasis,
    z_star: &DVector<f64>,
    zeta_star: Option<&DVector<f64>>,
    nu_spec: &NuSpec,
    seed: u64,
) -> Result<PlantedModel> {
    let model = DecayModel::new(basis);
    let p = basis.len();
    let [lo, hi] = nu_spec.range;
    if nu_spec.count > p {
        return Err(Error::Config(format!("{} spikes requested on {p} coefficients", nu_spec.count)));
    }
    if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::Config(format!("spike range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")));
    }
    let g = model.eval(z_star)?.into_inner();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta = match zeta_star {
        Some(z) => z.clone(),
        None => DVector::from_fn(p, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }),
    };
    let mut nu = DVector::zeros(p);
    for i in index::sample(&mut rng, p, nu_spec.count) {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let magnitude = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let unit = match nu_spec.scale {
            SpikeScale::Relative => g[i],
            SpikeScale::Absolute => 1.0,
        };
        nu[i] = sign * magnitude * unit;
    }
    let c = coefficients(&model, z_star, &zeta, &nu)?;
    let state = GenModelState::new(z_star.clone(), zeta, nu)?;
    Ok(PlantedModel { basis: basis.clone(), state, coefficients: c })
}

/// `n` uniform samples with `u = Ψ c + noise`, the noise being i.i.d.
/// `N(0, noise_level²)`.
pub fn sample_linear_model(basis: &MultiIndexBasis, c: &DVector<f64>, n: usize, noise_level: f64, seed: u64) -> Result<Dataset> {
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(Error::Config(format!("noise level must be non-negative, got {noise_level}")));
    }
    let samples = uniform_samples(n, basis.dim(), derive_seed(seed, 0, "samples"));
    let psi = assemble_matrix(basis, &samples)?.into_matrix();
    let mut u = &psi * c;
    if noise_level > 0.0 {
        let normal = Normal::new(0.0, noise_level).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, "noise"));
        u.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Dataset::new(samples, u, seed, noise_level)
}

/// Planted problem in one call: draws the truth from `seed` and `n` noisy
/// observations of it. Returns the dataset and `c*`.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_planted_dataset(
    d: usize,
    p: usize,
    z_star: &DVector<f64>,
    zeta_star: Option<&DVector<f64>>,
    nu_spec: &NuSpec,
    n: usize,
    noise_level: f64,
    seed: u64,
) -> Result<(Dataset, DVector<f64>)> {
    let basis = build_basis(d, p)?;
    let truth = planted_model(&basis, z_star, zeta_star, nu_spec, derive_seed(seed, 0, "planted"))?;
    let ds = sample_linear_model(&basis, &truth.coefficients, n, noise_level, seed)?;
    Ok((ds, truth.coefficients))
}

/// Regression methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Genmod,
    GenmodNosparse,
    Omp,
    IrwLasso,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Genmod, Method::GenmodNosparse, Method::Omp, Method::IrwLasso];

    pub fn name(self) -> &'static str {
        match self {
            Method::Genmod => "genmod",
            Method::GenmodNosparse => "genmod-nosparse",
            Method::Omp => "omp",
            Method::IrwLasso => "irw-lasso",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected genmod, genmod-nosparse, omp or irw-lasso")))
    }
}

/// OMP baseline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmpSettings {
    pub folds: usize,
    pub max_atoms: Option<usize>,
}

impl Default for OmpSettings {
    fn default() -> Self {
        Self { folds: 5, max_atoms: None }
    }
}

/// IRW-Lasso baseline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrwSettings {
    pub tau0: f64,
    pub tau_max: f64,
    pub max_iter: usize,
    pub conv_tol: f64,
    pub grid_count: usize,
    pub grid_ratio: f64,
    pub folds: usize,
    pub relative_tol: f64,
    pub max_sweeps: usize,
}

impl Default for IrwSettings {
    fn default() -> Self {
        let o = IrwOptions::default();
        Self {
            tau0: o.tau0,
            tau_max: o.tau_max,
            max_iter: o.max_iter,
            conv_tol: o.conv_tol,
            grid_count: o.grid_count,
            grid_ratio: o.grid_ratio,
            folds: o.cv.folds,
            relative_tol: o.cv.relative_tol,
            max_sweeps: o.cv.max_sweeps,
        }
    }
}

impl IrwSettings {
    pub fn options(&self, fold_seed: u64) -> IrwOptions {
        IrwOptions {
            tau0: self.tau0,
            tau_max: self.tau_max,
            max_iter: self.max_iter,
            conv_tol: self.conv_tol,
            grid_count: self.grid_count,
            grid_ratio: self.grid_ratio,
            cv: CvOptions { folds: self.folds, fold_seed, relative_tol: self.relative_tol, max_sweeps: self.max_sweeps },
        }
    }
}

/// Per-method solver settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub genmod: GenModConfig,
    pub omp: OmpSettings,
    pub irw: IrwSettings,
}

/// Synthetic planted generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub d: usize,
    /// Latent vector of the truth; defaults to [`default_latent`].
    pub z_star: Option<Vec<f64>>,
    pub nu: NuSpec,
    pub noise_level: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { d: 5, z_star: None, nu: NuSpec::default(), noise_level: 0.0 }
    }
}

impl SyntheticParams {
    pub fn latent(&self) -> Result<DVector<f64>> {
        match &self.z_star {
            None => Ok(default_latent(self.d)),
            Some(z) if z.len() == 2 * self.d + 1 => Ok(DVector::from_column_slice(z)),
            Some(z) => Err(Error::Config(format!("z_star needs {} entries for d = {}, got {}", 2 * self.d + 1, self.d, z.len()))),
        }
    }
}

/// Source of training and test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorConfig {
    Elliptic1d(EllipticParams),
    Synthetic(SyntheticParams),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Elliptic1d(EllipticParams::default())
    }
}

impl GeneratorConfig {
    pub fn dim(&self) -> usize {
        match self {
            GeneratorConfig::Elliptic1d(e) => e.d,
            GeneratorConfig::Synthetic(s) => s.d,
        }
    }
}

/// Benchmark description; the JSON form mirrors the fields one to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub p: usize,
    /// Training set sizes; one sweep point per entry.
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    pub va_fraction: f64,
    #[serde(rename = "N_te")]
    pub n_te: usize,
    /// Size of the least-squares reference fit for the elliptic generator;
    /// `None` skips `ε_c`. Synthetic runs use the planted truth instead.
    #[serde(rename = "N_ls")]
    pub n_ls: Option<usize>,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub master_seed: u64,
    pub solvers: SolverSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            p: 3,
            n: vec![40],
            va_fraction: 0.2,
            n_te: 1000,
            n_ls: Some(5000),
            methods: Method::ALL.to_vec(),
            replications: 10,
            master_seed: 0,
            solvers: SolverSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator.dim() == 0 || self.p == 0 {
            return Err(Error::Config("d and p must be positive".into()));
        }
        if self.n.is_empty() || self.n.iter().any(|&n| n < 5) {
            return Err(Error::Config(format!("every N must be at least 5, got {:?}", self.n)));
        }
        if !(self.va_fraction > 0.0 && self.va_fraction < 1.0) {
            return Err(Error::Config(format!("va_fraction must lie in (0, 1), got {}", self.va_fraction)));
        }
        if self.n_te == 0 {
            return Err(Error::Config("N_te must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replication count must be at least 1".into()));
        }
        self.solvers.genmod.validate()?;
        if let GeneratorConfig::Synthetic(s) = &self.generator {
            s.latent()?;
        }
        Ok(())
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub eps_c: Option<f64>,
    pub eps_u: Option<f64>,
    pub wall_ms: f64,
    pub outer_iters: Option<usize>,
    pub sign_flips: Option<usize>,
    /// `"ok"` or `"failed: <reason>"`.
    pub status: String,
    /// Fingerprint of the training rows the method received.
    pub input_hash: u64,
    pub coefficients: Option<DVector<f64>>,
}

impl MethodOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn failed(method: Method, input_hash: u64, err: &Error) -> Self {
        Self {
            method,
            eps_c: None,
            eps_u: None,
            wall_ms: 0.0,
            outer_iters: None,
            sign_flips: None,
            status: format!("failed: {err}"),
            input_hash,
            coefficients: None,
        }
    }
}

/// All methods on one replication at one training size.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub n: usize,
    /// Child seed all data of this replication derives from.
    pub seed: u64,
    pub outcomes: Vec<MethodOutcome>,
    /// Coefficients `ε_c` is measured against, if any.
    pub reference: Option<DVector<f64>>,
}

impl ReplicationRecord {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

/// Hash of the rows of the given blocks, in order, so that a split view and
/// the stacked matrix fingerprint identically.
pub fn training_fingerprint(blocks: &[(&DMatrix<f64>, &DVector<f64>)]) -> u64 {
    let mut h = DefaultHasher::new();
    for (m, v) in blocks {
        for i in 0..m.nrows() {
            for x in m.row(i).iter() {
                h.write_u64(x.to_bits());
            }
            h.write_u64(v[i].to_bits());
        }
    }
    h.finish()
}

enum Source {
    Elliptic(QoiEvaluator),
    Synthetic { params: SyntheticParams, z_star: DVector<f64> },
}

/// Prepared benchmark: the basis, the data generator and, for elliptic runs,
/// the least-squares reference shared by all replications.
pub struct Benchmark {
    config: ExperimentConfig,
    basis: MultiIndexBasis,
    source: Source,
    reference: Option<DVector<f64>>,
}

impl Benchmark {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let basis = build_basis(config.generator.dim(), config.p)?;
        let (source, reference) = match &config.generator {
            GeneratorConfig::Elliptic1d(params) => {
                let evaluator = params.evaluator()?;
                let reference = match config.n_ls {
                    Some(n_ls) => {
                        if n_ls < basis.len() {
                            return Err(Error::Config(format!("N_ls = {n_ls} is below P = {}", basis.len())));
                        }
                        let ds = generate_dataset(&evaluator, n_ls, derive_seed(config.master_seed, 0, "reference"))?;
                        let psi = assemble_matrix(&basis, &ds.samples)?.into_matrix();
                        Some(least_squares(&psi, &ds.qoi)?)
                    }
                    None => None,
                };
                (Source::Elliptic(evaluator), reference)
            }
            GeneratorConfig::Synthetic(params) => (Source::Synthetic { params: params.clone(), z_star: params.latent()? }, None),
        };
        Ok(Self { config, basis, source, reference })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn basis(&self) -> &MultiIndexBasis {
        &self.basis
    }

    /// Least-squares reference of an elliptic run.
    pub fn reference(&self) -> Option<&DVector<f64>> {
        self.reference.as_ref()
    }

    /// Child seed of replication `index`.
    pub fn replication_seed(&self, index: usize) -> u64 {
        derive_seed(self.config.master_seed, index as u64, "replication")
    }

    /// Runs every configured method on replication `index` with `n` training
    /// samples. Method failures are recorded, never propagated.
    pub fn run_replication(&self, n: usize, index: usize) -> ReplicationRecord {
        let seed = self.replication_seed(index);
        let mut record = ReplicationRecord { replication: index, n, seed, outcomes: Vec::new(), reference: None };
        let data = match self.replication_data(n, seed) {
            Ok(d) => d,
            Err(e) => {
                record.outcomes = self.config.methods.iter().map(|&m| MethodOutcome::failed(m, 0, &e)).collect();
                return record;
            }
        };
        record.reference = data.reference.clone();
        record.outcomes = self.config.methods.iter().map(|&m| self.run_method(m, &data, derive_seed(seed, n as u64, "folds"))).collect();
        record
    }

    fn replication_data(&self, n: usize, seed: u64) -> Result<ReplicationData> {
        let train_seed = derive_seed(seed, n as u64, "train");
        let test_seed = derive_seed(seed, 0, "test");
        let (train, test, reference) = match &self.source {
            Source::Elliptic(evaluator) => {
                (generate_dataset(evaluator, n, train_seed)?, generate_dataset(evaluator, self.config.n_te, test_seed)?, self.reference.clone())
            }
            Source::Synthetic { params, z_star } => {
                let truth = planted_model(&self.basis, z_star, None, &params.nu, derive_seed(seed, 0, "planted"))?;
                let train = sample_linear_model(&self.basis, &truth.coefficients, n, params.noise_level, train_seed)?;
                let test = sample_linear_model(&self.basis, &truth.coefficients, self.config.n_te, 0.0, test_seed)?;
                (train, test, Some(truth.coefficients))
            }
        };
        let (op, va) = split_dataset(&train, self.config.va_fraction, derive_seed(seed, n as u64, "split"))?;
        let psi_op = assemble_matrix(&self.basis, &op.samples)?.into_matrix();
        let psi_va = assemble_matrix(&self.basis, &va.samples)?.into_matrix();
        let psi_te = assemble_matrix(&self.basis, &test.samples)?.into_matrix();
        let mut psi_all = DMatrix::zeros(n, self.basis.len());
        psi_all.rows_mut(0, op.len()).copy_from(&psi_op);
        psi_all.rows_mut(op.len(), va.len()).copy_from(&psi_va);
        let u_all = DVector::from_iterator(n, op.qoi.iter().chain(va.qoi.iter()).copied());
        Ok(ReplicationData { psi_op, u_op: op.qoi, psi_va, u_va: va.qoi, psi_all, u_all, psi_te, u_te: test.qoi, reference })
    }

    fn run_method(&self, method: Method, data: &ReplicationData, fold_seed: u64) -> MethodOutcome {
        let start = Instant::now();
        let (input_hash, fit) = match method {
            Method::Genmod | Method::GenmodNosparse => {
                let hash = training_fingerprint(&[(&data.psi_op, &data.u_op), (&data.psi_va, &data.u_va)]);
                let config = GenModConfig { no_sparse: method == Method::GenmodNosparse, fold_seed, ..self.config.solvers.genmod };
                let fit = genmod_fit(&self.basis, &data.psi_op, &data.u_op, &data.psi_va, &data.u_va, &config).and_then(|r| {
                    Ok((assemble_coefficients(&r.state, &self.basis)?, Some(r.outer_iterations), Some(r.sign_flip_count)))
                });
                (hash, fit)
            }
            Method::Omp => {
                let hash = training_fingerprint(&[(&data.psi_all, &data.u_all)]);
                let s = self.config.solvers.omp;
                let opts = OmpCvOptions { folds: s.folds, fold_seed, max_atoms: s.max_atoms };
                (hash, omp_cv(&data.psi_all, &data.u_all, &opts).map(|r| (r.fit.coefficients, None, None)))
            }
            Method::IrwLasso => {
                let hash = training_fingerprint(&[(&data.psi_all, &data.u_all)]);
                let opts = self.config.solvers.irw.options(fold_seed);
                (hash, irw_lasso(&data.psi_all, &data.u_all, &opts).map(|r| (r.coefficients, None, None)))
            }
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let scored = fit.and_then(|(c, outer, flips)| {
            let eps_u = reconstruction_error(&c, &data.psi_te, &data.u_te)?;
            let eps_c = data.reference.as_ref().map(|r| coefficient_error(&c, r)).transpose()?;
            if !eps_u.is_finite() || eps_c.is_some_and(|e| !e.is_finite()) {
                return Err(Error::Divergence("non-finite error metric".into()));
            }
            Ok((c, eps_c, eps_u, outer, flips))
        });
        match scored {
            Ok((c, eps_c, eps_u, outer_iters, sign_flips)) => MethodOutcome {
                method,
                eps_c,
                eps_u: Some(eps_u),
                wall_ms,
                outer_iters,
                sign_flips,
                status: "ok".into(),
                input_hash,
                coefficients: Some(c),
            },
            Err(e) => MethodOutcome { wall_ms, ..MethodOutcome::failed(method, input_hash, &e) },
        }
    }

    /// All `(N, replication)` pairs, executed in parallel and returned sorted
    /// by `N` then replication index.
    pub fn run(&self) -> BenchmarkResult {
        let jobs: Vec<(usize, usize)> =
            self.config.n.iter().flat_map(|&n| (0..self.config.replications).map(move |r| (n, r))).collect();
        let mut records: Vec<ReplicationRecord> = jobs.par_iter().map(|&(n, r)| self.run_replication(n, r)).collect();
        records.sort_by_key(|r| (r.n, r.replication));
        let summary = summarize(&records);
        BenchmarkResult { records, summary }
    }
}

struct ReplicationData {
    psi_op: DMatrix<f64>,
    u_op: DVector<f64>,
    psi_va: DMatrix<f64>,
    u_va: DVector<f64>,
    /// Optimization rows followed by validation rows.
    psi_all: DMatrix<f64>,
    u_all: DVector<f64>,
    psi_te: DMatrix<f64>,
    u_te: DVector<f64>,
    reference: Option<DVector<f64>>,
}

/// Builds the benchmark and runs it.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchmarkResult> {
    Ok(Benchmark::new(config.clone())?.run())
}

/// Minimum, median and maximum of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Range {
    pub fn of(values: &[f64]) -> Option<Range> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let k = v.len();
        let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
        Some(Range { min: v[0], median, max: v[k - 1] })
    }
}

/// Aggregate over the replications of one `(N, method)` pair; failed
/// replications are counted and excluded from the ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub method: Method,
    pub replications: usize,
    pub failures: usize,
    pub eps_u: Option<Range>,
    pub eps_c: Option<Range>,
    pub wall_ms: Option<Range>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub total_failures: usize,
}

impl Summary {
    pub fn row(&self, n: usize, method: Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.n == n && r.method == method)
    }
}

pub fn summarize(records: &[ReplicationRecord]) -> Summary {
    let mut groups: BTreeMap<(usize, Method), Vec<&MethodOutcome>> = BTreeMap::new();
    for rec in records {
        for o in &rec.outcomes {
            groups.entry((rec.n, o.method)).or_default().push(o);
        }
    }
    let rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((n, method), outcomes)| {
            let ok: Vec<&&MethodOutcome> = outcomes.iter().filter(|o| o.is_ok()).collect();
            let eps_u: Vec<f64> = ok.iter().filter_map(|o| o.eps_u).collect();
            let eps_c: Vec<f64> = ok.iter().filter_map(|o| o.eps_c).collect();
            let wall: Vec<f64> = ok.iter().map(|o| o.wall_ms).collect();
            SummaryRow {
                n,
                method,
                replications: outcomes.len(),
                failures: outcomes.len() - ok.len(),
                eps_u: Range::of(&eps_u),
                eps_c: Range::of(&eps_c),
                wall_ms: Range::of(&wall),
            }
        })
        .collect();
    let total_failures = rows.iter().map(|r| r.failures).sum();
    Summary { rows, total_failures }
}

/// Records and summary of a benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub records: Vec<ReplicationRecord>,
    pub summary: Summary,
}

fn opt_field<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn float_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

impl BenchmarkResult {
    /// One row per replication and method.
    pub fn write_results_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RESULTS_HEADER)?;
        for rec in &self.records {
            for o in &rec.outcomes {
                w.write_record([
                    rec.replication.to_string(),
                    o.method.to_string(),
                    rec.n.to_string(),
                    float_field(o.eps_c),
                    float_field(o.eps_u),
                    format!("{:.3}", o.wall_ms),
                    opt_field(o.outer_iters),
                    opt_field(o.sign_flips),
                    o.status.clone(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format coefficients (`replication,method,N,index,value`), with
    /// the reference stored under method `reference`, so every error in the
    /// results CSV can be recomputed.
    pub fn write_coefficients_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["replication", "method", "N", "index", "value"])?;
        for rec in &self.records {
            let vectors = rec
                .reference
                .iter()
                .map(|c| ("reference".to_string(), c))
                .chain(rec.outcomes.iter().filter_map(|o| o.coefficients.as_ref().map(|c| (o.method.to_string(), c))));
            for (name, c) in vectors {
                for (i, v) in c.iter().enumerate() {
                    w.write_record([rec.replication.to_string(), name.clone(), rec.n.to_string(), i.to_string(), format!("{v:.16e}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, &self.summary)?;
        Ok(())
    }

    /// Scatter of `ε_u` per replication against `N` (log-log) with min/max
    /// bars per method.
    pub fn write_svg(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.svg().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 420.0;
        const M: f64 = 60.0;
        const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
        let points: Vec<(usize, Method, f64)> = self
            .records
            .iter()
            .flat_map(|r| r.outcomes.iter().filter_map(move |o| o.eps_u.filter(|e| *e > 0.0).map(|e| (r.n, o.method, e))))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
        if points.is_empty() {
            out.push_str("</svg>\n");
            return out;
        }
        let (nmin, nmax) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0 as f64), b.max(p.0 as f64)));
        let (emin, emax) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.2), b.max(p.2)));
        let (lx0, lx1) = (nmin.ln() - 0.2, nmax.ln() + 0.2);
        let (ly0, ly1) = (emin.log10().floor(), emax.log10().ceil().max(emin.log10().floor() + 1.0));
        let methods: Vec<Method> = Method::ALL.into_iter().filter(|m| points.iter().any(|p| p.1 == *m)).collect();
        let sx = |n: f64, k: usize| M + (n.ln() - lx0) / (lx1 - lx0) * (W - 2.0 * M) + (k as f64 - 1.5) * 6.0;
        let sy = |e: f64| H - M - (e.log10() - ly0) / (ly1 - ly0) * (H - 2.0 * M);
        let _ = writeln!(out, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
        let _ = writeln!(out, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
        for dec in (ly0 as i32)..=(ly1 as i32) {
            let y = sy(10f64.powi(dec));
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">1e{dec}</text>"#, M - 6.0, y + 4.0);
        }
        let mut sizes: Vec<usize> = points.iter().map(|p| p.0).collect();
        sizes.sort_unstable();
        sizes.dedup();
        for n in &sizes {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{n}</text>"#, sx(*n as f64, 1) + 3.0, H - M + 18.0);
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">N</text>"#, W / 2.0, H - 15.0);
        let _ = writeln!(out, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">eps_u</text>"#, H / 2.0, H / 2.0);
        for (k, m) in methods.iter().enumerate() {
            let color = COLORS[Method::ALL.iter().position(|x| x == m).unwrap_or(0)];
            for n in &sizes {
                let es: Vec<f64> = points.iter().filter(|p| p.0 == *n && p.1 == *m).map(|p| p.2).collect();
                if let Some(r) = Range::of(&es) {
                    let x = sx(*n as f64, k);
                    let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#, sy(r.min), sy(r.max));
                }
                for e in es {
                    let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, sx(*n as f64, k), sy(e));
                }
            }
            let ly = M + 16.0 * k as f64;
            let _ = writeln!(out, r#"<circle cx="{}" cy="{ly}" r="4" fill="{color}"/>"#, W - M - 110.0);
            let _ = writeln!(out, r#"<text x="{}" y="{}">{m}</text>"#, W - M - 100.0, ly + 4.0);
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Empirical distribution of `|‖Φx‖² − 1|` for one sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct JlRow {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean of `‖Φx‖²`.
    pub std_err: f64,
    /// Sorted deviations `|‖Φx‖² − 1|`, one per trial.
    pub deviations: Vec<f64>,
}

impl JlRow {
    /// Fraction of trials with deviation strictly above `eps`.
    pub fn exceedance(&self, eps: f64) -> f64 {
        let below = self.deviations.partition_point(|&v| v <= eps);
        (self.deviations.len() - below) as f64 / self.deviations.len() as f64
    }
}

/// For each `N`, draws fresh Legendre matrices `Ψ` on uniform samples,
/// Rademacher signs `ξ` and uniformly random unit vectors `x`, and records
/// `‖Φx‖²` for `Φ = N^{-1/2} Ψ D_ξ`.
pub fn jl_concentration_experiment(d: usize, p: usize, n_list: &[usize], trial_count: usize, seed: u64) -> Result<Vec<JlRow>> {
    if trial_count < 100 {
        return Err(Error::Config(format!("need at least 100 trials, got {trial_count}")));
    }
    if n_list.contains(&0) {
        return Err(Error::Config("sample sizes must be positive".into()));
    }
    let basis = build_basis(d, p)?;
    let pp = basis.len();
    n_list
        .iter()
        .map(|&n| {
            let values: Vec<f64> = (0..trial_count)
                .into_par_iter()
                .map(|t| {
                    let trial_seed = derive_seed(seed, (n as u64) << 32 | t as u64, "jl");
                    let psi = assemble_matrix(&basis, &uniform_samples(n, d, trial_seed))?.into_matrix();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, 0, "vector"));
                    let x = DVector::from_fn(pp, |_, _| StandardNormal.sample(&mut rng)).normalize();
                    let xi = DVector::from_fn(pp, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
                    Ok((psi * x.component_mul(&xi)).norm_squared() / n as f64)
                })
                .collect::<Result<_>>()?;
            let k = values.len() as f64;
            let mean = values.iter().sum::<f64>() / k;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            let mut deviations: Vec<f64> = values.iter().map(|v| (v - 1.0).abs()).collect();
            deviations.sort_by(f64::total_cmp);
            Ok(JlRow { n, mean, std_err: (var / k).sqrt(), deviations })
        })
        .collect()
}

/// CSV with columns `N,trials,mean,std_err,exceed_<eps>...`.
pub fn write_jl_csv(rows: &[JlRow], thresholds: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["N".to_string(), "trials".into(), "mean".into(), "std_err".into()];
    header.extend(thresholds.iter().map(|e| format!("exceed_{e}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.n.to_string(), r.deviations.len().to_string(), format!("{:.16e}", r.mean), format!("{:.16e}", r.std_err)];
        rec.extend(thresholds.iter().map(|&e| format!("{}", r.exceedance(e))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
