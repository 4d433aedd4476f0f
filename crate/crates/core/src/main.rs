//! Command-line front end: data generation, single fits, benchmarks and the
//! concentration experiment.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use genmod::dataset::Dataset;
use genmod::elliptic1d::{generate_dataset, EllipticParams};
use genmod::genmod_opt::{assemble_coefficients, genmod_fit, GenModConfig};
use genmod::harness::{
    jl_concentration_experiment, split_dataset, write_jl_csv, Benchmark, ExperimentConfig, Method, SolverSettings, JL_THRESHOLDS,
};
use genmod::pce::{assemble_matrix, build_basis, MultiIndexBasis};
use genmod::regsolvers::{irw_lasso, omp_cv, OmpCvOptions};
use genmod::Result;

#[derive(Parser)]
#[command(name = "genmod", version, about = "Sparse polynomial chaos regression with generative-model priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the elliptic benchmark and write a dataset CSV plus metadata JSON.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON with elliptic parameters (d, L, a_bar, sigma, element_count, n_quad).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metadata path; defaults to the output path with a .json extension.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Fit one method to one dataset and write its coefficients.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        p: usize,
        /// JSON with solver settings ({"genmod": …, "omp": …, "irw": …}).
        #[arg(long)]
        solvers: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        va_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Run a replication benchmark described by a JSON config.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Directory for results.csv, summary.json and coefficients.csv.
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write plot.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Concentration of ‖Φx‖² for random Legendre measurement matrices.
    JlExperiment {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        p: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200, 400])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn write_coefficients(basis: &MultiIndexBasis, c: &nalgebra::DVector<f64>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "multi_index", "value"])?;
    for (i, alpha) in basis.iter().enumerate() {
        let label: Vec<String> = alpha.entries().iter().map(|a| a.to_string()).collect();
        w.write_record([i.to_string(), label.join(" "), format!("{:.16e}", c[i])])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct FitDiagnostics {
    method: Method,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "P")]
    p: usize,
    wall_ms: f64,
    outer_iters: Option<usize>,
    sign_flips: Option<usize>,
    validation_loss_trace: Option<Vec<f64>>,
    chosen_lambdas: Option<Vec<f64>>,
    omp_atoms: Option<usize>,
    irw_converged: Option<bool>,
    training_residual: f64,
}

#[allow(clippy::too_many_arguments)]
fn fit(
    data: &Path,
    method: Method,
    p: usize,
    solvers: Option<&Path>,
    va_fraction: f64,
    seed: u64,
    out: &Path,
    diagnostics: Option<&Path>,
) -> Result<()> {
    let settings: SolverSettings = solvers.map(read_json).transpose()?.unwrap_or_default();
    settings.genmod.validate()?;
    let ds = Dataset::read_csv(data)?;
    let basis = build_basis(ds.dim(), p)?;
    let psi = assemble_matrix(&basis, &ds.samples)?.into_matrix();
    let start = std::time::Instant::now();
    let mut diag = FitDiagnostics {
        method,
        n: ds.len(),
        p: basis.len(),
        wall_ms: 0.0,
        outer_iters: None,
        sign_flips: None,
        validation_loss_trace: None,
        chosen_lambdas: None,
        omp_atoms: None,
        irw_converged: None,
        training_residual: 0.0,
    };
    let c = match method {
        Method::Genmod | Method::GenmodNosparse => {
            let (op, va) = split_dataset(&ds, va_fraction, seed)?;
            let psi_op = assemble_matrix(&basis, &op.samples)?.into_matrix();
            let psi_va = assemble_matrix(&basis, &va.samples)?.into_matrix();
            let config = GenModConfig { no_sparse: method == Method::GenmodNosparse, fold_seed: seed, ..settings.genmod };
            let report = genmod_fit(&basis, &psi_op, &op.qoi, &psi_va, &va.qoi, &config)?;
            diag.outer_iters = Some(report.outer_iterations);
            diag.sign_flips = Some(report.sign_flip_count);
            diag.validation_loss_trace = Some(report.validation_loss_trace.clone());
            diag.chosen_lambdas = Some(report.chosen_lambdas.clone());
            assemble_coefficients(&report.state, &basis)?
        }
        Method::Omp => {
            let opts = OmpCvOptions { folds: settings.omp.folds, fold_seed: seed, max_atoms: settings.omp.max_atoms };
            let res = omp_cv(&psi, &ds.qoi, &opts)?;
            diag.omp_atoms = Some(res.chosen_atoms);
            res.fit.coefficients
        }
        Method::IrwLasso => {
            let opts = settings.irw.options(seed);
            let res = irw_lasso(&psi, &ds.qoi, &opts)?;
            diag.irw_converged = Some(res.converged);
            res.coefficients
        }
    };
    diag.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    diag.training_residual = (&psi * &c - &ds.qoi).norm() / ds.qoi.norm();
    write_coefficients(&basis, &c, out)?;
    if let Some(path) = diagnostics {
        write_json(&diag, path)?;
    }
    Ok(())
}

/// Returns true when some replication failed.
fn benchmark(config: &Path, out_dir: &Path, svg: bool) -> Result<bool> {
    let config = ExperimentConfig::from_json_file(config)?;
    std::fs::create_dir_all(out_dir)?;
    let result = Benchmark::new(config)?.run();
    result.write_results_csv(&out_dir.join("results.csv"))?;
    result.write_summary_json(&out_dir.join("summary.json"))?;
    result.write_coefficients_csv(&out_dir.join("coefficients.csv"))?;
    if svg {
        result.write_svg(&out_dir.join("plot.svg"))?;
    }
    for row in &result.summary.rows {
        let med = |r: Option<genmod::harness::Range>| r.map(|r| format!("{:.4e}", r.median)).unwrap_or_else(|| "-".into());
        println!(
            "N={:<5} {:<16} eps_u median {}  eps_c median {}  failures {}/{}",
            row.n,
            row.method.name(),
            med(row.eps_u),
            med(row.eps_c),
            row.failures,
            row.replications
        );
    }
    Ok(result.summary.total_failures > 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { n, seed, params, out, meta } => {
            let params: EllipticParams = params.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let evaluator = params.evaluator()?;
            let ds = generate_dataset(&evaluator, n, seed)?;
            ds.write_csv(&out)?;
            evaluator.metadata(seed).write_json(&meta.unwrap_or_else(|| out.with_extension("json")))?;
            Ok(false)
        }
        Command::Fit { data, method, p, solvers, va_fraction, seed, out, diagnostics } => {
            fit(&data, method, p, solvers.as_deref(), va_fraction, seed, &out, diagnostics.as_deref())?;
            Ok(false)
        }
        Command::Benchmark { config, out_dir, svg } => benchmark(&config, &out_dir, svg),
        Command::JlExperiment { d, p, n, trials, seed, out } => {
            let rows = jl_concentration_experiment(d, p, &n, trials, seed)?;
            write_jl_csv(&rows, &JL_THRESHOLDS, &out)?;
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("some replications failed; see the status column");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
