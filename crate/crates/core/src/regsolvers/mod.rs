//! Sparsity-promoting regression: coordinate-descent Lasso, cross-validated
//! penalty selection, IRW-Lasso, orthogonal matching pursuit and dense least
//! squares.

mod cv;
mod irw;
mod lasso;
mod lstsq;
mod omp;

pub use cv::{fold_partition, lasso_cv_stderr, CvOptions, LassoPathResult};
pub use irw::{irw_lasso, reweighted_step, IrwOptions, IrwResult};
pub use lasso::{
    kkt_violation, lambda_grid, lambda_max, lasso, lasso_fit, lasso_objective, soft_threshold, weighted_lasso,
    LassoFit, LassoOptions,
};
pub use lstsq::least_squares;
pub use omp::{omp, omp_cv, OmpCvOptions, OmpCvResult, OmpResult};

