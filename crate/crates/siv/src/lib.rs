//! Sparse causal effect estimation under unmeasured confounding via
//! synthetic instruments: factor-model fitting, instrument construction
//! from the loading null space, two-stage ℓ0-regularized regression with an
//! identifiability verdict, a nonlinear GMM extension, reference baselines,
//! and a Monte Carlo harness.

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod factor;
pub mod gmm;
pub mod linalg;
pub mod sim;
pub mod subset;

pub use dataset::Dataset;
pub use error::{Result, SivError};
pub use estimator::{build_siv, fit_siv, FitOptions, FitResult, SivBundle};
pub use factor::{
    estimate_loadings_mle, estimate_loadings_pca, estimate_num_factors, null_space_basis,
    ComplementBasis, FactorEstimate, LoadingMethod,
};
pub use gmm::{fit_nonlinear_siv, gmm_loss, weight_matrix, GmmProblem, LinkFamily, LinkKind};
pub use subset::{best_subset_exhaustive, best_subset_splicing, cross_validate_k};
