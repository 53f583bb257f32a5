//! Synthetic-instrument construction and the two-stage regularized
//! regression pipeline with its identifiability verdict.

use crate::dataset::Dataset;
use crate::error::{Result, SivError};
use crate::factor::{self, ComplementBasis, FactorEstimate, LoadingMethod};
use crate::linalg;
use crate::subset::{self, CvRow, GramProblem, SpliceOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Synthetic instruments and the first-stage projected design.
#[derive(Debug, Clone)]
pub struct SivBundle {
    /// n × (p − q̂) instrument matrix X·B.
    pub siv: DMatrix<f64>,
    /// First-stage fitted exposures Π_SIV · X.
    pub x_hat: DMatrix<f64>,
    pub projector_rank: usize,
    /// Set when rank(siv) fell short of p − q̂; projection used the
    /// effective rank.
    pub rank_deficient: bool,
}

/// Outcome of the two-stage fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub support: Vec<usize>,
    pub k_hat: usize,
    pub cv_table: Vec<CvRow>,
    pub identifiable: bool,
    pub q_hat: usize,
    pub diagnostics: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Force the number of factors instead of estimating it.
    pub q: Option<usize>,
    /// Force the sparsity level, skipping cross-validation.
    pub k: Option<usize>,
    /// Override the top of the k grid.
    pub k_max: Option<usize>,
    pub folds: usize,
    pub seed: u64,
    /// Override the loading estimator (default: MLE when n > p, else PCA).
    pub method: Option<LoadingMethod>,
    pub q_max: Option<usize>,
    pub force_splicing: bool,
    pub splice: SpliceOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            q: None,
            k: None,
            k_max: None,
            folds: 10,
            seed: 0,
            method: None,
            q_max: None,
            force_splicing: false,
            splice: SpliceOptions::default(),
        }
    }
}

/// Build the synthetic instruments SIV = X·B and the first-stage projection
/// X̂ = Π_SIV X.
pub fn build_siv(data: &Dataset, basis: &ComplementBasis) -> Result<SivBundle> {
    let p = data.p();
    if basis.b.nrows() != p {
        return Err(SivError::Dimension(format!(
            "basis has {} rows, exposures have p={p} columns",
            basis.b.nrows()
        )));
    }
    let siv = &data.x * &basis.b;
    let (q_basis, rank) = linalg::colspace_basis(&siv);
    let x_hat = &q_basis * (q_basis.transpose() * &data.x);
    let rank_deficient = rank < siv.ncols();
    Ok(SivBundle {
        siv,
        x_hat,
        projector_rank: rank,
        rank_deficient,
    })
}

/// Default k grid top: Theorem-1 bound p−q̂, tempered by n/2 and a hard cap.
pub fn default_k_max(n: usize, p: usize, q_hat: usize) -> usize {
    (p - q_hat).min(n / 2).min(50)
}

/// Shared first half of the pipeline: factor count, loadings (MLE when
/// n > p, PCA otherwise, unless overridden), and the orthogonal-complement
/// basis. Exposed so baselines built on the same instruments reuse it.
pub fn estimate_structure(
    data: &Dataset,
    opts: &FitOptions,
    mut diagnostics: Option<&mut BTreeMap<String, String>>,
) -> Result<(usize, Option<crate::factor::FactorEstimate>, ComplementBasis)> {
    let (n, p) = (data.n(), data.p());
    let q_hat = match opts.q {
        Some(q) => {
            if q >= p {
                return Err(SivError::Dimension(format!("forced q={q} must be < p={p}")));
            }
            q
        }
        None => {
            let cap = n.min(p).saturating_sub(6);
            let q_max = opts.q_max.unwrap_or_else(|| factor::default_q_max(n, p)).min(cap);
            if q_max == 0 {
                if let Some(d) = diagnostics.as_deref_mut() {
                    d.insert(
                        "q_estimation".to_string(),
                        "sample too small for factor-count estimation; q̂ = 0".to_string(),
                    );
                }
                0
            } else {
                factor::estimate_num_factors(data, q_max)?
            }
        }
    };
    if q_hat == 0 {
        return Ok((0, None, ComplementBasis { b: DMatrix::identity(p, p) }));
    }
    let method = opts
        .method
        .unwrap_or(if n > p { LoadingMethod::Mle } else { LoadingMethod::Pca });
    let fe = match method {
        LoadingMethod::Mle => factor::estimate_loadings_mle(data, q_hat)?,
        LoadingMethod::Pca => factor::estimate_loadings_pca(data, q_hat)?,
    };
    if let Some(d) = diagnostics.as_deref_mut() {
        for w in &fe.warnings {
            d.insert("loading_warning".to_string(), w.clone());
        }
        d.insert(
            "loading_method".to_string(),
            format!("{:?}", fe.method).to_lowercase(),
        );
    }
    let b = factor::null_space_basis(&fe)?;
    Ok((q_hat, Some(fe), b))
}

/// The synthetic two-stage regularized regression: estimate q̂, fit
/// loadings (MLE when n > p, PCA otherwise), build instruments, select k by
/// cross-validation, refit on the full data, and emit the identifiability
/// verdict q̂ + k̂ < p.
pub fn fit_siv(data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    let (n, p) = (data.n(), data.p());
    let mut diagnostics = BTreeMap::new();
    let (q_hat, factor_est, basis) = estimate_structure(data, opts, Some(&mut diagnostics))?;
    let _ = &factor_est;

    // Steps 3–4: instruments and first stage.
    let bundle = build_siv(data, &basis)?;
    if bundle.rank_deficient {
        diagnostics.insert(
            "rank_warning".to_string(),
            format!(
                "rank(SIV)={} below p−q̂={}; projection uses effective rank",
                bundle.projector_rank,
                p - q_hat
            ),
        );
    }
    let siv_gram = bundle.siv.transpose() * &bundle.siv / n as f64;
    diagnostics.insert(
        "siv_gram_condition".to_string(),
        format!("{:.6e}", linalg::psd_condition(&siv_gram)),
    );

    // Steps 5–6: second stage with CV-selected sparsity.
    let gram = GramProblem::from_data(&bundle.x_hat, &data.y);
    let (k_hat, cv_table) = match opts.k {
        Some(k) => (k, Vec::new()),
        None => {
            let k_top = opts
                .k_max
                .unwrap_or_else(|| default_k_max(n, p, q_hat))
                .min(p);
            let k_grid: Vec<usize> = (0..=k_top).collect();
            subset::cross_validate_k_opts(
                &bundle.x_hat,
                &data.y,
                &k_grid,
                opts.folds,
                opts.seed,
                opts.force_splicing,
                &opts.splice,
            )?
        }
    };
    let fit = gram.fit_l0(k_hat, opts.force_splicing, &opts.splice);
    for w in &fit.warnings {
        diagnostics.insert("splicing_warning".to_string(), w.clone());
    }
    diagnostics.insert("in_sample_loss".to_string(), format!("{:.6e}", fit.loss));

    let identifiable = q_hat + k_hat < p;
    Ok(FitResult {
        beta: fit.beta,
        support: fit.support,
        k_hat,
        cv_table,
        identifiable,
        q_hat,
        diagnostics,
    })
}

/// Sampled diagnostic for the invertibility condition on q×q submatrices of
/// Cov⁻¹(X)·Λ̂. Advisory only; exhaustive verification over C(p,q) subsets
/// is infeasible.
#[derive(Debug, Clone)]
pub struct ConditionA1Report {
    pub trials: usize,
    pub min_abs_det: Option<f64>,
}

pub fn sample_condition_a1_diagnostic(
    data: &Dataset,
    factor_est: &FactorEstimate,
    trials: usize,
    seed: u64,
) -> Result<ConditionA1Report> {
    let q = factor_est.q_hat;
    if q < 1 {
        return Err(SivError::InvalidInput(
            "diagnostic requires q̂ >= 1".to_string(),
        ));
    }
    if trials == 0 {
        return Ok(ConditionA1Report {
            trials: 0,
            min_abs_det: None,
        });
    }
    let n = data.n();
    let p = data.p();
    let cov = data.x.transpose() * &data.x / (n as f64 - 1.0);
    let cov_inv = linalg::solve_psd_matrix(&cov);
    let m = cov_inv * &factor_est.loadings; // p×q
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_det = f64::INFINITY;
    for _ in 0..trials {
        // q distinct rows sampled without replacement.
        let mut rows: Vec<usize> = Vec::with_capacity(q);
        while rows.len() < q {
            let r = rng.gen_range(0..p);
            if !rows.contains(&r) {
                rows.push(r);
            }
        }
        let sub = DMatrix::from_fn(q, q, |i, j| m[(rows[i], j)]);
        let det = sub.determinant().abs();
        if det < min_det {
            min_det = det;
        }
    }
    Ok(ConditionA1Report {
        trials,
        min_abs_det: Some(min_det),
    })
}
