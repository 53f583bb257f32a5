//! Comparison estimators: lasso with a cross-validated path, IV-Lasso
//! (2SLS on the lasso support with synthetic instruments), and the U-hat
//! variants that regress out estimated confounders.

use crate::dataset::Dataset;
use crate::error::{Result, SivError};
use crate::factor::FactorEstimate;
use crate::gmm::{LinkFamily, NlSolver};
use crate::linalg;
use crate::subset;
use nalgebra::{DMatrix, DVector};

const CD_TOL: f64 = 1e-9;
const CD_MAX_SWEEPS: usize = 200;
pub const LASSO_GRID_LEN: usize = 100;
/// Path floor ratio λ_min/λ_max; the looser floor applies when p ≥ n,
/// where the tail of the path interpolates and coordinate descent crawls.
pub const LASSO_GRID_FLOOR: f64 = 1e-4;
pub const LASSO_GRID_FLOOR_WIDE: f64 = 1e-2;

#[derive(Debug, Clone, serde::Serialize)]
pub struct LambdaCv {
    pub lambda: f64,
    pub mean_error: f64,
    pub sd: f64,
}

/// Lasso solution path. `betas` holds one column per lambda, on the
/// original (unstandardized) scale; `scales` are the column norms used for
/// internal standardization so the KKT conditions of the solved problem
/// can be reconstructed.
#[derive(Debug, Clone)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub betas: DMatrix<f64>,
    pub cv_errors: Vec<LambdaCv>,
    pub scales: Vec<f64>,
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent along a descending lambda path with warm
/// starts, in Gram ("covariance update") form: `gram` = X̃ᵀX̃/n with unit
/// diagonal (standardized columns), `xty` = X̃ᵀY/n. Sweeps cost O(p²)
/// independent of n. Returns one solution per lambda on the standardized
/// scale.
fn cd_path_gram(gram: &DMatrix<f64>, xty: &DVector<f64>, lambdas: &[f64]) -> DMatrix<f64> {
    let p = gram.nrows();
    let mut beta = DVector::<f64>::zeros(p);
    // grad[j] = x̃ⱼᵀ(Y − X̃β)/n, maintained incrementally.
    let mut grad = xty.clone();
    let mut out = DMatrix::zeros(p, lambdas.len());
    for (l, &lam) in lambdas.iter().enumerate() {
        let mut sweeps = 0usize;
        // Full sweep, then cycle the active set to convergence on its own
        // extracted Gram block, then a full sweep to verify nothing
        // re-enters.
        loop {
            let mut full_change = 0.0f64;
            for j in 0..p {
                let old = beta[j];
                let new = soft_threshold(old + grad[j], lam);
                if new != old {
                    let d = new - old;
                    grad.axpy(-d, &gram.column(j), 1.0);
                    beta[j] = new;
                    full_change = full_change.max(d.abs());
                }
            }
            sweeps += 1;
            if full_change <= CD_TOL || sweeps >= CD_MAX_SWEEPS {
                break;
            }
            let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
            let a = active.len();
            if a == 0 {
                continue;
            }
            // Restricted problem: updates cost O(|A|) instead of O(p).
            let ga = DMatrix::from_fn(a, a, |r, c| gram[(active[r], active[c])]);
            let mut grad_a = DVector::from_fn(a, |r, _| grad[active[r]]);
            let mut beta_a = DVector::from_fn(a, |r, _| beta[active[r]]);
            let beta_a0 = beta_a.clone();
            while sweeps < CD_MAX_SWEEPS {
                let mut change = 0.0f64;
                for r in 0..a {
                    let old = beta_a[r];
                    let new = soft_threshold(old + grad_a[r], lam);
                    if new != old {
                        let d = new - old;
                        grad_a.axpy(-d, &ga.column(r), 1.0);
                        beta_a[r] = new;
                        change = change.max(d.abs());
                    }
                }
                sweeps += 1;
                if change <= CD_TOL {
                    break;
                }
            }
            // Fold the phase's net coefficient moves back into the full
            // gradient in one O(p·|A|) pass.
            let delta = &beta_a - beta_a0;
            for r in 0..a {
                if delta[r] != 0.0 {
                    grad.axpy(-delta[r], &gram.column(active[r]), 1.0);
                }
                beta[active[r]] = beta_a[r];
            }
        }
        out.set_column(l, &beta);
    }
    out
}

/// Standardized Gram inputs from raw (centered) cross-products: `g` = XᵀX
/// restricted to the fold, `c` = XᵀY, `n` rows. Returns (gram, xty, scales).
fn standardized_gram(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    n: usize,
) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
    let p = g.nrows();
    let nf = n as f64;
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let s = (g[(j, j)] / nf).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let gram = DMatrix::from_fn(p, p, |j, m| g[(j, m)] / (scales[j] * scales[m] * nf));
    let xty = DVector::from_fn(p, |j, _| c[j] / (scales[j] * nf));
    (gram, xty, scales)
}

fn default_lambda_grid(xty_std: &DVector<f64>, wide: bool) -> Vec<f64> {
    let lam_max = xty_std
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let floor = if wide {
        LASSO_GRID_FLOOR_WIDE
    } else {
        LASSO_GRID_FLOOR
    };
    let lam_min = floor * lam_max;
    let ratio = (lam_min / lam_max).ln() / (LASSO_GRID_LEN as f64 - 1.0);
    (0..LASSO_GRID_LEN)
        .map(|i| lam_max * (ratio * i as f64).exp())
        .collect()
}

/// Lasso with the tuning parameter selected by k-fold cross-validation on
/// held-out squared error. Returns the selected coefficient vector (on the
/// original scale) and the full path.
pub fn lasso_cd(
    data: &Dataset,
    lambda_grid: Option<Vec<f64>>,
    folds: usize,
    seed: u64,
) -> Result<(DVector<f64>, LassoPath)> {
    let n = data.n();
    let p = data.p();
    if folds < 2 || n < 2 * folds {
        return Err(SivError::Dimension(format!(
            "need 2 <= folds <= n/2, got folds={folds}, n={n}"
        )));
    }
    // Raw cross-products once; fold Grams by subtracting validation blocks.
    let g_full = data.x.transpose() * &data.x;
    let c_full = data.x.transpose() * &data.y;
    let (gram_full, xty_full, scales) = standardized_gram(&g_full, &c_full, n);
    let mut lambdas = lambda_grid.unwrap_or_else(|| default_lambda_grid(&xty_full, p >= n));
    if lambdas.is_empty() || lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(SivError::InvalidInput(
            "lambda grid must be nonempty, finite, nonnegative".to_string(),
        ));
    }
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let fold_of = subset::fold_assignment(n, folds, seed);
    let nl = lambdas.len();
    let mut errs = vec![vec![0.0f64; folds]; nl];
    for f in 0..folds {
        let val: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let x_val = DMatrix::from_fn(val.len(), p, |i, j| data.x[(val[i], j)]);
        let y_val = DVector::from_fn(val.len(), |i, _| data.y[val[i]]);
        let g_tr = &g_full - x_val.transpose() * &x_val;
        let c_tr = &c_full - x_val.transpose() * &y_val;
        let (gram_tr, xty_tr, tr_scales) = standardized_gram(&g_tr, &c_tr, n - val.len());
        let path = cd_path_gram(&gram_tr, &xty_tr, &lambdas);
        // Validation predictions on the original scale.
        let beta_orig = DMatrix::from_fn(p, nl, |j, l| path[(j, l)] / tr_scales[j]);
        let preds = &x_val * &beta_orig;
        for l in 0..nl {
            let mut sse = 0.0;
            for (i, _) in val.iter().enumerate() {
                let r = y_val[i] - preds[(i, l)];
                sse += r * r;
            }
            errs[l][f] = sse / val.len() as f64;
        }
    }
    let cv_errors: Vec<LambdaCv> = lambdas
        .iter()
        .zip(errs.iter())
        .map(|(&lambda, row)| {
            let m = row.iter().sum::<f64>() / folds as f64;
            let var =
                row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (folds as f64 - 1.0);
            LambdaCv {
                lambda,
                mean_error: m,
                sd: var.sqrt(),
            }
        })
        .collect();
    let best = cv_errors
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_error.partial_cmp(&b.1.mean_error).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    let path_std = cd_path_gram(&gram_full, &xty_full, &lambdas);
    let mut betas = DMatrix::zeros(p, nl);
    for l in 0..nl {
        for j in 0..p {
            betas[(j, l)] = path_std[(j, l)] / scales[j];
        }
    }
    let beta = betas.column(best).into_owned();
    Ok((
        beta,
        LassoPath {
            lambdas,
            betas,
            cv_errors,
            scales,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct IvLassoFit {
    pub beta: DVector<f64>,
    pub support: Vec<usize>,
    pub warnings: Vec<String>,
}

/// IV-Lasso: select predictors with the lasso, then 2SLS of Y on the
/// selected exposures using the synthetic instruments. Over-selected
/// supports are truncated to the instrument rank, keeping the largest
/// lasso coefficients.
pub fn iv_lasso(data: &Dataset, siv: &DMatrix<f64>) -> Result<IvLassoFit> {
    let (lasso_beta, _) = lasso_cd(data, None, 10, 0)?;
    iv_lasso_with(data, siv, &lasso_beta)
}

/// `iv_lasso` with a precomputed first-stage lasso solution.
pub fn iv_lasso_with(
    data: &Dataset,
    siv: &DMatrix<f64>,
    lasso_beta: &DVector<f64>,
) -> Result<IvLassoFit> {
    if siv.nrows() != data.n() {
        return Err(SivError::Dimension(format!(
            "siv has {} rows, data has {}",
            siv.nrows(),
            data.n()
        )));
    }
    let mut warnings = Vec::new();
    let mut support: Vec<usize> = (0..data.p()).filter(|&j| lasso_beta[j] != 0.0).collect();
    let p = data.p();
    if support.is_empty() {
        return Ok(IvLassoFit {
            beta: DVector::zeros(p),
            support,
            warnings,
        });
    }
    let (q_basis, rank) = linalg::colspace_basis(siv);
    if support.len() > rank {
        warnings.push(format!(
            "lasso selected {} exposures but instrument rank is {rank}; keeping the largest coefficients",
            support.len()
        ));
        support.sort_by(|&a, &b| {
            lasso_beta[b]
                .abs()
                .partial_cmp(&lasso_beta[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        support.truncate(rank);
        support.sort_unstable();
    }
    // 2SLS normal equations in the projected space: min ‖Qᵀ(Y − X_Aβ)‖²
    let xa = DMatrix::from_fn(data.n(), support.len(), |i, c| data.x[(i, support[c])]);
    let z = q_basis.transpose() * &xa;
    let w = q_basis.transpose() * &data.y;
    let coef = linalg::lstsq(&z, &w);
    let mut beta = DVector::zeros(p);
    for (c, &j) in support.iter().enumerate() {
        beta[j] = coef[c];
    }
    Ok(IvLassoFit {
        beta,
        support,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UhatTransform {
    Identity,
    Cube,
}

#[derive(Debug, Clone)]
pub struct UhatFit {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub objective: f64,
    pub warnings: Vec<String>,
}

/// Û = X Ĉov(X)⁻¹ Λ̂. In high dimensions (n ≤ p) the sample covariance is
/// singular, so the factor-implied covariance Λ̂Λ̂ᵀ + D̂ is inverted via
/// Woodbury instead.
pub fn uhat_matrix(data: &Dataset, fe: &FactorEstimate) -> Result<DMatrix<f64>> {
    let n = data.n();
    let p = data.p();
    if fe.loadings.nrows() != p {
        return Err(SivError::Dimension(format!(
            "loadings have {} rows, data has {p} columns",
            fe.loadings.nrows()
        )));
    }
    if fe.q_hat == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let lam = &fe.loadings;
    let cov_inv_lam = if n > p {
        let s = data.x.transpose() * &data.x / (n as f64 - 1.0);
        linalg::solve_psd_matrix(&s) * lam
    } else {
        // Woodbury: (D + ΛΛᵀ)⁻¹Λ = D⁻¹Λ (I + ΛᵀD⁻¹Λ)⁻¹
        let sample_var: Vec<f64> = (0..p)
            .map(|j| data.x.column(j).norm_squared() / (n as f64 - 1.0))
            .collect();
        let d: Vec<f64> = match &fe.uniquenesses {
            Some(u) => u.iter().copied().collect(),
            None => (0..p)
                .map(|j| {
                    let communality = lam.row(j).norm_squared();
                    (sample_var[j] - communality).max(1e-6 * sample_var[j].max(1e-12))
                })
                .collect(),
        };
        let q = fe.q_hat;
        let mut dinv_lam = lam.clone();
        for j in 0..p {
            for c in 0..q {
                dinv_lam[(j, c)] /= d[j];
            }
        }
        let cap = DMatrix::identity(q, q) + lam.transpose() * &dinv_lam;
        dinv_lam * linalg::solve_psd_matrix(&cap)
    };
    Ok(&data.x * cov_inv_lam)
}

/// Joint sparse fit of Y on f(X;β) plus estimated confounders: minimize
/// ‖Y − f(X;β) − T(Û)γ‖² subject to ‖β‖₀ ≤ k, with γ unpenalized. Uses the
/// same Gauss–Newton/splicing solvers as the nonlinear synthetic-GMM fit.
pub fn uhat_fit(
    data: &Dataset,
    fe: &FactorEstimate,
    link: &LinkFamily,
    transform: UhatTransform,
    k: usize,
) -> Result<UhatFit> {
    let mut u = uhat_matrix(data, fe)?;
    if transform == UhatTransform::Cube {
        u.apply(|v| *v = *v * *v * *v);
    }
    let extra = if u.ncols() > 0 { Some(&u) } else { None };
    let solver = NlSolver {
        x: &data.x,
        y: &data.y,
        link,
        transform: None,
        extra,
    };
    let fit = solver.fit_k(k, 2, 50);
    Ok(UhatFit {
        beta: fit.beta,
        gamma: fit.gamma,
        objective: fit.objective,
        warnings: fit.warnings,
    })
}

/// U-hat with k chosen by cross-validated held-out squared error.
pub fn uhat_fit_cv(
    data: &Dataset,
    fe: &FactorEstimate,
    link: &LinkFamily,
    transform: UhatTransform,
    k_max: usize,
    folds: usize,
    seed: u64,
) -> Result<(UhatFit, usize)> {
    let n = data.n();
    if folds < 2 || n < 2 * folds {
        return Err(SivError::Dimension(format!(
            "need 2 <= folds <= n/2, got folds={folds}, n={n}"
        )));
    }
    let mut u = uhat_matrix(data, fe)?;
    if transform == UhatTransform::Cube {
        u.apply(|v| *v = *v * *v * *v);
    }
    let p = data.p();
    let fold_of = subset::fold_assignment(n, folds, seed);
    let k_top = k_max.min(p);
    let mut losses = vec![vec![0.0f64; folds]; k_top + 1];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let val: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let x_tr = DMatrix::from_fn(train.len(), p, |i, j| data.x[(train[i], j)]);
        let y_tr = DVector::from_fn(train.len(), |i, _| data.y[train[i]]);
        let u_tr = DMatrix::from_fn(train.len(), u.ncols(), |i, j| u[(train[i], j)]);
        let extra = if u_tr.ncols() > 0 { Some(&u_tr) } else { None };
        let solver = NlSolver {
            x: &x_tr,
            y: &y_tr,
            link,
            transform: None,
            extra,
        };
        for k in 0..=k_top {
            let fit = solver.fit_k(k, 2, 50);
            let mut sse = 0.0;
            for &i in &val {
                let row: Vec<f64> = (0..p).map(|j| data.x[(i, j)]).collect();
                let mut pred = link.eval_row(&row, &fit.beta);
                for c in 0..u.ncols() {
                    pred += u[(i, c)] * fit.gamma[c];
                }
                let r = data.y[i] - pred;
                sse += r * r;
            }
            losses[k][f] = sse / val.len() as f64;
        }
    }
    let table: Vec<subset::CvRow> = losses
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let m = row.iter().sum::<f64>() / folds as f64;
            let var =
                row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (folds as f64 - 1.0);
            subset::CvRow {
                k,
                mean_loss: m,
                sd: var.sqrt(),
            }
        })
        .collect();
    let best = subset::select_k_one_se(&table, folds);
    let fit = uhat_fit(data, fe, link, transform, best)?;
    Ok((fit, best))
}
