//! Latent factor estimation: number of factors, loading matrix, and the
//! orthogonal complement of the loading column space.

use crate::dataset::Dataset;
use crate::error::{Result, SivError};
use crate::linalg;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LoadingMethod {
    Pca,
    Mle,
}

/// Estimated factor structure of the exposure matrix.
#[derive(Debug, Clone)]
pub struct FactorEstimate {
    pub q_hat: usize,
    /// p × q_hat loading matrix.
    pub loadings: DMatrix<f64>,
    /// Descending eigenvalues of XᵀX/(n−1), length min(n,p).
    pub eigenvalues: DVector<f64>,
    pub method: LoadingMethod,
    /// Diagonal uniqueness estimate from the MLE branch.
    pub uniquenesses: Option<DVector<f64>>,
    pub log_likelihood: Option<f64>,
    pub warnings: Vec<String>,
}

/// Semi-orthogonal basis of the orthogonal complement of the loadings.
#[derive(Debug, Clone)]
pub struct ComplementBasis {
    /// p × (p − q_hat), BᵀB = I.
    pub b: DMatrix<f64>,
}

/// Default search bound for the number of factors.
pub fn default_q_max(n: usize, p: usize) -> usize {
    20usize.min(n.min(p) / 3)
}

/// Eigenvalue-differences estimator for the number of latent factors.
///
/// Iterates: fit a line of the five eigenvalues past the current bound
/// against (index)^{2/3}, set the gap threshold to twice the absolute slope,
/// and pick the largest index whose eigenvalue gap clears it. The bound is
/// then re-centered just past the pick until a fixed point (at most 10
/// rounds).
pub fn estimate_num_factors(data: &Dataset, q_max: usize) -> Result<usize> {
    let (n, p) = (data.n(), data.p());
    let m = n.min(p);
    if q_max == 0 || q_max + 6 > m {
        return Err(SivError::Dimension(format!(
            "q_max={q_max} out of range for min(n,p)={m}; need 1 <= q_max <= min(n,p)-6"
        )));
    }
    let (eigs, _) = linalg::sample_cov_eigen(&data.x);
    estimate_num_factors_from_eigenvalues(eigs.as_slice(), q_max)
}

pub(crate) fn estimate_num_factors_from_eigenvalues(eigs: &[f64], q_max: usize) -> Result<usize> {
    let lam1 = eigs[0];
    if lam1 <= 1e-300 {
        return Err(SivError::DegenerateInput(
            "sample covariance is identically zero".to_string(),
        ));
    }
    let mut bound = q_max;
    let mut q_hat = 0usize;
    for _ in 0..10 {
        // OLS slope of λ_{bound+1..bound+5} on (bound+j−1)^{2/3}, j=1..5.
        let xs: Vec<f64> = (0..5).map(|j| ((bound + j) as f64).powf(2.0 / 3.0)).collect();
        let ys: Vec<f64> = (0..5).map(|j| eigs[bound + j]).collect();
        let xm = xs.iter().sum::<f64>() / 5.0;
        let ym = ys.iter().sum::<f64>() / 5.0;
        let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let slope = sxy / sxx;
        // Floor keeps exactly rank-deficient spectra from accepting every gap.
        let delta = (2.0 * slope.abs()).max(1e-10 * lam1);
        q_hat = 0;
        for j in 1..=bound {
            if eigs[j - 1] - eigs[j] >= delta {
                q_hat = j;
            }
        }
        let next = (q_hat + 1).min(q_max);
        if next == bound {
            break;
        }
        bound = next;
    }
    Ok(q_hat)
}

/// PCA loading estimate: column j is √λ̂ⱼ · ξ̂ⱼ with the largest-magnitude
/// entry of each eigenvector flipped positive.
pub fn estimate_loadings_pca(data: &Dataset, q: usize) -> Result<FactorEstimate> {
    let (n, p) = (data.n(), data.p());
    let m = n.min(p);
    if q < 1 || q > m - 1 {
        return Err(SivError::Dimension(format!(
            "q={q} out of range; need 1 <= q <= min(n,p)-1 = {}",
            m - 1
        )));
    }
    let (eigs, mut vecs) = linalg::sample_cov_eigen(&data.x);
    if eigs[q - 1] <= 1e-12 {
        return Err(SivError::DegenerateInput(format!(
            "requested rank {q} exceeds numerical rank (λ_{q} = {:.3e})",
            eigs[q - 1]
        )));
    }
    linalg::fix_column_signs(&mut vecs);
    let mut loadings = DMatrix::zeros(p, q);
    for j in 0..q {
        let col = vecs.column(j) * eigs[j].sqrt();
        loadings.set_column(j, &col);
    }
    Ok(FactorEstimate {
        q_hat: q,
        loadings,
        eigenvalues: eigs,
        method: LoadingMethod::Pca,
        uniquenesses: None,
        log_likelihood: None,
        warnings: Vec::new(),
    })
}

/// Gaussian factor-analysis log-likelihood per the Woodbury identity;
/// `psi` diagonal, `lam` p×q.
fn fa_log_likelihood(s: &DMatrix<f64>, lam: &DMatrix<f64>, psi: &DVector<f64>, n: usize) -> f64 {
    let p = s.nrows();
    let q = lam.ncols();
    let half_n = n as f64 / 2.0;
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    if q == 0 {
        let mut logdet = 0.0;
        let mut tr = 0.0;
        for i in 0..p {
            logdet += psi[i].ln();
            tr += s[(i, i)] / psi[i];
        }
        return -half_n * (p as f64 * log2pi + logdet + tr);
    }
    // A = Ψ⁻¹Λ, M = (I + ΛᵀA)⁻¹.
    let mut a = lam.clone();
    for i in 0..p {
        for j in 0..q {
            a[(i, j)] /= psi[i];
        }
    }
    let cap = DMatrix::identity(q, q) + lam.transpose() * &a;
    let cap_chol = nalgebra::Cholesky::new(cap.clone()).expect("capacitance matrix must be SPD");
    let logdet_cap = 2.0 * (0..q).map(|i| cap_chol.l()[(i, i)].ln()).sum::<f64>();
    let logdet = psi.iter().map(|v| v.ln()).sum::<f64>() + logdet_cap;
    let m = cap_chol.inverse();
    // tr(Σ⁻¹S) = tr(Ψ⁻¹S) − tr(M AᵀS A)
    let asa = a.transpose() * s * &a;
    let mut tr = 0.0;
    for i in 0..p {
        tr += s[(i, i)] / psi[i];
    }
    tr -= (&m * &asa).trace();
    -half_n * (p as f64 * log2pi + logdet + tr)
}

/// Maximum likelihood loadings via EM, for the low-dimensional branch
/// (n > p). Initialized from PCA; uniquenesses floored at 1e−6·var(Xᵢ)
/// with a Heywood warning when the floor binds.
pub fn estimate_loadings_mle(data: &Dataset, q: usize) -> Result<FactorEstimate> {
    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(SivError::Dimension(format!(
            "MLE branch requires n > p, got n={n}, p={p}"
        )));
    }
    let s = data.x.transpose() * &data.x / (n as f64 - 1.0);
    let (eigs, vecs) = linalg::sample_cov_eigen(&data.x);
    let floor: DVector<f64> = DVector::from_fn(p, |i, _| 1e-6 * s[(i, i)].max(1e-300));
    let mut warnings = Vec::new();

    if q == 0 {
        let psi = DVector::from_fn(p, |i, _| s[(i, i)]);
        let ll = fa_log_likelihood(&s, &DMatrix::zeros(p, 0), &psi, n);
        return Ok(FactorEstimate {
            q_hat: 0,
            loadings: DMatrix::zeros(p, 0),
            eigenvalues: eigs,
            method: LoadingMethod::Mle,
            uniquenesses: Some(psi),
            log_likelihood: Some(ll),
            warnings,
        });
    }
    if q > p - 1 {
        return Err(SivError::Dimension(format!(
            "q={q} out of range; need q <= p-1 = {}",
            p - 1
        )));
    }
    if eigs[q - 1] <= 1e-12 {
        return Err(SivError::DegenerateInput(format!(
            "requested rank {q} exceeds numerical rank (λ_{q} = {:.3e})",
            eigs[q - 1]
        )));
    }

    // PCA initialization.
    let mut sorted_vecs = vecs;
    linalg::fix_column_signs(&mut sorted_vecs);
    let mut lam = DMatrix::zeros(p, q);
    for j in 0..q {
        lam.set_column(j, &(sorted_vecs.column(j) * eigs[j].sqrt()));
    }
    let mut psi = DVector::from_fn(p, |i, _| {
        let implied: f64 = (0..q).map(|j| lam[(i, j)] * lam[(i, j)]).sum();
        (s[(i, i)] - implied).max(floor[i])
    });

    let tol = 1e-8;
    let max_iter = 1000;
    let mut ll_prev = fa_log_likelihood(&s, &lam, &psi, n);
    let mut converged = false;
    for _ in 0..max_iter {
        // E-step via Woodbury: β = M Aᵀ with A = Ψ⁻¹Λ, M = (I + ΛᵀA)⁻¹.
        let mut a = lam.clone();
        for i in 0..p {
            for j in 0..q {
                a[(i, j)] /= psi[i];
            }
        }
        let cap = DMatrix::identity(q, q) + lam.transpose() * &a;
        let m = nalgebra::Cholesky::new(cap)
            .ok_or_else(|| SivError::Convergence("EM capacitance matrix not SPD".to_string()))?
            .inverse();
        let beta = &m * a.transpose(); // q×p
        let beta_s = &beta * &s; // q×p
        let ezz = DMatrix::identity(q, q) - &beta * &lam + &beta_s * beta.transpose();
        // M-step.
        let ezz_inv = linalg::solve_psd_matrix(&ezz);
        let lam_new = beta_s.transpose() * &ezz_inv;
        let mut clamped = false;
        let psi_new = DVector::from_fn(p, |i, _| {
            let fitted: f64 = (0..q).map(|j| lam_new[(i, j)] * beta_s[(j, i)]).sum();
            let v = s[(i, i)] - fitted;
            if v < floor[i] {
                clamped = true;
                floor[i]
            } else {
                v
            }
        });
        if clamped && warnings.is_empty() {
            warnings.push("Heywood case: uniqueness clamped at floor".to_string());
        }
        lam = lam_new;
        psi = psi_new;
        let ll = fa_log_likelihood(&s, &lam, &psi, n);
        let rel = (ll - ll_prev).abs() / ll_prev.abs().max(1.0);
        ll_prev = ll;
        if rel <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SivError::Convergence(format!(
            "EM did not reach relative tolerance {tol} within {max_iter} iterations"
        )));
    }
    linalg::fix_column_signs(&mut lam);
    Ok(FactorEstimate {
        q_hat: q,
        loadings: lam,
        eigenvalues: eigs,
        method: LoadingMethod::Mle,
        uniquenesses: Some(psi),
        log_likelihood: Some(ll_prev),
        warnings,
    })
}

/// Per-iteration log-likelihood trace of the EM loop, for monotonicity
/// checks; runs exactly `iters` iterations from the PCA initialization.
pub fn em_loglik_trace(data: &Dataset, q: usize, iters: usize) -> Result<Vec<f64>> {
    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(SivError::Dimension(format!(
            "MLE branch requires n > p, got n={n}, p={p}"
        )));
    }
    if q == 0 || q > p - 1 {
        return Err(SivError::Dimension(format!("q={q} out of range")));
    }
    let s = data.x.transpose() * &data.x / (n as f64 - 1.0);
    let (eigs, vecs) = linalg::sample_cov_eigen(&data.x);
    if eigs[q - 1] <= 1e-12 {
        return Err(SivError::DegenerateInput("rank too low".to_string()));
    }
    let floor: DVector<f64> = DVector::from_fn(p, |i, _| 1e-6 * s[(i, i)].max(1e-300));
    let mut sorted_vecs = vecs;
    linalg::fix_column_signs(&mut sorted_vecs);
    let mut lam = DMatrix::zeros(p, q);
    for j in 0..q {
        lam.set_column(j, &(sorted_vecs.column(j) * eigs[j].sqrt()));
    }
    let mut psi = DVector::from_fn(p, |i, _| {
        let implied: f64 = (0..q).map(|j| lam[(i, j)] * lam[(i, j)]).sum();
        (s[(i, i)] - implied).max(floor[i])
    });
    let mut trace = vec![fa_log_likelihood(&s, &lam, &psi, n)];
    for _ in 0..iters {
        let mut a = lam.clone();
        for i in 0..p {
            for j in 0..q {
                a[(i, j)] /= psi[i];
            }
        }
        let cap = DMatrix::identity(q, q) + lam.transpose() * &a;
        let m = nalgebra::Cholesky::new(cap)
            .ok_or_else(|| SivError::Convergence("EM capacitance matrix not SPD".to_string()))?
            .inverse();
        let beta = &m * a.transpose();
        let beta_s = &beta * &s;
        let ezz = DMatrix::identity(q, q) - &beta * &lam + &beta_s * beta.transpose();
        let ezz_inv = linalg::solve_psd_matrix(&ezz);
        let lam_new = beta_s.transpose() * &ezz_inv;
        let psi_new = DVector::from_fn(p, |i, _| {
            let fitted: f64 = (0..q).map(|j| lam_new[(i, j)] * beta_s[(j, i)]).sum();
            (s[(i, i)] - fitted).max(floor[i])
        });
        lam = lam_new;
        psi = psi_new;
        trace.push(fa_log_likelihood(&s, &lam, &psi, n));
    }
    Ok(trace)
}

/// Semi-orthogonal basis of the orthogonal complement of the loading
/// columns. Deterministic given the loadings.
pub fn null_space_basis(f: &FactorEstimate) -> Result<ComplementBasis> {
    let p = f.loadings.nrows();
    if f.q_hat >= p && f.q_hat > 0 {
        return Err(SivError::Rank(format!(
            "q_hat={} leaves no complement in dimension p={p}",
            f.q_hat
        )));
    }
    if f.q_hat == 0 {
        return Ok(ComplementBasis {
            b: DMatrix::identity(p, p),
        });
    }
    // Full-column-rank guard: smallest singular value relative to largest.
    let svd = f.loadings.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::MAX, f64::min);
    if smin <= 1e-10 * smax {
        return Err(SivError::Rank(
            "loading matrix is not full column rank".to_string(),
        ));
    }
    let b = linalg::orthonormal_complement(&f.loadings).map_err(SivError::Rank)?;
    Ok(ComplementBasis { b })
}
