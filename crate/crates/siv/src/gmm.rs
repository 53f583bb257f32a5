//! Nonlinear outcome models: synthetic GMM loss, the projected-residual
//! ℓ0 estimator, and the damped Gauss–Newton inner solver shared with the
//! U-hat baselines.

use crate::dataset::Dataset;
use crate::error::{Result, SivError};
use crate::estimator::{default_k_max, FitResult};
use crate::linalg;
use crate::subset::{self, CvRow};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Input clamp for the exponential link; clamping is reported in
/// diagnostics.
const EXP_CLAMP: f64 = 30.0;

const GN_MAX_ITER: usize = 200;
const GN_GRAD_TOL: f64 = 1e-10;
const GN_MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LinkKind {
    Linear,
    CubicPower,
    Exponential,
    Custom,
}

type EvalFn = dyn Fn(&[f64], &DVector<f64>) -> f64 + Send + Sync;
type JacFn = dyn Fn(&[f64], &DVector<f64>, &mut [f64]) + Send + Sync;

/// Causal link f(x; β) together with its coefficient Jacobian.
#[derive(Clone)]
pub struct LinkFamily {
    pub kind: LinkKind,
    custom_eval: Option<Arc<EvalFn>>,
    custom_jac: Option<Arc<JacFn>>,
}

impl std::fmt::Debug for LinkFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LinkFamily({:?})", self.kind)
    }
}

impl LinkFamily {
    pub fn linear() -> Self {
        Self {
            kind: LinkKind::Linear,
            custom_eval: None,
            custom_jac: None,
        }
    }

    /// f(x;β) = Σⱼ xⱼ³ βⱼ
    pub fn cubic_power() -> Self {
        Self {
            kind: LinkKind::CubicPower,
            custom_eval: None,
            custom_jac: None,
        }
    }

    /// f(x;β) = exp(xᵀβ), input clamped to ±30.
    pub fn exponential() -> Self {
        Self {
            kind: LinkKind::Exponential,
            custom_eval: None,
            custom_jac: None,
        }
    }

    /// Programmatic link: `eval(x, β)` and `jac(x, β, out)` filling ∂f/∂β.
    pub fn custom(eval: Arc<EvalFn>, jac: Arc<JacFn>) -> Self {
        Self {
            kind: LinkKind::Custom,
            custom_eval: Some(eval),
            custom_jac: Some(jac),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "linear" => Some(Self::linear()),
            "cubic" => Some(Self::cubic_power()),
            "exp" => Some(Self::exponential()),
            _ => None,
        }
    }

    pub fn eval_row(&self, x: &[f64], beta: &DVector<f64>) -> f64 {
        match self.kind {
            LinkKind::Linear => x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum(),
            LinkKind::CubicPower => x
                .iter()
                .zip(beta.iter())
                .map(|(a, b)| a * a * a * b)
                .sum(),
            LinkKind::Exponential => {
                let z: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                z.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
            }
            LinkKind::Custom => (self.custom_eval.as_ref().unwrap())(x, beta),
        }
    }

    pub fn jacobian_row(&self, x: &[f64], beta: &DVector<f64>, out: &mut [f64]) {
        match self.kind {
            LinkKind::Linear => out.copy_from_slice(x),
            LinkKind::CubicPower => {
                for (o, a) in out.iter_mut().zip(x.iter()) {
                    *o = a * a * a;
                }
            }
            LinkKind::Exponential => {
                let z: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let f = z.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
                for (o, a) in out.iter_mut().zip(x.iter()) {
                    *o = f * a;
                }
            }
            LinkKind::Custom => (self.custom_jac.as_ref().unwrap())(x, beta, out),
        }
    }

    /// f(X;β) over all rows; the flag reports whether the exponential clamp
    /// engaged anywhere. Column-wise over the nonzeros of β for the
    /// built-in links, so sparse coefficients cost O(n·‖β‖₀).
    pub fn eval_matrix(&self, x: &DMatrix<f64>, beta: &DVector<f64>) -> (DVector<f64>, bool) {
        let n = x.nrows();
        let p = x.ncols();
        if self.kind == LinkKind::Custom {
            let mut out = DVector::zeros(n);
            let mut row = vec![0.0; p];
            for i in 0..n {
                for j in 0..p {
                    row[j] = x[(i, j)];
                }
                out[i] = self.eval_row(&row, beta);
            }
            return (out, false);
        }
        let mut z = DVector::zeros(n);
        for j in 0..p {
            let b = beta[j];
            if b == 0.0 {
                continue;
            }
            match self.kind {
                LinkKind::CubicPower => {
                    let col = x.column(j);
                    for i in 0..n {
                        let v = col[i];
                        z[i] += v * v * v * b;
                    }
                }
                _ => z.axpy(b, &x.column(j), 1.0),
            }
        }
        if self.kind == LinkKind::Exponential {
            let clamped = z.iter().any(|v| v.abs() > EXP_CLAMP);
            (z.map(|v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp()), clamped)
        } else {
            (z, false)
        }
    }

    /// Columns of the n×p Jacobian restricted to `cols`.
    pub fn jacobian_cols(
        &self,
        x: &DMatrix<f64>,
        beta: &DVector<f64>,
        cols: &[usize],
    ) -> DMatrix<f64> {
        let n = x.nrows();
        let p = x.ncols();
        let mut out = DMatrix::zeros(n, cols.len());
        match self.kind {
            LinkKind::Linear => {
                for (c, &j) in cols.iter().enumerate() {
                    out.set_column(c, &x.column(j));
                }
            }
            LinkKind::CubicPower => {
                for (c, &j) in cols.iter().enumerate() {
                    let col = x.column(j);
                    for i in 0..n {
                        let v = col[i];
                        out[(i, c)] = v * v * v;
                    }
                }
            }
            LinkKind::Exponential => {
                let (f, _) = self.eval_matrix(x, beta);
                for (c, &j) in cols.iter().enumerate() {
                    let col = x.column(j);
                    for i in 0..n {
                        out[(i, c)] = f[i] * col[i];
                    }
                }
            }
            LinkKind::Custom => {
                let mut full_row = vec![0.0; p];
                let mut row = vec![0.0; p];
                for i in 0..n {
                    for j in 0..p {
                        row[j] = x[(i, j)];
                    }
                    self.jacobian_row(&row, beta, &mut full_row);
                    for (c, &j) in cols.iter().enumerate() {
                        out[(i, c)] = full_row[j];
                    }
                }
            }
        }
        out
    }
}

/// Synthetic GMM problem: instruments, SPD weight, link, sparsity bound.
#[derive(Debug, Clone)]
pub struct GmmProblem {
    pub siv: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub link: LinkFamily,
    pub k: usize,
}

/// Empirical GMM loss (n⁻¹Σ SIVᵢ(Yᵢ−f(Xᵢ;β)))ᵀ W (·).
pub fn gmm_loss(
    beta: &DVector<f64>,
    problem: &GmmProblem,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> f64 {
    let n = x.nrows() as f64;
    let (f, _) = problem.link.eval_matrix(x, beta);
    let resid = y - f;
    let m = problem.siv.transpose() * resid / n;
    (m.transpose() * &problem.w * &m)[(0, 0)]
}

/// Default scale-aware ridge for the weight matrix.
pub fn default_weight_ridge(siv: &DMatrix<f64>) -> f64 {
    let n = siv.nrows() as f64;
    let m = siv.ncols() as f64;
    let cov_trace = (0..siv.ncols())
        .map(|j| siv.column(j).dot(&siv.column(j)) / (n - 1.0))
        .sum::<f64>();
    1e-8 * cov_trace / m.max(1.0)
}

/// Inverse of the (ridge-adjusted) empirical covariance of the instruments.
pub fn weight_matrix(siv: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let n = siv.nrows();
    if n < 2 {
        return Err(SivError::Dimension("need n >= 2".to_string()));
    }
    let mut cov = siv.transpose() * siv / (n as f64 - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += ridge;
    }
    let w = linalg::solve_psd_matrix(&cov);
    // Symmetrize against roundoff.
    Ok((&w + w.transpose()) * 0.5)
}

/// Nonlinear least-squares problem T·(Y − f(X;β) − E·γ) with β restricted
/// to a support and γ free. `transform` is applied to residual vectors
/// (row-compressing projector); `extra` holds the free regressors.
pub(crate) struct NlSolver<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub link: &'a LinkFamily,
    pub transform: Option<&'a DMatrix<f64>>,
    pub extra: Option<&'a DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct NlFit {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub support: Vec<usize>,
    pub objective: f64,
    pub warnings: Vec<String>,
    pub clamped: bool,
}

impl<'a> NlSolver<'a> {
    fn apply_t(&self, v: &DVector<f64>) -> DVector<f64> {
        match self.transform {
            Some(t) => t * v,
            None => v.clone(),
        }
    }

    fn n_extra(&self) -> usize {
        self.extra.map_or(0, |e| e.ncols())
    }

    fn residual(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> (DVector<f64>, bool) {
        let (f, clamped) = self.link.eval_matrix(self.x, beta);
        let mut r = self.y - f;
        if let Some(e) = self.extra {
            r -= e * gamma;
        }
        (self.apply_t(&r), clamped)
    }

    /// Damped Gauss–Newton on the given support, initialized at zero.
    /// Accepted steps never increase the objective.
    pub fn fit_support(&self, support: &[usize]) -> NlFit {
        let p = self.x.ncols();
        let m = self.n_extra();
        let k = support.len();
        let mut beta = DVector::zeros(p);
        let mut gamma = DVector::zeros(m);
        let mut warnings = Vec::new();
        let mut any_clamped = false;

        let (mut resid, c0) = self.residual(&beta, &gamma);
        any_clamped |= c0;
        let mut obj = resid.dot(&resid);
        if k + m == 0 {
            return NlFit {
                beta,
                gamma,
                support: Vec::new(),
                objective: obj,
                warnings,
                clamped: any_clamped,
            };
        }
        let mut converged = false;
        for _ in 0..GN_MAX_ITER {
            // J = T·[F_A | E]; residual derivative is −J.
            let fa = self.link.jacobian_cols(self.x, &beta, support);
            let tfa = match self.transform {
                Some(t) => t * fa,
                None => fa,
            };
            let te = self.extra.map(|e| match self.transform {
                Some(t) => t * e,
                None => e.clone(),
            });
            let rows = tfa.nrows();
            let mut j = DMatrix::zeros(rows, k + m);
            for c in 0..k {
                j.set_column(c, &tfa.column(c));
            }
            if let Some(te) = &te {
                for c in 0..m {
                    j.set_column(k + c, &te.column(c));
                }
            }
            let grad = j.transpose() * &resid;
            if grad.norm() <= GN_GRAD_TOL * (1.0 + obj) {
                converged = true;
                break;
            }
            let jt_j = j.transpose() * &j;
            let step = linalg::solve_psd(&jt_j, &grad);
            // Backtracking: halve until the objective decreases.
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=GN_MAX_HALVINGS {
                let mut b_try = beta.clone();
                for (c, &jidx) in support.iter().enumerate() {
                    b_try[jidx] += t * step[c];
                }
                let mut g_try = gamma.clone();
                for c in 0..m {
                    g_try[c] += t * step[k + c];
                }
                let (r_try, c_try) = self.residual(&b_try, &g_try);
                let obj_try = r_try.dot(&r_try);
                if obj_try < obj {
                    beta = b_try;
                    gamma = g_try;
                    resid = r_try;
                    any_clamped |= c_try;
                    let gain = obj - obj_try;
                    obj = obj_try;
                    accepted = true;
                    if gain <= 1e-14 * obj.max(1.0) {
                        converged = true;
                    }
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                converged = true; // local stationarity within line-search resolution
                break;
            }
            if converged {
                break;
            }
        }
        if !converged {
            warnings.push("Gauss–Newton hit the iteration cap; best-seen returned".to_string());
        }
        NlFit {
            beta,
            gamma,
            support: support.to_vec(),
            objective: obj,
            warnings,
            clamped: any_clamped,
        }
    }

    /// Outer ℓ0 search: splicing over supports with sacrifices from the
    /// problem linearized at the current iterate.
    pub fn fit_k(&self, k: usize, c_max: usize, max_passes: usize) -> NlFit {
        let p = self.x.ncols();
        if k == 0 {
            return self.fit_support(&[]);
        }
        let k = k.min(p);
        // Initial screen at β = 0 (γ fit freely).
        let base = self.fit_support(&[]);
        let zero = DVector::zeros(p);
        let all: Vec<usize> = (0..p).collect();
        let j0 = self.link.jacobian_cols(self.x, &zero, &all);
        let tj0 = match self.transform {
            Some(t) => t * j0,
            None => j0,
        };
        let (r0, _) = self.residual(&zero, &base.gamma);
        let mut scored: Vec<(usize, f64)> = (0..p)
            .map(|j| {
                let col = tj0.column(j);
                let nrm = col.norm();
                let s = if nrm > 0.0 { (col.dot(&r0) / nrm).abs() } else { 0.0 };
                (j, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut active: Vec<usize> = scored[..k].iter().map(|t| t.0).collect();
        active.sort_unstable();
        let mut fit = self.fit_support(&active);
        let c_max = c_max.min(k).max(1);
        let mut improved = true;
        let mut passes = 0;
        while improved {
            if passes >= max_passes {
                fit.warnings
                    .push(format!("splicing stopped after {max_passes} passes"));
                break;
            }
            passes += 1;
            improved = false;
            let jz = self.link.jacobian_cols(self.x, &fit.beta, &all);
            let z = match self.transform {
                Some(t) => t * jz,
                None => jz,
            };
            let (resid, _) = self.residual(&fit.beta, &fit.gamma);
            let active_mask = {
                let mut msk = vec![false; p];
                for &j in &active {
                    msk[j] = true;
                }
                msk
            };
            let mut back: Vec<(usize, f64)> = active
                .iter()
                .map(|&j| {
                    let nrm2 = z.column(j).norm_squared();
                    (j, fit.beta[j] * fit.beta[j] * nrm2)
                })
                .collect();
            back.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let mut fwd: Vec<(usize, f64)> = (0..p)
                .filter(|j| !active_mask[*j])
                .map(|j| {
                    let col = z.column(j);
                    let nrm2 = col.norm_squared();
                    let s = if nrm2 > 0.0 {
                        let d = col.dot(&resid);
                        d * d / nrm2
                    } else {
                        0.0
                    };
                    (j, s)
                })
                .collect();
            fwd.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

            let mut best_swap: Option<NlFit> = None;
            for c in 1..=c_max.min(fwd.len()) {
                let drop: Vec<usize> = back[..c].iter().map(|t| t.0).collect();
                let add: Vec<usize> = fwd[..c].iter().map(|t| t.0).collect();
                let mut cand: Vec<usize> = active
                    .iter()
                    .copied()
                    .filter(|j| !drop.contains(j))
                    .chain(add.iter().copied())
                    .collect();
                cand.sort_unstable();
                let cand_fit = self.fit_support(&cand);
                let better = match &best_swap {
                    None => cand_fit.objective < fit.objective - 1e-12,
                    Some(b) => cand_fit.objective < b.objective - 1e-12,
                };
                if better {
                    best_swap = Some(cand_fit);
                }
            }
            if let Some(b) = best_swap {
                active = b.support.clone();
                fit = b;
                improved = true;
            }
        }
        fit
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// ℓ0-constrained synthetic nonlinear two-stage least squares: minimize the
/// projected residual ‖Π_SIV(Y − f(X;β))‖² over sparse β, with k selected
/// by cross-validated held-out projected-moment loss.
pub fn fit_nonlinear_siv(
    data: &Dataset,
    link: &LinkFamily,
    opts: &crate::estimator::FitOptions,
) -> Result<FitResult> {
    let (n, p) = (data.n(), data.p());
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("link".to_string(), format!("{:?}", link.kind).to_lowercase());
    diagnostics.insert(
        "assumptions".to_string(),
        "invertibility and plurality of the linearized moments assumed, not checked".to_string(),
    );
    diagnostics.insert(
        "cv_loss".to_string(),
        "held-out projected-moment loss with inverse-covariance weight".to_string(),
    );

    let (q_hat, _, basis) =
        crate::estimator::estimate_structure(data, opts, Some(&mut diagnostics))?;
    let siv = &data.x * &basis.b;

    let k_top = opts
        .k_max
        .unwrap_or_else(|| default_k_max(n, p, q_hat))
        .min(p);
    let c_max = opts.splice.c_max.unwrap_or(2);
    let max_passes = opts.splice.max_passes;

    let (k_hat, cv_table) = match opts.k {
        Some(k) => (k, Vec::new()),
        None => {
            let folds = opts.folds;
            if n < 2 * folds {
                return Err(SivError::Dimension(format!(
                    "need n >= 2*folds, got n={n}, folds={folds}"
                )));
            }
            let fold_of = subset::fold_assignment(n, folds, opts.seed);
            let mut losses = vec![vec![0.0f64; folds]; k_top + 1];
            for f in 0..folds {
                let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
                let val_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
                let x_tr = select_rows(&data.x, &train_rows);
                let y_tr = select_entries(&data.y, &train_rows);
                let siv_tr = select_rows(&siv, &train_rows);
                let (q_tr, _) = linalg::colspace_basis(&siv_tr);
                let t_tr = q_tr.transpose();
                let solver = NlSolver {
                    x: &x_tr,
                    y: &y_tr,
                    link,
                    transform: Some(&t_tr),
                    extra: None,
                };
                let x_val = select_rows(&data.x, &val_rows);
                let y_val = select_entries(&data.y, &val_rows);
                let siv_val = select_rows(&siv, &val_rows);
                let ridge = default_weight_ridge(&siv_val);
                let w_val = weight_matrix(&siv_val, ridge)?;
                let problem = GmmProblem {
                    siv: siv_val,
                    w: w_val,
                    link: link.clone(),
                    k: 0,
                };
                for k in 0..=k_top {
                    let fit = solver.fit_k(k, c_max, max_passes);
                    losses[k][f] = gmm_loss(&fit.beta, &problem, &x_val, &y_val);
                }
            }
            let mut table = Vec::with_capacity(k_top + 1);
            for (k, row) in losses.iter().enumerate() {
                let m = row.iter().sum::<f64>() / folds as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                    / (folds as f64 - 1.0);
                table.push(CvRow {
                    k,
                    mean_loss: m,
                    sd: var.sqrt(),
                });
            }
            (subset::select_k_one_se(&table, folds), table)
        }
    };

    // Final refit on all data.
    let (q_full, _) = linalg::colspace_basis(&siv);
    let t_full = q_full.transpose();
    let solver = NlSolver {
        x: &data.x,
        y: &data.y,
        link,
        transform: Some(&t_full),
        extra: None,
    };
    let fit = solver.fit_k(k_hat, c_max, max_passes);
    for w in &fit.warnings {
        diagnostics.insert("solver_warning".to_string(), w.clone());
    }
    if fit.clamped {
        diagnostics.insert(
            "exp_clamp".to_string(),
            "exponential link input clamped during optimization".to_string(),
        );
    }
    diagnostics.insert("in_sample_loss".to_string(), format!("{:.6e}", fit.objective));
    let support: Vec<usize> = (0..p).filter(|&j| fit.beta[j] != 0.0).collect();
    let identifiable = q_hat + k_hat < p;
    Ok(FitResult {
        beta: fit.beta,
        support,
        k_hat,
        cv_table,
        identifiable,
        q_hat,
        diagnostics,
    })
}
