//! Data generators and the Monte Carlo harness: confounded sparse linear
//! and nonlinear designs, per-replicate seed substreams, metric records,
//! and CSV/JSONL/TSV persistence.

use crate::baselines::{self, UhatTransform};
use crate::dataset::Dataset;
use crate::error::{Result, SivError};
use crate::estimator::{self, FitOptions};
use crate::gmm::{self, LinkFamily};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

const PSD_REDRAW_LIMIT: usize = 100;
const PSD_MIN_EIG: f64 = 1e-8;

/// Covariance structure of the exposure noise ε_x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseCov {
    /// σx²·I
    Diagonal,
    /// σx²·I with `count` randomly chosen off-diagonal pairs set to `value`;
    /// redrawn until positive semidefinite.
    RandomPairs { count: usize, value: f64 },
    /// Dᵢⱼ = scale·ρ^|i−j|
    ArDecay { scale: f64, rho: f64 },
}

impl Default for NoiseCov {
    fn default() -> Self {
        NoiseCov::Diagonal
    }
}

/// Outcome equation: Y = f(X;β) + g(U) + σ_y·ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// linear f, linear g
    LinearG,
    /// f(x;β) = Σ xⱼ³βⱼ, g(u) = (u³)ᵀγ
    Cubic,
    /// f(x;β) = exp(xᵀβ), g(u) = (u³)ᵀγ
    ExponentialLink,
    /// linear f, g(u) = (u³)ᵀγ
    CubicG,
}

impl Default for Outcome {
    fn default() -> Self {
        Outcome::LinearG
    }
}

impl Outcome {
    pub fn link(&self) -> LinkFamily {
        match self {
            Outcome::LinearG | Outcome::CubicG => LinkFamily::linear(),
            Outcome::Cubic => LinkFamily::cubic_power(),
            Outcome::ExponentialLink => LinkFamily::exponential(),
        }
    }
}

/// Distribution for loading and outcome-confounding entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingDist {
    Uniform,
    Gaussian,
}

impl Default for LoadingDist {
    fn default() -> Self {
        LoadingDist::Uniform
    }
}

fn default_beta_value() -> f64 {
    1.0
}
fn default_replicates() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub s: usize,
    #[serde(default = "default_beta_value")]
    pub beta_active_value: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    #[serde(default)]
    pub noise_cov: NoiseCov,
    #[serde(default)]
    pub outcome: Outcome,
    #[serde(default)]
    pub loading_dist: LoadingDist,
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.s > self.p {
            bad.push(format!("s={} exceeds p={}", self.s, self.p));
        }
        if self.p < 2 {
            bad.push("p must be >= 2".to_string());
        }
        if self.n < 2 {
            bad.push("n must be >= 2".to_string());
        }
        if !(self.sigma_x > 0.0) {
            bad.push(format!("sigma_x={} must be > 0", self.sigma_x));
        }
        if !(self.sigma_y > 0.0) {
            bad.push(format!("sigma_y={} must be > 0", self.sigma_y));
        }
        if self.replicates < 1 {
            bad.push("replicates must be >= 1".to_string());
        }
        if let NoiseCov::ArDecay { scale, rho } = self.noise_cov {
            if !(scale > 0.0) || rho.abs() >= 1.0 {
                bad.push(format!(
                    "ar_decay requires scale > 0 and |rho| < 1, got scale={scale}, rho={rho}"
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SivError::InvalidInput(bad.join("; ")))
        }
    }
}

/// One result row per (method, replicate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub replicate: usize,
    pub l1_error: f64,
    pub fdr: f64,
    pub support_size: usize,
    pub k_hat: usize,
    pub q_hat: usize,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Siv,
    Lasso,
    IvLasso,
    Uhat1,
    Uhat2,
    SivNonlinear,
}

impl Method {
    pub fn key(&self) -> &'static str {
        match self {
            Method::Siv => "siv",
            Method::Lasso => "lasso",
            Method::IvLasso => "iv_lasso",
            Method::Uhat1 => "uhat1",
            Method::Uhat2 => "uhat2",
            Method::SivNonlinear => "siv_nonlinear",
        }
    }

    pub fn from_key(key: &str) -> Option<Method> {
        match key {
            "siv" => Some(Method::Siv),
            "lasso" => Some(Method::Lasso),
            "iv_lasso" => Some(Method::IvLasso),
            "uhat1" => Some(Method::Uhat1),
            "uhat2" => Some(Method::Uhat2),
            "siv_nonlinear" => Some(Method::SivNonlinear),
            _ => None,
        }
    }

    pub fn all_keys() -> &'static [&'static str] {
        &["siv", "lasso", "iv_lasso", "uhat1", "uhat2", "siv_nonlinear"]
    }
}

/// splitmix64 finalizer; mixes (seed, replicate) into an independent
/// substream seed so a replicate is reproducible in isolation.
pub fn substream_seed(seed: u64, replicate: usize) -> u64 {
    let mut z = seed ^ (replicate as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_loading(rng: &mut ChaCha8Rng, dist: LoadingDist) -> f64 {
    match dist {
        LoadingDist::Uniform => rng.gen::<f64>() * 2.0 - 1.0,
        LoadingDist::Gaussian => rng.sample(StandardNormal),
    }
}

fn build_noise_cov(cfg: &SimulationConfig, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let p = cfg.p;
    match cfg.noise_cov {
        NoiseCov::Diagonal => Ok(DMatrix::from_diagonal_element(
            p,
            p,
            cfg.sigma_x * cfg.sigma_x,
        )),
        NoiseCov::ArDecay { scale, rho } => Ok(DMatrix::from_fn(p, p, |i, j| {
            scale * rho.powi((i as i32 - j as i32).abs())
        })),
        NoiseCov::RandomPairs { count, value } => {
            for _ in 0..PSD_REDRAW_LIMIT {
                let mut d =
                    DMatrix::from_diagonal_element(p, p, cfg.sigma_x * cfg.sigma_x);
                let mut placed = 0usize;
                let mut guard = 0usize;
                while placed < count && guard < 100 * count.max(1) {
                    guard += 1;
                    let i = rng.gen_range(0..p);
                    let j = rng.gen_range(0..p);
                    if i == j || d[(i, j)] != 0.0 {
                        continue;
                    }
                    d[(i, j)] = value;
                    d[(j, i)] = value;
                    placed += 1;
                }
                let (vals, _) = crate::linalg::symmetric_eigen_sorted(&d);
                if vals[vals.len() - 1] >= PSD_MIN_EIG {
                    return Ok(d);
                }
            }
            Err(SivError::InvalidInput(format!(
                "random_pairs(count={count}, value={value}) never produced a positive-semidefinite covariance in {PSD_REDRAW_LIMIT} draws"
            )))
        }
    }
}

pub fn true_beta(cfg: &SimulationConfig) -> DVector<f64> {
    let mut beta = DVector::zeros(cfg.p);
    for j in 0..cfg.s {
        beta[j] = cfg.beta_active_value;
    }
    beta
}

/// X = UΛᵀ + ε_x, Y = f(X;β) + g(U) + σ_y·ε, drawn from the replicate's
/// seed substream.
pub fn generate_dataset(cfg: &SimulationConfig, replicate_index: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, replicate_index));
    let (n, p, q) = (cfg.n, cfg.p, cfg.q);

    let lam = DMatrix::from_fn(p, q, |_, _| draw_loading(&mut rng, cfg.loading_dist));
    let gamma = DVector::from_fn(q, |_, _| draw_loading(&mut rng, cfg.loading_dist));
    let d = build_noise_cov(cfg, &mut rng)?;
    let chol = nalgebra::Cholesky::new(d.clone())
        .map(|c| c.l())
        .unwrap_or_else(|| {
            // PSD but numerically semi-definite: fall back to an eigen root.
            let (vals, vecs) = crate::linalg::symmetric_eigen_sorted(&d);
            let mut root = vecs;
            for (c, v) in vals.iter().enumerate() {
                let s = v.max(0.0).sqrt();
                for i in 0..p {
                    root[(i, c)] *= s;
                }
            }
            root
        });

    let u = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps_x = z * chol.transpose();
    let x = &u * lam.transpose() + eps_x;

    let beta = true_beta(cfg);
    let f: DVector<f64> = match cfg.outcome {
        Outcome::LinearG | Outcome::CubicG => &x * &beta,
        Outcome::Cubic => {
            let (v, _) = LinkFamily::cubic_power().eval_matrix(&x, &beta);
            v
        }
        Outcome::ExponentialLink => {
            let xb = &x * &beta;
            xb.map(f64::exp)
        }
    };
    // Linear confounding Uγ only for the fully linear model; the nonlinear
    // settings all use g(U) = (U³)γ with the cube applied elementwise to U.
    let g: DVector<f64> = match cfg.outcome {
        Outcome::LinearG => &u * &gamma,
        Outcome::Cubic | Outcome::ExponentialLink | Outcome::CubicG => {
            u.map(|v| v * v * v) * &gamma
        }
    };
    let eps_y = DVector::from_fn(n, |_, _| cfg.sigma_y * rng.sample::<f64, _>(StandardNormal));
    let y = f + g + eps_y;
    Ok(Dataset::new(x, y)?.with_true_beta(beta))
}

/// ℓ1 error, false discovery rate |Â∖A|/max(|Â|,1), and |Â|. Supports are
/// exact-zero tests.
pub fn compute_metrics(beta_hat: &DVector<f64>, beta_true: &DVector<f64>) -> (f64, f64, usize) {
    assert_eq!(beta_hat.len(), beta_true.len(), "length mismatch");
    let l1 = (beta_hat - beta_true).abs().sum();
    let selected: Vec<usize> = (0..beta_hat.len()).filter(|&j| beta_hat[j] != 0.0).collect();
    let false_disc = selected.iter().filter(|&&j| beta_true[j] == 0.0).count();
    let fdr = false_disc as f64 / selected.len().max(1) as f64;
    (l1, fdr, selected.len())
}

fn run_method(
    method: Method,
    cfg: &SimulationConfig,
    data: &Dataset,
    replicate: usize,
    lasso_cache: &mut Option<DVector<f64>>,
) -> Result<(DVector<f64>, usize, usize)> {
    let seed = substream_seed(cfg.seed ^ 0x5151_5151, replicate);
    let opts = FitOptions {
        seed,
        ..FitOptions::default()
    };
    // The lasso solution is shared between the Lasso and IvLasso methods
    // within a replicate; both use the same seeded fold assignment.
    let lasso_beta = |cache: &mut Option<DVector<f64>>| -> Result<DVector<f64>> {
        if cache.is_none() {
            let (beta, _) = baselines::lasso_cd(data, None, 10, seed)?;
            *cache = Some(beta);
        }
        Ok(cache.as_ref().unwrap().clone())
    };
    match method {
        Method::Siv => {
            let fit = estimator::fit_siv(data, &opts)?;
            Ok((fit.beta, fit.k_hat, fit.q_hat))
        }
        Method::Lasso => {
            let beta = lasso_beta(lasso_cache)?;
            let k = beta.iter().filter(|v| **v != 0.0).count();
            Ok((beta, k, 0))
        }
        Method::IvLasso => {
            let first_stage = lasso_beta(lasso_cache)?;
            let (q_hat, _, basis) = estimator::estimate_structure(data, &opts, None)?;
            let siv = &data.x * &basis.b;
            let fit = baselines::iv_lasso_with(data, &siv, &first_stage)?;
            let k = fit.support.len();
            Ok((fit.beta, k, q_hat))
        }
        Method::Uhat1 | Method::Uhat2 => {
            let (q_hat, fe, _) = estimator::estimate_structure(data, &opts, None)?;
            let fe = fe.unwrap_or(crate::factor::FactorEstimate {
                q_hat: 0,
                loadings: DMatrix::zeros(data.p(), 0),
                eigenvalues: DVector::zeros(0),
                method: crate::factor::LoadingMethod::Pca,
                uniquenesses: None,
                log_likelihood: None,
                warnings: vec![],
            });
            let transform = if method == Method::Uhat1 {
                UhatTransform::Identity
            } else {
                UhatTransform::Cube
            };
            let k_max = estimator::default_k_max(data.n(), data.p(), q_hat);
            let (fit, k_hat) = baselines::uhat_fit_cv(
                data,
                &fe,
                &cfg.outcome.link(),
                transform,
                k_max,
                opts.folds,
                seed,
            )?;
            Ok((fit.beta, k_hat, q_hat))
        }
        Method::SivNonlinear => {
            let fit = gmm::fit_nonlinear_siv(data, &cfg.outcome.link(), &opts)?;
            Ok((fit.beta, fit.k_hat, fit.q_hat))
        }
    }
}

/// Runs every (method, replicate) cell, in parallel over replicates, with
/// records sorted by (method, replicate) so output is independent of the
/// level of parallelism. Per-cell failures are tagged, not fatal.
pub fn run_monte_carlo(cfg: &SimulationConfig, methods: &[Method]) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(SivError::InvalidInput("methods list is empty".to_string()));
    }
    let per_replicate: Vec<Vec<MetricsRecord>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rows = Vec::with_capacity(methods.len());
            let data = match generate_dataset(cfg, r) {
                Ok(d) => d,
                Err(e) => {
                    for m in methods {
                        rows.push(MetricsRecord {
                            method: m.key().to_string(),
                            replicate: r,
                            l1_error: f64::NAN,
                            fdr: f64::NAN,
                            support_size: 0,
                            k_hat: 0,
                            q_hat: 0,
                            wall_time_ms: 0,
                            error: Some(format!("generator: {e}")),
                        });
                    }
                    return rows;
                }
            };
            let beta_true = data.true_beta.clone().expect("generator sets truth");
            let mut lasso_cache: Option<DVector<f64>> = None;
            for m in methods {
                let t0 = Instant::now();
                let outcome = run_method(*m, cfg, &data, r, &mut lasso_cache);
                let wall = t0.elapsed().as_millis() as u64;
                let rec = match outcome {
                    Ok((beta, k_hat, q_hat)) => {
                        let (l1, fdr, support) = compute_metrics(&beta, &beta_true);
                        MetricsRecord {
                            method: m.key().to_string(),
                            replicate: r,
                            l1_error: l1,
                            fdr,
                            support_size: support,
                            k_hat,
                            q_hat,
                            wall_time_ms: wall,
                            error: None,
                        }
                    }
                    Err(e) => MetricsRecord {
                        method: m.key().to_string(),
                        replicate: r,
                        l1_error: f64::NAN,
                        fdr: f64::NAN,
                        support_size: 0,
                        k_hat: 0,
                        q_hat: 0,
                        wall_time_ms: wall,
                        error: Some(e.to_string()),
                    },
                };
                rows.push(rec);
            }
            rows
        })
        .collect();
    let mut records: Vec<MetricsRecord> = per_replicate.into_iter().flatten().collect();
    records.sort_by(|a, b| a.method.cmp(&b.method).then(a.replicate.cmp(&b.replicate)));
    Ok(records)
}

pub const CSV_HEADER: &str = "method,replicate,l1_error,fdr,support_size,k_hat,q_hat,wall_time_ms";

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.replicate,
            r.l1_error,
            r.fdr,
            r.support_size,
            r.k_hat,
            r.q_hat,
            r.wall_time_ms
        )?;
    }
    Ok(())
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| SivError::Parse(format!("jsonl serialization: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub p: usize,
    pub median_l1: f64,
    pub mean_fdr: f64,
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Per-method medians/means for one experiment cell, sorted by method key.
/// Failed records are excluded from aggregates.
pub fn summarize(records: &[MetricsRecord], n: usize, p: usize) -> Vec<SummaryRow> {
    let mut keys: Vec<String> = records.iter().map(|r| r.method.clone()).collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|key| {
            let ok: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| &r.method == key && r.error.is_none())
                .collect();
            let mut l1: Vec<f64> = ok.iter().map(|r| r.l1_error).collect();
            let fdrs: Vec<f64> = ok
                .iter()
                .map(|r| r.fdr)
                .filter(|v| v.is_finite())
                .collect();
            let mean_fdr = if fdrs.is_empty() {
                f64::NAN
            } else {
                fdrs.iter().sum::<f64>() / fdrs.len() as f64
            };
            SummaryRow {
                method: key.clone(),
                n,
                p,
                median_l1: median(&mut l1),
                mean_fdr,
            }
        })
        .collect()
}

pub fn write_summary_tsv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "method\tn\tp\tmedian_l1\tmean_fdr")?;
    for r in rows {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            r.method, r.n, r.p, r.median_l1, r.mean_fdr
        )?;
    }
    Ok(())
}
