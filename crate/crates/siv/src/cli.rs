//! Command-line front end: `estimate` on user CSVs, `simulate` for the
//! Monte Carlo experiment grids, `bench` for aggregating result folders.

use crate::dataset::Dataset;
use crate::error::{Result, SivError};
use crate::estimator::{self, FitOptions};
use crate::factor::LoadingMethod;
use crate::gmm::{self, LinkFamily, LinkKind};
use crate::sim::{self, Method, MetricsRecord, SimulationConfig};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_NOT_IDENTIFIABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "siv", version, about = "Sparse causal effects under latent confounding via synthetic instruments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the synthetic-instrument estimator on X/Y CSV files.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment grid from a JSON config.
    Simulate(SimulateArgs),
    /// Aggregate result CSVs into a per-(method, n, p) summary.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Exposure matrix CSV (header row of names, numeric body)
    pub x_csv: PathBuf,
    /// Outcome CSV (single numeric column)
    pub y_csv: PathBuf,
    /// Output directory (created if absent)
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Force the number of latent factors
    #[arg(long)]
    pub q: Option<usize>,
    /// Force the sparsity level instead of cross-validating
    #[arg(long)]
    pub k: Option<usize>,
    /// Upper bound of the cross-validation grid for k
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loading estimator: pca or mle (default: mle when n > p, else pca)
    #[arg(long)]
    pub method: Option<String>,
    /// Outcome link: linear, cubic, or exp
    #[arg(long, default_value = "linear")]
    pub link: String,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config JSON (see docs/config.md)
    pub config: PathBuf,
    /// Output directory (created if absent)
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Override the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of MetricsRecord CSVs
    pub results_dir: PathBuf,
}

/// Resolved run description written next to every output set; re-running
/// from the same manifest reproduces the estimates.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub seed: u64,
    pub overrides: BTreeMap<String, String>,
    pub resolved: serde_json::Value,
    pub version: String,
}

fn init_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
}

fn exit_code_for(e: &SivError) -> i32 {
    match e {
        SivError::Io(_)
        | SivError::Parse(_)
        | SivError::InvalidInput(_)
        | SivError::Dimension(_)
        | SivError::Size(_) => EXIT_INPUT,
        SivError::Convergence(_) | SivError::Rank(_) | SivError::DegenerateInput(_) => {
            EXIT_NUMERICAL
        }
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    run_command(cli.command)
}

pub fn run_command(command: Command) -> i32 {
    let result = match command {
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Bench(args) => cmd_bench(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

// ---------------------------------------------------------------- estimate

fn parse_cell(field: &str, row: usize, col: usize) -> Result<f64> {
    let t = field.trim();
    if t.is_empty() {
        return Err(SivError::Parse(format!(
            "missing value at row {row}, column {col}"
        )));
    }
    t.parse::<f64>().map_err(|_| {
        SivError::Parse(format!(
            "row {row}, column {col}: cannot parse '{t}' as a number"
        ))
    })
}

/// X CSV: required header of exposure names, numeric body.
pub fn read_x_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let body = std::fs::read_to_string(path)?;
    let mut lines = body.lines();
    let header = lines
        .next()
        .ok_or_else(|| SivError::Parse(format!("{}: empty file", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let p = names.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != p {
            return Err(SivError::Parse(format!(
                "row {}: expected {p} columns, found {}",
                i + 2,
                fields.len()
            )));
        }
        for (j, f) in fields.iter().enumerate() {
            rows.push(parse_cell(f, i + 2, j + 1)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(SivError::Parse(format!(
            "{}: no data rows after the header",
            path.display()
        )));
    }
    Ok((names, DMatrix::from_row_slice(n, p, &rows)))
}

/// Y CSV: one numeric column; a single non-numeric first line is treated
/// as a header.
pub fn read_y_csv(path: &Path) -> Result<DVector<f64>> {
    let body = std::fs::read_to_string(path)?;
    let mut vals = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.contains(',') {
            return Err(SivError::Parse(format!(
                "row {}: outcome file must have a single column",
                i + 1
            )));
        }
        match t.parse::<f64>() {
            Ok(v) => vals.push(v),
            Err(_) if i == 0 => {} // header
            Err(_) => {
                return Err(SivError::Parse(format!(
                    "row {}: cannot parse '{t}' as a number",
                    i + 1
                )))
            }
        }
    }
    if vals.is_empty() {
        return Err(SivError::Parse(format!(
            "{}: no numeric outcome values",
            path.display()
        )));
    }
    Ok(DVector::from_vec(vals))
}

#[derive(Debug, Serialize)]
struct FitJson {
    beta: BTreeMap<String, f64>,
    support: Vec<String>,
    k_hat: usize,
    q_hat: usize,
    identifiable: bool,
    diagnostics: BTreeMap<String, String>,
}

fn write_cv_table(path: &Path, rows: &[crate::subset::CvRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "k,mean_loss,sd")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.k, r.mean_loss, r.sd)?;
    }
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| SivError::Parse(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), body + "\n")?;
    Ok(())
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<i32> {
    init_threads(args.threads);
    let (names, x) = read_x_csv(&args.x_csv)?;
    let y = read_y_csv(&args.y_csv)?;
    if x.nrows() != y.len() {
        return Err(SivError::Dimension(format!(
            "X has {} rows but Y has {} values",
            x.nrows(),
            y.len()
        )));
    }
    let data = Dataset::new(x, y)?;
    let method = match args.method.as_deref() {
        None => None,
        Some("pca") => Some(LoadingMethod::Pca),
        Some("mle") => Some(LoadingMethod::Mle),
        Some(other) => {
            return Err(SivError::InvalidInput(format!(
                "unknown loading method '{other}' (expected pca or mle)"
            )))
        }
    };
    let link = LinkFamily::by_name(&args.link).ok_or_else(|| {
        SivError::InvalidInput(format!(
            "unknown link '{}' (expected linear, cubic, or exp)",
            args.link
        ))
    })?;
    let opts = FitOptions {
        q: args.q,
        k: args.k,
        k_max: args.kmax,
        folds: args.folds,
        seed: args.seed,
        method,
        ..FitOptions::default()
    };
    let fit = if link.kind == LinkKind::Linear {
        estimator::fit_siv(&data, &opts)?
    } else {
        gmm::fit_nonlinear_siv(&data, &link, &opts)?
    };

    std::fs::create_dir_all(&args.out)?;
    let beta: BTreeMap<String, f64> = names
        .iter()
        .cloned()
        .zip(fit.beta.iter().copied())
        .collect();
    let support = fit.support.iter().map(|&j| names[j].clone()).collect();
    let fit_json = FitJson {
        beta,
        support,
        k_hat: fit.k_hat,
        q_hat: fit.q_hat,
        identifiable: fit.identifiable,
        diagnostics: fit.diagnostics.clone(),
    };
    let body = serde_json::to_string_pretty(&fit_json)
        .map_err(|e| SivError::Parse(format!("fit serialization: {e}")))?;
    std::fs::write(args.out.join("fit.json"), body + "\n")?;
    write_cv_table(&args.out.join("cv_table.csv"), &fit.cv_table)?;
    let mut overrides = BTreeMap::new();
    if let Some(q) = args.q {
        overrides.insert("q".to_string(), q.to_string());
    }
    if let Some(k) = args.k {
        overrides.insert("k".to_string(), k.to_string());
    }
    if let Some(kmax) = args.kmax {
        overrides.insert("kmax".to_string(), kmax.to_string());
    }
    write_manifest(
        &args.out,
        &RunManifest {
            command: "estimate".to_string(),
            config_path: None,
            inputs: vec![
                args.x_csv.display().to_string(),
                args.y_csv.display().to_string(),
            ],
            output_dir: args.out.display().to_string(),
            seed: args.seed,
            overrides,
            resolved: serde_json::json!({
                "folds": args.folds,
                "link": args.link,
                "method": args.method,
            }),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )?;
    if fit.identifiable {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "verdict: not identifiable (q_hat={} + k_hat={} >= p={})",
            fit.q_hat,
            fit.k_hat,
            data.p()
        );
        Ok(EXIT_NOT_IDENTIFIABLE)
    }
}

// ---------------------------------------------------------------- simulate

/// Experiment grid: a SimulationConfig template plus n/p axes and methods.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: Option<usize>,
    pub n_list: Option<Vec<usize>>,
    pub p: Option<usize>,
    pub p_list: Option<Vec<usize>>,
    pub q: usize,
    pub s: usize,
    #[serde(default = "one")]
    pub beta_active_value: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    #[serde(default)]
    pub noise_cov: sim::NoiseCov,
    #[serde(default)]
    pub outcome: sim::Outcome,
    #[serde(default)]
    pub loading_dist: sim::LoadingDist,
    pub seed: u64,
    #[serde(default = "hundred")]
    pub replicates: usize,
    pub methods: Vec<String>,
}

fn one() -> f64 {
    1.0
}
fn hundred() -> usize {
    100
}

impl ExperimentConfig {
    pub fn axes(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut bad = Vec::new();
        let ns = match (&self.n_list, self.n) {
            (Some(l), _) if !l.is_empty() => l.clone(),
            (None, Some(n)) => vec![n],
            _ => {
                bad.push("n or nonempty n_list".to_string());
                vec![]
            }
        };
        let ps = match (&self.p_list, self.p) {
            (Some(l), _) if !l.is_empty() => l.clone(),
            (None, Some(p)) => vec![p],
            _ => {
                bad.push("p or nonempty p_list".to_string());
                vec![]
            }
        };
        if !bad.is_empty() {
            return Err(SivError::InvalidInput(format!(
                "config must provide: {}",
                bad.join(", ")
            )));
        }
        Ok((ns, ps))
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(SivError::InvalidInput("methods list is empty".to_string()));
        }
        let unknown: Vec<&String> = self
            .methods
            .iter()
            .filter(|m| Method::from_key(m).is_none())
            .collect();
        if !unknown.is_empty() {
            return Err(SivError::InvalidInput(format!(
                "unknown method keys: {} (valid: {})",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
                Method::all_keys().join(", ")
            )));
        }
        Ok(self
            .methods
            .iter()
            .map(|m| Method::from_key(m).unwrap())
            .collect())
    }

    pub fn cell(&self, n: usize, p: usize) -> SimulationConfig {
        SimulationConfig {
            n,
            p,
            q: self.q,
            s: self.s,
            beta_active_value: self.beta_active_value,
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
            noise_cov: self.noise_cov,
            outcome: self.outcome,
            loading_dist: self.loading_dist,
            seed: self.seed,
            replicates: self.replicates,
        }
    }
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let body = std::fs::read_to_string(path)?;
    serde_json::from_str(&body)
        .map_err(|e| SivError::Parse(format!("{}: {e}", path.display())))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    init_threads(args.threads);
    let mut cfg = load_experiment_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (ns, ps) = cfg.axes()?;
    let methods = cfg.methods()?;
    std::fs::create_dir_all(&args.out)?;
    let mut summary_rows = Vec::new();
    for &n in &ns {
        for &p in &ps {
            let cell = cfg.cell(n, p);
            cell.validate()?;
            let records = sim::run_monte_carlo(&cell, &methods)?;
            let stem = format!("results_n{n}_p{p}");
            sim::write_csv(&args.out.join(format!("{stem}.csv")), &records)?;
            sim::write_jsonl(&args.out.join(format!("{stem}.jsonl")), &records)?;
            summary_rows.extend(sim::summarize(&records, n, p));
        }
    }
    sim::write_summary_tsv(&args.out.join("summary.tsv"), &summary_rows)?;
    let mut overrides = BTreeMap::new();
    if let Some(seed) = args.seed {
        overrides.insert("seed".to_string(), seed.to_string());
    }
    write_manifest(
        &args.out,
        &RunManifest {
            command: "simulate".to_string(),
            config_path: Some(args.config.display().to_string()),
            inputs: vec![],
            output_dir: args.out.display().to_string(),
            seed: cfg.seed,
            overrides,
            resolved: serde_json::to_value(&cfg)
                .map_err(|e| SivError::Parse(format!("config serialization: {e}")))?,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )?;
    for row in &summary_rows {
        println!(
            "{}\tn={}\tp={}\tmedian_l1={:.4}\tmean_fdr={:.4}",
            row.method, row.n, row.p, row.median_l1, row.mean_fdr
        );
    }
    Ok(EXIT_OK)
}

// ------------------------------------------------------------------- bench

fn parse_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let body = std::fs::read_to_string(path)?;
    let mut lines = body.lines();
    match lines.next() {
        Some(h) if h.trim() == sim::CSV_HEADER => {}
        _ => {
            return Err(SivError::Parse(format!(
                "{}: missing results header",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(SivError::Parse(format!(
                "{}: row {}: expected 8 fields",
                path.display(),
                i + 2
            )));
        }
        let bad =
            |c: usize| SivError::Parse(format!("{}: row {}, column {c}", path.display(), i + 2));
        out.push(MetricsRecord {
            method: f[0].to_string(),
            replicate: f[1].parse().map_err(|_| bad(2))?,
            l1_error: f[2].parse().map_err(|_| bad(3))?,
            fdr: f[3].parse().map_err(|_| bad(4))?,
            support_size: f[4].parse().map_err(|_| bad(5))?,
            k_hat: f[5].parse().map_err(|_| bad(6))?,
            q_hat: f[6].parse().map_err(|_| bad(7))?,
            wall_time_ms: f[7].parse().map_err(|_| bad(8))?,
            error: None,
        });
    }
    Ok(out)
}

/// Recover the (n, p) cell from a `results_n{n}_p{p}.csv` filename; files
/// named otherwise aggregate under (0, 0).
fn cell_from_filename(path: &Path) -> (usize, usize) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let mut n = 0;
    let mut p = 0;
    for part in stem.split('_') {
        if let Some(v) = part.strip_prefix('n').and_then(|v| v.parse().ok()) {
            n = v;
        } else if let Some(v) = part.strip_prefix('p').and_then(|v| v.parse().ok()) {
            p = v;
        }
    }
    (n, p)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let mut rows = Vec::new();
    let mut parsed_any = false;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.results_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "csv"))
        .collect();
    entries.sort();
    for path in &entries {
        match parse_records_csv(path) {
            Ok(records) if !records.is_empty() => {
                parsed_any = true;
                let (n, p) = cell_from_filename(path);
                rows.extend(sim::summarize(&records, n, p));
            }
            _ => {}
        }
    }
    if !parsed_any {
        return Err(SivError::InvalidInput(format!(
            "{}: no parsable result CSVs",
            args.results_dir.display()
        )));
    }
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.n.cmp(&b.n))
            .then(a.p.cmp(&b.p))
    });
    println!("method\tn\tp\tmedian_l1\tmean_fdr");
    for r in &rows {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            r.method, r.n, r.p, r.median_l1, r.mean_fdr
        );
    }
    sim::write_summary_tsv(&args.results_dir.join("bench_summary.tsv"), &rows)?;
    Ok(EXIT_OK)
}
