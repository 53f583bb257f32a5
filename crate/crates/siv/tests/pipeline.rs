//! End-to-end tests of the CLI binary: CSV estimation, the Monte Carlo
//! simulate/bench pipeline, exit codes, and output determinism.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_siv");

/// Write a confounded linear dataset as X/Y CSV files; returns true β.
fn write_csvs(dir: &Path, n: usize, p: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lam = DVector::from_fn(p, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    let u = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = DMatrix::from_fn(n, p, |i, j| {
        u[i] * lam[j] + rng.sample::<f64, _>(StandardNormal)
    });
    let mut beta = DVector::zeros(p);
    beta[0] = 1.0;
    beta[1] = -1.0;
    let y = &x * &beta + &u * 0.8
        + DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));

    let header: Vec<String> = (0..p).map(|j| format!("x{}", j + 1)).collect();
    let mut xbody = header.join(",") + "\n";
    for i in 0..n {
        let row: Vec<String> = (0..p).map(|j| format!("{}", x[(i, j)])).collect();
        xbody += &(row.join(",") + "\n");
    }
    std::fs::write(dir.join("x.csv"), xbody).unwrap();
    let ybody: String = (0..n).map(|i| format!("{}\n", y[i])).collect();
    std::fs::write(dir.join("y.csv"), ybody).unwrap();
    beta
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

#[test]
fn estimate_recovers_sparse_effects_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_csvs(dir.path(), 600, 12, 5);
    let out = dir.path().join("fit");
    let res = run(&[
        "estimate",
        dir.path().join("x.csv").to_str().unwrap(),
        dir.path().join("y.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--q",
        "1",
    ]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));

    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["q_hat"], 1);
    assert_eq!(fit["identifiable"], true);
    let support: Vec<String> = fit["support"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(support, vec!["x1", "x2"], "wrong selected exposures");
    let b1 = fit["beta"]["x1"].as_f64().unwrap();
    let b2 = fit["beta"]["x2"].as_f64().unwrap();
    assert!((b1 - 1.0).abs() < 0.2 && (b2 + 1.0).abs() < 0.2, "β̂ off: {b1}, {b2}");

    // CV table and manifest land next to the fit.
    let cv = std::fs::read_to_string(out.join("cv_table.csv")).unwrap();
    assert!(cv.starts_with("k,mean_loss,sd"));
    assert!(cv.lines().count() > 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "estimate");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn estimate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_csvs(dir.path(), 80, 6, 6);
    let x = dir.path().join("x.csv");
    let y = dir.path().join("y.csv");

    // Forcing q + k to fill the exposure count trips the verdict (exit 3).
    let res = run(&[
        "estimate",
        x.to_str().unwrap(),
        y.to_str().unwrap(),
        "--out",
        dir.path().join("o3").to_str().unwrap(),
        "--q",
        "1",
        "--k",
        "5",
        "--method",
        "pca",
    ]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(String::from_utf8_lossy(&res.stderr).contains("not identifiable"));

    // Missing input file is an input error (exit 1).
    let res = run(&["estimate", "/nonexistent/x.csv", y.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));

    // A malformed cell is an input error naming the location.
    let broken = dir.path().join("broken.csv");
    std::fs::write(&broken, "a,b\n1.0,2.0\n1.0,\n").unwrap();
    let res = run(&["estimate", broken.to_str().unwrap(), y.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!res.stderr.is_empty());

    // Unknown link name (exit 1).
    let res = run(&[
        "estimate",
        x.to_str().unwrap(),
        y.to_str().unwrap(),
        "--link",
        "quartic",
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("quartic"));
}

fn small_sim_config(seed: u64) -> String {
    format!(
        r#"{{
  "p": 8, "n": 120, "q": 1, "s": 2,
  "sigma_x": 1.0, "sigma_y": 1.0,
  "noise_cov": {{ "kind": "diagonal" }},
  "outcome": "linear_g",
  "seed": {seed}, "replicates": 3,
  "methods": ["siv", "lasso"]
}}"#
    )
}

/// Strip the wall-time column (the one measured, nondeterministic field).
fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            cols[..cols.len() - 1].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn simulate_writes_deterministic_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, small_sim_config(42)).unwrap();

    let mut csvs = Vec::new();
    for run_dir in ["r1", "r2"] {
        let out = dir.path().join(run_dir);
        let res = run(&[
            "simulate",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
        let csv = std::fs::read_to_string(out.join("results_n120_p8.csv")).unwrap();
        assert!(csv.starts_with("method,replicate,l1_error,fdr,support_size,k_hat,q_hat,wall_time_ms"));
        assert_eq!(csv.lines().count(), 1 + 2 * 3, "one row per (method, replicate)");
        assert!(out.join("results_n120_p8.jsonl").exists());
        assert!(out.join("summary.tsv").exists());
        assert!(out.join("manifest.json").exists());
        csvs.push(csv);
    }
    assert_eq!(
        strip_wall_time(&csvs[0]),
        strip_wall_time(&csvs[1]),
        "repeated runs differ beyond wall time"
    );

    // bench aggregates the written cell into a per-(method, n, p) table.
    let res = run(&["bench", dir.path().join("r1").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let bench = std::fs::read_to_string(dir.path().join("r1/bench_summary.tsv")).unwrap();
    assert!(bench.contains("siv") && bench.contains("lasso"));
    assert!(bench.contains("120"));
}

#[test]
fn simulate_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown method key: exit 1, stderr names the key.
    let cfg = dir.path().join("bad_method.json");
    std::fs::write(
        &cfg,
        small_sim_config(1).replace("\"lasso\"", "\"gradient_boost\""),
    )
    .unwrap();
    let res = run(&["simulate", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("gradient_boost"));

    // Unknown config field: exit 1, stderr names the field.
    let cfg = dir.path().join("bad_field.json");
    std::fs::write(
        &cfg,
        small_sim_config(1).replace("\"p\": 8", "\"bogus_key\": 1, \"p\": 8"),
    )
    .unwrap();
    let res = run(&["simulate", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bogus_key"));

    // Invalid parameter values: exit 1 listing every offender.
    let cfg = dir.path().join("bad_values.json");
    std::fs::write(
        &cfg,
        small_sim_config(1)
            .replace("\"sigma_x\": 1.0", "\"sigma_x\": -2.0")
            .replace("\"s\": 2", "\"s\": 99"),
    )
    .unwrap();
    let res = run(&["simulate", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("sigma_x") && err.contains("s="), "stderr: {err}");
}

#[test]
fn shipped_example_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut found = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        found += 1;
        let body = std::fs::read_to_string(&path).unwrap();
        let cfg: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert!(
            cfg["methods"].as_array().map_or(false, |m| !m.is_empty()),
            "{} lacks methods",
            path.display()
        );
    }
    assert!(found >= 5, "expected the committed example configs, found {found}");
}

#[test]
fn nonlinear_estimate_via_cli() {
    // Cubic-link data generated by the library, fit through the CLI.
    let dir = tempfile::tempdir().unwrap();
    let cfg = siv::sim::SimulationConfig {
        n: 800,
        p: 8,
        q: 1,
        s: 2,
        beta_active_value: 0.3,
        sigma_x: 2.0,
        sigma_y: 1.0,
        noise_cov: siv::sim::NoiseCov::Diagonal,
        outcome: siv::sim::Outcome::Cubic,
        loading_dist: siv::sim::LoadingDist::Gaussian,
        seed: 99,
        replicates: 1,
    };
    let data = siv::sim::generate_dataset(&cfg, 0).unwrap();
    let header: Vec<String> = (1..=8).map(|j| format!("x{j}")).collect();
    let mut xbody = header.join(",") + "\n";
    for i in 0..data.n() {
        let row: Vec<String> = (0..8).map(|j| format!("{}", data.x[(i, j)])).collect();
        xbody += &(row.join(",") + "\n");
    }
    std::fs::write(dir.path().join("x.csv"), xbody).unwrap();
    let ybody: String = (0..data.n()).map(|i| format!("{}\n", data.y[i])).collect();
    std::fs::write(dir.path().join("y.csv"), ybody).unwrap();

    let out = dir.path().join("fit");
    let res = run(&[
        "estimate",
        dir.path().join("x.csv").to_str().unwrap(),
        dir.path().join("y.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--q",
        "1",
        "--link",
        "cubic",
    ]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    let b1 = fit["beta"]["x1"].as_f64().unwrap();
    let b2 = fit["beta"]["x2"].as_f64().unwrap();
    assert!((b1 - 0.3).abs() < 0.1 && (b2 - 0.3).abs() < 0.1, "β̂ off: {b1}, {b2}");
}
