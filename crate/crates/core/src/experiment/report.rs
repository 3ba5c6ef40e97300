//! Cross-run comparison tables: one row per method, metrics pooled over
//! every seed of every run of that method, plus plot-ready CSV exports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::METHOD_ROW_ORDER;
use crate::error::{Error, Result};
use crate::eval::{aggregate_report, MetricReport};
use crate::experiment::{manifest_path, run_metrics_path, RunMetrics};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub runs: usize,
    pub seeds: usize,
    pub clients_per_seed: Vec<usize>,
    pub epsilon_max: Option<f64>,
    pub metrics: BTreeMap<String, MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub dataset_sha256: String,
    pub rows: Vec<ReportRow>,
}

/// Run directories directly under `root` (or `root` itself). A completed run
/// is recognised by its run-level `metrics.json` plus `manifest.json` pair;
/// the manifest requirement keeps per-seed `metrics.json` files (which live
/// one level deeper, without a manifest) from being picked up as runs.
pub fn scan_runs(root: &Path) -> Result<Vec<PathBuf>> {
    fn is_run_dir(path: &Path) -> bool {
        run_metrics_path(path).is_file() && manifest_path(path).is_file()
    }
    let mut found = Vec::new();
    if is_run_dir(root) {
        found.push(root.to_path_buf());
    }
    if root.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() && is_run_dir(&path) {
                found.push(path);
            }
        }
    }
    Ok(found)
}

pub fn load_runs(run_dirs: &[PathBuf]) -> Result<Vec<RunMetrics>> {
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let path = run_metrics_path(dir);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "{} is not a completed run (no metrics.json)",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&path)?;
        let run: RunMetrics = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("cannot parse {}: {e}", path.display())))?;
        runs.push(run);
    }
    Ok(runs)
}

fn method_sort_key(method: &str) -> (usize, String) {
    match METHOD_ROW_ORDER.iter().position(|m| *m == method) {
        Some(i) => (i, String::new()),
        None => (METHOD_ROW_ORDER.len(), method.to_string()),
    }
}

/// Pool each metric across runs of one method by concatenating their
/// per-seed rows. A metric appears only if every run of the method has it.
fn pool_method(method: &str, runs: &[&RunMetrics]) -> Result<ReportRow> {
    let mut names: Vec<String> = runs[0].metrics.keys().cloned().collect();
    names.retain(|n| runs.iter().all(|r| r.metrics.contains_key(n)));

    let mut metrics = BTreeMap::new();
    for name in names {
        let mut seeds = Vec::new();
        let mut values = Vec::new();
        for run in runs {
            let report = &run.metrics[&name];
            seeds.extend_from_slice(&report.seeds);
            values.extend(report.per_seed_client_values.iter().cloned());
        }
        metrics.insert(name, aggregate_report(&seeds, &values)?);
    }
    let epsilon_max = runs
        .iter()
        .filter_map(|r| r.epsilon_max)
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    Ok(ReportRow {
        method: method.to_string(),
        runs: runs.len(),
        seeds: runs.iter().map(|r| r.seeds.len()).sum(),
        clients_per_seed: runs.iter().map(|r| r.clients_per_seed).collect(),
        epsilon_max,
        metrics,
    })
}

pub fn build_report(runs: &[RunMetrics]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Data("no completed runs to report on".into()));
    }
    let dataset = &runs[0].dataset_sha256;
    for run in runs {
        if &run.dataset_sha256 != dataset {
            return Err(Error::Data(format!(
                "runs mix different datasets ({} vs {}); report on one dataset at a time",
                &dataset[..12.min(dataset.len())],
                &run.dataset_sha256[..12.min(run.dataset_sha256.len())]
            )));
        }
    }

    let mut by_method: BTreeMap<&str, Vec<&RunMetrics>> = BTreeMap::new();
    for run in runs {
        by_method.entry(run.method.as_str()).or_default().push(run);
    }
    let mut methods: Vec<&str> = by_method.keys().copied().collect();
    methods.sort_by_key(|m| method_sort_key(m));

    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        rows.push(pool_method(method, &by_method[method])?);
    }
    Ok(Report { dataset_sha256: dataset.clone(), rows })
}

fn cell(report: Option<&MetricReport>) -> String {
    match report {
        Some(r) => format!("{:.4} ± {:.4}", r.mean, r.std),
        None => String::new(),
    }
}

/// Build the comparison report and write `report.json`, `report.csv`, and
/// the plot-data files `plot_fidelity.csv` / `plot_bacc.csv` into `out_dir`.
pub fn report_tables(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    let runs = load_runs(run_dirs)?;
    let report = build_report(&runs)?;
    std::fs::create_dir_all(out_dir)?;

    let value = serde_json::to_value(&report)
        .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
    std::fs::write(out_dir.join("report.json"), crate::config::to_canonical_json(&value))?;

    let mut table = csv::Writer::from_path(out_dir.join("report.csv"))?;
    table.write_record([
        "method",
        "runs",
        "seeds",
        "acc",
        "bacc",
        "wasserstein",
        "epsilon_max",
    ])?;
    for row in &report.rows {
        table.write_record([
            row.method.clone(),
            row.runs.to_string(),
            row.seeds.to_string(),
            cell(row.metrics.get("acc")),
            cell(row.metrics.get("bacc")),
            cell(row.metrics.get("wasserstein")),
            row.epsilon_max.map(|e| format!("{e:.4}")).unwrap_or_default(),
        ])?;
    }
    table.flush()?;

    let mut fidelity = csv::Writer::from_path(out_dir.join("plot_fidelity.csv"))?;
    fidelity.write_record(["method", "seed", "wasserstein"])?;
    for row in &report.rows {
        if let Some(r) = row.metrics.get("wasserstein") {
            for (seed, mean) in r.seeds.iter().zip(&r.per_seed_means) {
                fidelity.write_record([
                    row.method.clone(),
                    seed.to_string(),
                    format!("{mean:.6}"),
                ])?;
            }
        }
    }
    fidelity.flush()?;

    let mut bacc = csv::Writer::from_path(out_dir.join("plot_bacc.csv"))?;
    bacc.write_record(["method", "clients", "seed", "bacc"])?;
    for row in &report.rows {
        if let Some(r) = row.metrics.get("bacc") {
            for ((seed, mean), values) in
                r.seeds.iter().zip(&r.per_seed_means).zip(&r.per_seed_client_values)
            {
                bacc.write_record([
                    row.method.clone(),
                    values.len().to_string(),
                    seed.to_string(),
                    format!("{mean:.6}"),
                ])?;
            }
        }
    }
    bacc.flush()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_fixture(method: &str, seeds: &[u64], bacc: &[Vec<f64>], dataset: &str) -> RunMetrics {
        let mut metrics = BTreeMap::new();
        metrics.insert("bacc".to_string(), aggregate_report(seeds, bacc).unwrap());
        RunMetrics {
            clients_per_seed: bacc[0].len(),
            dataset_sha256: dataset.to_string(),
            epsilon_max: None,
            method: method.to_string(),
            metrics,
            seeds: seeds.to_vec(),
        }
    }

    #[test]
    fn same_method_runs_merge_into_one_row() {
        let a = run_fixture("dp-cvae", &[0, 1], &[vec![0.8, 0.6], vec![0.7, 0.9]], "ds");
        let b = run_fixture("dp-cvae", &[2], &[vec![0.5, 0.5]], "ds");
        let report = build_report(&[a, b]).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.runs, 2);
        assert_eq!(row.seeds, 3);
        let pooled = &row.metrics["bacc"];
        assert_eq!(pooled.seeds, vec![0, 1, 2]);
        // Per-seed means 0.7, 0.8, 0.5 → pooled mean over the three seeds.
        assert!((pooled.mean - (0.7 + 0.8 + 0.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rows_follow_the_fixed_method_order() {
        let runs = vec![
            run_fixture("dp-cgan", &[0], &[vec![0.1]], "ds"),
            run_fixture("fedlambda", &[0], &[vec![0.2]], "ds"),
            run_fixture("dp-cvae", &[0], &[vec![0.3]], "ds"),
            run_fixture("fedavg", &[0], &[vec![0.4]], "ds"),
            run_fixture("fedprox", &[0], &[vec![0.5]], "ds"),
        ];
        let report = build_report(&runs).unwrap();
        let order: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(order, vec!["fedavg", "fedprox", "fedlambda", "dp-cvae", "dp-cgan"]);
    }

    #[test]
    fn mixed_datasets_are_refused() {
        let a = run_fixture("fedavg", &[0], &[vec![0.4]], "dataset-one");
        let b = run_fixture("fedprox", &[0], &[vec![0.5]], "dataset-two");
        let err = build_report(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("dataset"), "got: {err}");
    }

    #[test]
    fn empty_run_set_is_an_error() {
        assert!(build_report(&[]).is_err());
    }

    #[test]
    fn table_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run_a");
        std::fs::create_dir_all(&run_dir).unwrap();
        let run = run_fixture("fedavg", &[0, 1], &[vec![0.5, 0.7], vec![0.6, 0.8]], "ds");
        let text = serde_json::to_value(&run).unwrap();
        std::fs::write(
            run_metrics_path(&run_dir),
            crate::config::to_canonical_json(&text),
        )
        .unwrap();

        let out = dir.path().join("tables");
        let report = report_tables(&[run_dir], &out).unwrap();
        assert_eq!(report.rows.len(), 1);
        for file in ["report.json", "report.csv", "plot_fidelity.csv", "plot_bacc.csv"] {
            assert!(out.join(file).is_file(), "missing {file}");
        }
        let csv_text = std::fs::read_to_string(out.join("report.csv")).unwrap();
        assert!(csv_text.contains("fedavg"));
        assert!(csv_text.contains('±'));
    }
}
