//! Long-format plot tables (`series,x,mean,stderr`) from a results directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pstd::experiments::mean_stderr;

use crate::config::ExperimentId;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("missing results: {0} not found")]
    Missing(PathBuf),
    #[error("malformed results in {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

type Rows = Vec<BTreeMap<String, String>>;

fn read_rows(path: &Path) -> Result<Rows, PlotError> {
    if !path.exists() {
        return Err(PlotError::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn number(row: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<f64, PlotError> {
    row.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| PlotError::Malformed { path: path.to_path_buf(), message: format!("column `{key}` is missing or not a number") })
}

/// One point of a plot series.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub series: String,
    pub x: f64,
    pub mean: f64,
    pub stderr: f64,
}

fn write_points(path: &Path, points: &[Point]) -> Result<(), PlotError> {
    let file = fs::File::create(path).map_err(|source| PlotError::Write { path: path.to_path_buf(), source })?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["series", "x", "mean", "stderr"])?;
    for p in points {
        w.write_record([p.series.clone(), format!("{}", p.x), format!("{:e}", p.mean), format!("{:e}", p.stderr)])?;
    }
    w.flush().map_err(|source| PlotError::Write { path: path.to_path_buf(), source })
}

fn read_manifest(dir: &Path) -> Result<toml::Table, PlotError> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|_| PlotError::Missing(path.clone()))?;
    text.parse().map_err(|e: toml::de::Error| PlotError::Malformed { path, message: e.message().to_string() })
}

fn summarize(groups: BTreeMap<(String, i64), Vec<f64>>) -> Vec<Point> {
    groups
        .into_iter()
        .filter_map(|((series, x), v)| mean_stderr(&v).map(|(mean, stderr)| Point { series, x: x as f64, mean, stderr }))
        .collect()
}

/// Writes the plot table for the experiment in `dir` and returns its path.
pub fn emit_plot_data(dir: &Path) -> Result<PathBuf, PlotError> {
    let manifest = read_manifest(dir)?;
    let manifest_path = dir.join("manifest.toml");
    let id: ExperimentId = manifest
        .get("experiment")
        .and_then(|v| v.as_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PlotError::Malformed { path: manifest_path.clone(), message: "no valid `experiment` entry".into() })?;
    let (name, points) = match id {
        id if id.is_rrpomdp() => {
            let path = dir.join("aggregate.csv");
            let x = manifest
                .get("features")
                .and_then(|v| v.as_integer())
                .ok_or_else(|| PlotError::Malformed { path: manifest_path.clone(), message: "no `features` entry".into() })?;
            let mut points = Vec::new();
            for row in read_rows(&path)? {
                if row.get("mean").is_some_and(|m| !m.is_empty()) {
                    points.push(Point { series: row["learner"].clone(), x: x as f64, mean: number(&row, "mean", &path)?, stderr: number(&row, "stderr", &path)? });
                }
            }
            ("plot_mse.csv", points)
        }
        ExperimentId::Pricing => {
            let path = dir.join("aggregate.csv");
            let rows = read_rows(&path)?;
            let max_iter = rows.iter().filter_map(|r| r.get("iteration")?.parse::<usize>().ok()).max().unwrap_or(0);
            let mut points = Vec::new();
            for row in &rows {
                let (mean, stderr) = (number(row, "mean", &path)?, number(row, "stderr", &path)?);
                match row.get("iteration").and_then(|i| i.parse::<usize>().ok()) {
                    Some(it) => points.push(Point { series: row["series"].clone(), x: it as f64, mean, stderr }),
                    // baselines do not depend on the iteration
                    None => points.extend((0..=max_iter).map(|it| Point { series: row["series"].clone(), x: it as f64, mean, stderr })),
                }
            }
            ("plot_payoff.csv", points)
        }
        ExperimentId::Equivalence => {
            let path = dir.join("per_seed.csv");
            let mut groups: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
            for row in read_rows(&path)?.iter().filter(|r| r.get("status").is_some_and(|s| s != "error")) {
                let n = number(row, "latent_dim", &path)? as i64;
                groups.entry((format!("latent_dim_{n}"), n)).or_default().push(number(row, "max_abs_diff", &path)?);
            }
            ("plot_gap.csv", summarize(groups))
        }
        _ => {
            let path = dir.join("per_seed.csv");
            let mut groups: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
            for row in read_rows(&path)?.iter().filter(|r| r.get("status").is_some_and(|s| s != "error")) {
                groups.entry((row["check"].clone(), 0)).or_default().push(number(row, "value", &path)?);
            }
            let mut points = summarize(groups);
            let spectrum = dir.join("spectrum.csv");
            for row in read_rows(&spectrum)? {
                points.push(Point { series: "singular_value".into(), x: number(&row, "index", &spectrum)?, mean: number(&row, "singular_value", &spectrum)?, stderr: 0.0 });
            }
            ("plot_checks.csv", points)
        }
    };
    let out = dir.join(name);
    write_points(&out, &points)?;
    Ok(out)
}
