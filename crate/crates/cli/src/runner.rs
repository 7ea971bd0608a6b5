//! Runs a configured experiment and writes its result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use pstd::experiments::equivalence::{equivalence_gap, random_system_dataset};
use pstd::experiments::oracles::{analytic_tpsrs, chain_analytic_error, chain_sampled_error, filter_agreement, rank_spectrum};
use pstd::experiments::pricing::{self, PricingSeedResult};
use pstd::experiments::rrpomdp::{self, RrConfig, RrData, RrSeedResult};
use pstd::experiments::{mean_stderr, median};
use pstd::stopping::{write_iterations_csv, Evaluation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ExperimentId, Loaded};

/// Environment variable naming the covariance cache directory.
pub const CACHE_ENV: &str = "PSTD_CACHE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Library(#[from] pstd::Error),
    #[error("{0}")]
    Other(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Outcome of a run: how many seeds completed cleanly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub output_dir: PathBuf,
    pub seeds_ok: Vec<u64>,
    pub seeds_failed: Vec<u64>,
}

impl Summary {
    pub fn complete(&self) -> bool {
        self.seeds_failed.is_empty()
    }
}

pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
}

fn f(x: f64) -> String {
    format!("{x:e}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, RunError> {
    Ok(csv::Writer::from_writer(fs::File::create(path).map_err(io_at(path))?))
}

pub fn run(loaded: &Loaded, options: &RunOptions) -> Result<Summary, RunError> {
    let config = &loaded.config;
    let out = options
        .output_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(config.id().as_str()));
    fs::create_dir_all(&out).map_err(io_at(&out))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| RunError::Other(format!("cannot start worker pool: {e}")))?;
    let (seeds_ok, seeds_failed, extra) = pool.install(|| match config.id() {
        id if id.is_rrpomdp() => run_rrpomdp(config, &out, options.cache_dir.as_deref()),
        ExperimentId::Pricing => run_pricing(config, &out),
        ExperimentId::Equivalence => run_equivalence(config, &out),
        _ => run_oracles(config, &out),
    })?;
    write_manifest(loaded, &out, &seeds_ok, &seeds_failed, &extra)?;
    Ok(Summary { output_dir: out, seeds_ok, seeds_failed })
}

type SeedSplit = (Vec<u64>, Vec<u64>, BTreeMap<&'static str, String>);

fn write_manifest(loaded: &Loaded, out: &Path, ok: &[u64], failed: &[u64], extra: &BTreeMap<&'static str, String>) -> Result<(), RunError> {
    let config = &loaded.config;
    let list = |s: &[u64]| format!("[{}]", s.iter().map(u64::to_string).collect::<Vec<_>>().join(", "));
    let mut text = format!(
        "experiment = \"{}\"\nconfig_sha256 = \"{}\"\nlibrary_version = \"{}\"\nseeds = {}\nseed_count = {}\nseeds_ok = {}\nseeds_failed = {}\n",
        config.id(),
        loaded.sha256,
        pstd::VERSION,
        list(config.seeds()),
        config.seeds().len(),
        list(ok),
        list(failed),
    );
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let path = out.join("manifest.toml");
    fs::write(&path, text).map_err(io_at(&path))
}

fn split_seeds<T>(results: &[(u64, Result<T, String>)], failed: impl Fn(&T) -> bool) -> (Vec<u64>, Vec<u64>) {
    let ok = results.iter().filter(|(_, r)| r.as_ref().is_ok_and(|x| !failed(x))).map(|(s, _)| *s).collect();
    let bad = results.iter().filter(|(_, r)| r.as_ref().map_or(true, &failed)).map(|(s, _)| *s).collect();
    (ok, bad)
}

/// Runs `job` for every seed on the pool; results come back sorted by seed.
fn per_seed<T: Send>(seeds: &[u64], job: impl Fn(u64) -> Result<T, String> + Sync) -> Vec<(u64, Result<T, String>)> {
    let mut results: Vec<_> = seeds.par_iter().map(|&s| (s, job(s))).collect();
    results.sort_by_key(|(s, _)| *s);
    results
}

fn cached_data(config: &RrConfig, seed: u64, cache: Option<&Path>) -> pstd::Result<RrData> {
    let Some(root) = cache else {
        return rrpomdp::prepare(config, seed);
    };
    let key = hex::encode(Sha256::digest(rrpomdp::data_key(config, seed).as_bytes()));
    let dir = root.join(&key);
    if dir.join("complete").exists() {
        match RrData::load_dir(&dir) {
            Ok(d) => return Ok(d),
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", dir.display()),
        }
    }
    let data = rrpomdp::prepare(config, seed)?;
    // write to a private directory first so concurrent runs never see partial entries
    let tmp = root.join(format!("{key}.tmp{}", std::process::id()));
    let stored = data.save_dir(&tmp).and_then(|_| Ok(fs::write(tmp.join("complete"), "")?));
    match stored {
        Ok(()) => {
            if fs::rename(&tmp, &dir).is_err() {
                let _ = fs::remove_dir_all(&tmp);
            }
        }
        Err(e) => {
            log::warn!("cannot write cache entry {}: {e}", dir.display());
            let _ = fs::remove_dir_all(&tmp);
        }
    }
    Ok(data)
}

fn run_rrpomdp(config: &ExperimentConfig, out: &Path, cache: Option<&Path>) -> Result<SeedSplit, RunError> {
    let section = config.rrpomdp.as_ref().expect("validated");
    let rr = section.to_config();
    let results: Vec<(u64, Result<RrSeedResult, String>)> = per_seed(config.seeds(), |seed| {
        let data = cached_data(&rr, seed, cache).map_err(|e| e.to_string())?;
        let r = rrpomdp::evaluate_learners(&rr, seed, &data);
        log::info!("seed {seed}: {} samples", r.samples);
        Ok(r)
    });
    let mut w = writer(&out.join("per_seed.csv"))?;
    w.write_record(["seed", "learner", "status", "mse", "message"])?;
    for (seed, r) in &results {
        match r {
            Ok(r) => {
                for (l, m) in &r.mse {
                    match m {
                        Ok(m) => w.write_record([seed.to_string(), l.to_string(), "ok".into(), f(*m), String::new()])?,
                        Err(e) => w.write_record([seed.to_string(), l.to_string(), "error".into(), String::new(), e.clone()])?,
                    }
                }
            }
            Err(e) => w.write_record([seed.to_string(), String::new(), "error".into(), String::new(), e.clone()])?,
        }
    }
    w.flush().map_err(io_at(out))?;
    let mut w = writer(&out.join("aggregate.csv"))?;
    w.write_record(["learner", "seeds_ok", "seeds_failed", "mean", "stderr", "median"])?;
    for &l in &rr.learners {
        let values: Vec<f64> = results.iter().filter_map(|(_, r)| r.as_ref().ok()?.mse[&l].as_ref().ok().copied()).collect();
        let (mean, se) = mean_stderr(&values).map_or((String::new(), String::new()), |(m, s)| (f(m), f(s)));
        let med = median(&values).map_or(String::new(), f);
        w.write_record([l.to_string(), values.len().to_string(), (results.len() - values.len()).to_string(), mean, se, med])?;
    }
    w.flush().map_err(io_at(out))?;
    let (ok, bad) = split_seeds(&results, |r| r.mse.values().any(|m| m.is_err()));
    let mut extra = BTreeMap::new();
    extra.insert("features", (rr.rbf_features + rr.random_features).to_string());
    Ok((ok, bad, extra))
}

fn evaluation_row(seed: u64, series: &str, iteration: &str, e: &Evaluation) -> Vec<String> {
    vec![
        seed.to_string(),
        series.to_string(),
        iteration.to_string(),
        "ok".into(),
        f(e.mean),
        f(e.stderr),
        f(e.undiscounted_mean),
        f(e.undiscounted_stderr),
        f(e.stop_rate),
        String::new(),
    ]
}

fn run_pricing(config: &ExperimentConfig, out: &Path) -> Result<SeedSplit, RunError> {
    let pc = config.pricing.as_ref().expect("validated").to_config();
    let results: Vec<(u64, Result<PricingSeedResult, String>)> = per_seed(config.seeds(), |seed| pricing::run_seed(&pc, seed).map_err(|e| e.to_string()));
    let mut w = writer(&out.join("per_seed.csv"))?;
    w.write_record(["seed", "series", "iteration", "status", "payoff", "stderr", "undiscounted", "undiscounted_stderr", "stop_rate", "message"])?;
    // series -> iteration -> per-seed payoffs
    let mut table: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut baselines: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (seed, r) in &results {
        let r = match r {
            Ok(r) => r,
            Err(e) => {
                w.write_record([seed.to_string(), String::new(), String::new(), "error".into(), String::new(), String::new(), String::new(), String::new(), String::new(), e.clone()])?;
                continue;
            }
        };
        w.write_record(evaluation_row(*seed, "stop_now", "", &r.stop_now))?;
        w.write_record(evaluation_row(*seed, &format!("threshold_{:.2}", r.threshold_level), "", &r.threshold))?;
        baselines.entry("stop_now").or_default().push(r.stop_now.mean);
        baselines.entry("threshold").or_default().push(r.threshold.mean);
        for run in &r.runs {
            let label = run.label();
            match &run.result {
                Ok(records) => {
                    for rec in records {
                        w.write_record(evaluation_row(*seed, &label, &rec.iteration.to_string(), &rec.evaluation))?;
                        table.entry(label.clone()).or_default().entry(rec.iteration).or_default().push(rec.evaluation.mean);
                    }
                }
                Err(e) => {
                    let mut row = vec![String::new(); 10];
                    row[0] = seed.to_string();
                    row[1] = label;
                    row[3] = "error".into();
                    row[9] = e.clone();
                    w.write_record(row)?;
                }
            }
        }
    }
    w.flush().map_err(io_at(out))?;
    // final-iteration curves, one file per learner, in the layout of the library writer
    for i in 0..pc.learners.len() {
        let path = out.join(format!("iterations_{i}.csv"));
        let file = fs::File::create(&path).map_err(io_at(&path))?;
        let mut header = true;
        let mut file = std::io::BufWriter::new(file);
        for (_, r) in &results {
            if let Ok(r) = r {
                if let Ok(records) = &r.runs[i].result {
                    write_iterations_csv(&mut file, &r.runs[i].label(), records, header)?;
                    header = false;
                }
            }
        }
        std::io::Write::flush(&mut file).map_err(io_at(&path))?;
    }
    let mut w = writer(&out.join("aggregate.csv"))?;
    w.write_record(["series", "iteration", "seeds", "mean", "stderr"])?;
    for (name, values) in &baselines {
        let (m, s) = mean_stderr(values).expect("nonempty");
        w.write_record([name.to_string(), String::new(), values.len().to_string(), f(m), f(s)])?;
    }
    for (label, iters) in &table {
        for (it, values) in iters {
            let (m, s) = mean_stderr(values).expect("nonempty");
            w.write_record([label.clone(), it.to_string(), values.len().to_string(), f(m), f(s)])?;
        }
    }
    w.flush().map_err(io_at(out))?;
    let (ok, bad) = split_seeds(&results, |r| r.runs.iter().any(|x| x.result.is_err()));
    Ok((ok, bad, BTreeMap::new()))
}

fn run_equivalence(config: &ExperimentConfig, out: &Path) -> Result<SeedSplit, RunError> {
    let e = config.equivalence.as_ref().expect("validated");
    let results = per_seed(config.seeds(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..e.datasets.0)
            .map(|i| {
                let n = i % e.max_latent_dim.0 + 1;
                let cs = random_system_dataset(&mut rng, e.samples.0, e.history_dim.0, e.future_dim.0, n)?;
                Ok((n, equivalence_gap(&cs, n, e.gamma.0)?.max_abs_diff))
            })
            .collect::<pstd::Result<Vec<_>>>()
            .map_err(|err| err.to_string())
    });
    let tol = e.tolerance.0;
    let mut w = writer(&out.join("per_seed.csv"))?;
    w.write_record(["seed", "dataset", "latent_dim", "status", "max_abs_diff", "message"])?;
    let mut worst: f64 = 0.0;
    for (seed, r) in &results {
        match r {
            Ok(gaps) => {
                for (i, (n, gap)) in gaps.iter().enumerate() {
                    worst = worst.max(*gap);
                    let status = if *gap <= tol { "ok" } else { "fail" };
                    w.write_record([seed.to_string(), i.to_string(), n.to_string(), status.into(), f(*gap), String::new()])?;
                }
            }
            Err(err) => w.write_record([seed.to_string(), String::new(), String::new(), "error".into(), String::new(), err.clone()])?,
        }
    }
    w.flush().map_err(io_at(out))?;
    let (ok, bad) = split_seeds(&results, |gaps| gaps.iter().any(|(_, g)| *g > tol));
    let pass = bad.is_empty();
    println!("max |w_pstd - w_tpsr| = {worst:e} (tolerance {tol:e}): {}", if pass { "PASS" } else { "FAIL" });
    let mut extra = BTreeMap::new();
    extra.insert("max_abs_diff", f(worst));
    extra.insert("pass", pass.to_string());
    Ok((ok, bad, extra))
}

struct OracleRow {
    check: &'static str,
    value: f64,
    /// Bound the value must stay within, when the check has one.
    tolerance: Option<f64>,
    pass: bool,
}

fn run_oracles(config: &ExperimentConfig, out: &Path) -> Result<SeedSplit, RunError> {
    let o = config.oracles.as_ref().expect("validated");
    let (lh, lt, dim) = (o.history_len.0, o.future_len.0, o.dim.0);
    let spectrum = rank_spectrum(lh, lt)?;
    let chain = chain_analytic_error()?;
    let models = analytic_tpsrs(dim, lh, lt)?;
    let results = per_seed(config.seeds(), |seed| {
        let run = || -> pstd::Result<Vec<OracleRow>> {
            let a = filter_agreement(&models, o.filter_steps.0, seed)?;
            let small = chain_sampled_error(o.chain_small.0, seed)?;
            let large = chain_sampled_error(o.chain_large.0, seed)?;
            Ok(vec![
                OracleRow { check: "filter_gap_belief_features", value: a.belief_features, tolerance: Some(1e-6), pass: a.belief_features <= 1e-6 },
                OracleRow { check: "filter_gap_one_hot_windows", value: a.one_hot_windows, tolerance: Some(1e-6), pass: a.one_hot_windows <= 1e-6 },
                OracleRow { check: "chain_error_small", value: small, tolerance: None, pass: true },
                OracleRow { check: "chain_error_large", value: large, tolerance: Some(small), pass: large < small },
            ])
        };
        run().map_err(|e| e.to_string())
    });
    let mut w = writer(&out.join("per_seed.csv"))?;
    w.write_record(["seed", "check", "status", "value", "tolerance", "message"])?;
    let ratio = spectrum.ratio(dim.min(spectrum.singular_values.len() - 1));
    let global = [
        OracleRow { check: "rank_ratio", value: ratio, tolerance: Some(1e-8), pass: ratio <= 1e-8 },
        OracleRow { check: "chain_analytic_error", value: chain, tolerance: Some(1e-10), pass: chain <= 1e-10 },
    ];
    let status = |p: bool| if p { "ok" } else { "fail" };
    for row in &global {
        w.write_record([String::new(), row.check.into(), status(row.pass).into(), f(row.value), row.tolerance.map_or(String::new(), f), String::new()])?;
    }
    for (seed, r) in &results {
        match r {
            Ok(rows) => {
                for row in rows {
                    w.write_record([seed.to_string(), row.check.into(), status(row.pass).into(), f(row.value), row.tolerance.map_or(String::new(), f), String::new()])?;
                }
            }
            Err(e) => w.write_record([seed.to_string(), String::new(), "error".into(), String::new(), String::new(), e.clone()])?,
        }
    }
    w.flush().map_err(io_at(out))?;
    let mut sw = writer(&out.join("spectrum.csv"))?;
    sw.write_record(["index", "singular_value", "weighted"])?;
    for (i, s) in spectrum.singular_values.iter().enumerate() {
        sw.write_record([i.to_string(), f(*s), spectrum.weighted.get(i).map_or(String::new(), |x| f(*x))])?;
    }
    sw.flush().map_err(io_at(out))?;
    let (ok, mut bad) = split_seeds(&results, |rows| rows.iter().any(|r| !r.pass));
    let mut extra = BTreeMap::new();
    extra.insert("global_checks_pass", global.iter().all(|r| r.pass).to_string());
    if !global.iter().all(|r| r.pass) {
        // a failed seed-independent check taints every seed
        bad = config.seeds().to_vec();
        return Ok((Vec::new(), bad, extra));
    }
    Ok((ok, bad, extra))
}
