use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkSpec;
use crate::training::{train, EvalRecord, TrainConfig, TrainingData};

/// One seeded training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Step selected by validation RMSE.
    pub best_step: Option<u64>,
    pub best_val_rmse: Option<f64>,
    /// Test RMSE of the selected parameters.
    pub test_rmse: Option<f64>,
    pub curve: Vec<EvalRecord>,
    pub skipped_batches: u64,
    /// Set when the run aborted.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: Vec<RunRecord>,
    pub completed: usize,
    pub mean: Option<f64>,
    /// Population standard deviation over completed runs.
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub argmin_run: Option<usize>,
    pub argmin_step: Option<u64>,
}

impl RunSummary {
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let done: Vec<(usize, u64, f64)> =
            runs.iter().filter_map(|r| Some((r.run, r.best_step?, r.test_rmse?))).collect();
        if done.is_empty() {
            return Self { runs, completed: 0, mean: None, std: None, min: None, argmin_run: None, argmin_step: None };
        }
        let n = done.len() as f64;
        let mean = done.iter().map(|d| d.2).sum::<f64>() / n;
        let std = (done.iter().map(|d| (d.2 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let best = done.iter().fold(done[0], |b, &d| if d.2 < b.2 { d } else { b });
        Self {
            completed: done.len(),
            runs,
            mean: Some(mean),
            std: Some(std),
            min: Some(best.2),
            argmin_run: Some(best.0),
            argmin_step: Some(best.1),
        }
    }
}

/// Trains one model per seed and scores each on the test units with its
/// best-on-validation parameters. Divergent runs are recorded and left out
/// of the aggregate; any other error aborts the experiment.
pub fn run_experiment_with_seeds(data: &TrainingData, spec: &NetworkSpec, config: &TrainConfig, seeds: &[u64]) -> Result<RunSummary> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    if data.test.is_empty() {
        return Err(Error::InvalidArgument("experiments need scored test units".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for (run, &seed) in seeds.iter().enumerate() {
        let cfg = TrainConfig { seed, ..config.clone() };
        let started = std::time::Instant::now();
        let record = match train(data, spec, &cfg) {
            Ok(out) => RunRecord {
                run,
                seed,
                best_step: out.best.as_ref().map(|b| b.step),
                best_val_rmse: out.best.as_ref().and_then(|b| b.val_rmse),
                test_rmse: out.best.as_ref().and_then(|b| b.test_rmse),
                curve: out.trace.evals,
                skipped_batches: out.skipped_batches,
                error: None,
            },
            Err(e @ Error::Diverged(_)) => RunRecord {
                run,
                seed,
                best_step: None,
                best_val_rmse: None,
                test_rmse: None,
                curve: Vec::new(),
                skipped_batches: 0,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        log::info!(
            "run {run} (seed {seed}): test RMSE {:?} at step {:?} in {:.1}s",
            record.test_rmse,
            record.best_step,
            started.elapsed().as_secs_f64()
        );
        runs.push(record);
    }
    Ok(RunSummary::from_runs(runs))
}

/// `n_runs` runs seeded `config.seed + run`.
pub fn run_experiment(data: &TrainingData, spec: &NetworkSpec, config: &TrainConfig, n_runs: usize) -> Result<RunSummary> {
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| config.seed.wrapping_add(i)).collect();
    run_experiment_with_seeds(data, spec, config, &seeds)
}

#[derive(Serialize)]
struct GlobalMin {
    run: usize,
    step: u64,
    rmse: f64,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    n_runs: usize,
    completed: usize,
    mean: Option<f64>,
    std: Option<f64>,
    min: Option<f64>,
    argmin_run: Option<usize>,
    argmin_step: Option<u64>,
    global_min: Option<GlobalMin>,
    runs: Vec<SummaryRun<'a>>,
}

#[derive(Serialize)]
struct SummaryRun<'a> {
    run: usize,
    seed: u64,
    best_step: Option<u64>,
    best_val_rmse: Option<f64>,
    test_rmse: Option<f64>,
    error: Option<&'a str>,
}

/// Writes `curves.csv` and `summary.json` into `dir`.
///
/// The curve file has one row per evaluation with a test score; `selected`
/// flags each run's best-on-validation row and `global_min` the row with
/// the smallest test RMSE overall.
pub fn emit_plot_data(summary: &RunSummary, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    if summary.runs.is_empty() {
        return Err(Error::InvalidArgument("empty summary".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let rows: Vec<(usize, &EvalRecord, f64)> = summary
        .runs
        .iter()
        .flat_map(|r| r.curve.iter().filter_map(move |e| Some((r.run, e, e.test_rmse?))))
        .collect();
    let global = rows.iter().enumerate().fold(None::<(usize, f64)>, |b, (i, r)| match b {
        Some((_, v)) if v <= r.2 => b,
        _ => Some((i, r.2)),
    });

    let curves = dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&curves)?;
    w.write_record(["run", "step", "rmse", "val_rmse", "selected", "global_min"])?;
    for (i, (run, e, rmse)) in rows.iter().enumerate() {
        let selected = summary.runs[*run].best_step == Some(e.step) && summary.runs[*run].error.is_none();
        let val = e.val_rmse.map(|v| v.to_string()).unwrap_or_default();
        let is_min = global.map(|g| g.0) == Some(i);
        w.write_record([
            run.to_string(),
            e.step.to_string(),
            rmse.to_string(),
            val,
            (selected as u8).to_string(),
            (is_min as u8).to_string(),
        ])?;
    }
    w.flush()?;

    let file = SummaryFile {
        n_runs: summary.runs.len(),
        completed: summary.completed,
        mean: summary.mean,
        std: summary.std,
        min: summary.min,
        argmin_run: summary.argmin_run,
        argmin_step: summary.argmin_step,
        global_min: global.map(|(i, rmse)| GlobalMin { run: rows[i].0, step: rows[i].1.step, rmse }),
        runs: summary
            .runs
            .iter()
            .map(|r| SummaryRun {
                run: r.run,
                seed: r.seed,
                best_step: r.best_step,
                best_val_rmse: r.best_val_rmse,
                test_rmse: r.test_rmse,
                error: r.error.as_deref(),
            })
            .collect(),
    };
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok((curves, path))
}
