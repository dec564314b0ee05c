use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use avfp_core::checks::{gradcheck_suite, kalman_bound_suite, OracleConfig};
use avfp_core::data::surrogate::{self, SurrogateConfig};
use avfp_core::data::write_normalized_csv;
use avfp_core::eval::{emit_plot_data, predict_rul, rmse, run_experiment, PredictionMode, PredictionSet, RunSummary};
use avfp_core::training::{load_checkpoint, save_checkpoint, Checkpoint, Trainer, TrainingData};
use avfp_core::ModelParams;
use serde::Serialize;

use crate::config::RunConfig;
use crate::fleet::{Fleet, Normalized};
use crate::{CliError, DataArgs};

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    config_hash: String,
    config: &'a RunConfig,
    seed: u64,
    data_files: BTreeMap<String, String>,
    wall_time_secs: f64,
}

fn write_manifest(dir: &Path, command: &str, config: &RunConfig, fleet: &Fleet, started: Instant) -> Result<(), CliError> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config.hash(),
        config,
        seed: config.seed,
        data_files: fleet.checksums()?,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map(RunConfig::load).transpose().map(Option::unwrap_or_default)
}

fn training_data(norm: &Normalized, fleet: &Fleet, config: &RunConfig) -> Result<TrainingData, CliError> {
    Ok(TrainingData::from_datasets(&norm.train, Some((&norm.test, &fleet.truth)), config.rul_cap, config.validation_fraction)?)
}

fn dims(ds: &avfp_core::data::Dataset) -> (usize, usize) {
    (ds.channels.sensors.len(), ds.channels.settings.len())
}

pub fn ingest(data: &DataArgs, out: &Path) -> Result<(), CliError> {
    let fleet = Fleet::load(data)?;
    let norm = fleet.normalized(None)?;
    std::fs::create_dir_all(out)?;
    write_normalized_csv(&norm.train, out.join("train_norm.csv"))?;
    write_normalized_csv(&norm.test, out.join("test_norm.csv"))?;
    norm.stats.save(out.join("stats.json"))?;
    println!(
        "train: {} units, {} rows; test: {} units, {} rows",
        fleet.train.n_units(),
        fleet.train.n_rows(),
        fleet.test.n_units(),
        fleet.test.n_rows()
    );
    println!(
        "retained {} settings and {} sensors; dropped {:?}",
        norm.stats.settings.len(),
        norm.stats.sensors.len(),
        norm.stats.dropped
    );
    Ok(())
}

pub fn train(
    data: &DataArgs,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let started = Instant::now();
    let fleet = Fleet::load(data)?;
    let (state, stats, mut run_config, norm) = match resume {
        Some(path) => {
            if config.is_some() || seed.is_some() {
                return Err(CliError::Usage("--resume continues the stored configuration; drop --config and --seed".into()));
            }
            let ckpt = load_checkpoint(path)?;
            let stats =
                ckpt.normalization.ok_or_else(|| CliError::Data("checkpoint carries no normalization statistics".into()))?;
            let norm = fleet.normalized(Some(&stats))?;
            check_spec(ckpt.state.params.spec(), &norm)?;
            let c = RunConfig::from_parts(&ckpt.state.config, ckpt.state.params.spec());
            (Some(ckpt.state), stats, c, norm)
        }
        None => {
            let mut c = load_config(config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            let norm = fleet.normalized(None)?;
            (None, norm.stats.clone(), c, norm)
        }
    };
    if let Some(e) = epochs {
        run_config.epochs = e;
    }
    let tdata = training_data(&norm, &fleet, &run_config)?;
    let mut trainer = match state {
        Some(mut state) => {
            state.config.epochs = run_config.epochs;
            Trainer::from_state(&tdata, state)?
        }
        None => {
            let (n_x, n_u) = dims(&norm.train);
            let spec = run_config.network_spec(n_x, n_u)?;
            Trainer::new(&tdata, &spec, &run_config.train_config())?
        }
    };
    log::info!("training {} steps from step {}", trainer.total_steps(), trainer.state().step);
    let result = trainer.run();
    std::fs::create_dir_all(out)?;
    let state = trainer.into_state();
    let best = state.best.clone();
    let trace = state.trace.clone();
    save_checkpoint(out.join("checkpoint.avfp"), &Checkpoint::new(state, Some(stats)))?;
    write_json(&out.join("trace.json"), &trace)?;
    write_manifest(out, "train", &run_config, &fleet, started)?;
    result?;
    match best {
        Some(b) => println!(
            "selected step {}: validation RMSE {}, test RMSE {}",
            b.step,
            fmt_opt(b.val_rmse),
            fmt_opt(b.test_rmse)
        ),
        None => println!("no evaluation was run"),
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

fn check_spec(spec: &avfp_core::NetworkSpec, norm: &Normalized) -> Result<(), CliError> {
    let (n_x, n_u) = dims(&norm.test);
    if spec.n_x != n_x || spec.n_u != n_u {
        return Err(CliError::Data(format!(
            "spec mismatch: checkpoint expects n_x={} n_u={}, data has n_x={n_x} n_u={n_u}",
            spec.n_x, spec.n_u
        )));
    }
    Ok(())
}

fn scored(data: &DataArgs, checkpoint: &Path, mode: &str) -> Result<PredictionSet, CliError> {
    let mode: PredictionMode = mode.parse().map_err(|e: avfp_core::Error| CliError::Usage(e.to_string()))?;
    let fleet = Fleet::load(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let stats = ckpt
        .normalization
        .as_ref()
        .ok_or_else(|| CliError::Data("checkpoint carries no normalization statistics".into()))?;
    let norm = fleet.normalized(Some(stats))?;
    check_spec(ckpt.spec(), &norm)?;
    let params: &ModelParams = ckpt.state.best_params.as_ref().unwrap_or(&ckpt.state.params);
    Ok(predict_rul(params, &norm.test, &fleet.truth, mode, Some(&norm.train), ckpt.state.config.rul_cap)?)
}

pub fn eval(data: &DataArgs, checkpoint: &Path, mode: &str) -> Result<(), CliError> {
    let p = scored(data, checkpoint, mode)?;
    println!("test RMSE {:.4} over {} units ({mode})", rmse(&p)?, p.len());
    Ok(())
}

pub fn predict(data: &DataArgs, checkpoint: &Path, mode: &str, out: &Path) -> Result<(), CliError> {
    let p = scored(data, checkpoint, mode)?;
    std::fs::write(out, p.to_csv())?;
    println!("wrote {} predictions to {}", p.len(), out.display());
    Ok(())
}

fn one_experiment(
    fleet: &Fleet,
    norm: &Normalized,
    config: &RunConfig,
    runs: usize,
    out: &Path,
    started: Instant,
) -> Result<RunSummary, CliError> {
    let tdata = training_data(norm, fleet, config)?;
    let (n_x, n_u) = dims(&norm.train);
    let spec = config.network_spec(n_x, n_u)?;
    let summary = run_experiment(&tdata, &spec, &config.train_config(), runs)?;
    emit_plot_data(&summary, out)?;
    write_manifest(out, "experiment", config, fleet, started)?;
    println!(
        "{}: {}/{} runs completed, test RMSE mean {} std {} min {}",
        out.display(),
        summary.completed,
        runs,
        fmt_opt(summary.mean),
        fmt_opt(summary.std),
        fmt_opt(summary.min)
    );
    if summary.completed == 0 {
        return Err(CliError::Abort("every run diverged".into()));
    }
    Ok(summary)
}

pub fn experiment(data: &DataArgs, config: Option<&Path>, runs: usize, compare_markovian: bool, out: &Path) -> Result<(), CliError> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let started = Instant::now();
    let config = load_config(config)?;
    let fleet = Fleet::load(data)?;
    let norm = fleet.normalized(None)?;
    if !compare_markovian {
        one_experiment(&fleet, &norm, &config, runs, out, started)?;
        return Ok(());
    }
    let mut table = String::from("markovian,runs,completed,mean_rmse,std_rmse,min_rmse\n");
    for markovian in [false, true] {
        let c = RunConfig { markovian, ..config.clone() };
        let dir = out.join(if markovian { "markovian" } else { "non_markovian" });
        let s = one_experiment(&fleet, &norm, &c, runs, &dir, started)?;
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        table.push_str(&format!("{markovian},{runs},{},{},{},{}\n", s.completed, cell(s.mean), cell(s.std), cell(s.min)));
    }
    std::fs::write(out.join("markovian_comparison.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(draws: usize, seed: u64) -> Result<(), CliError> {
    if draws == 0 {
        return Err(CliError::Usage("--draws must be at least 1".into()));
    }
    let reports = gradcheck_suite(draws, seed)?;
    println!("{:<28} {:>6} {:>12}  result", "objective", "draws", "max rel err");
    for r in &reports {
        println!("{:<28} {:>6} {:>12.3e}  {}", r.objective, r.draws, r.worst, if r.passed() { "pass" } else { "FAIL" });
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.objective.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn oracle(instances: usize, steps: usize, draws: usize, seed: u64) -> Result<(), CliError> {
    if instances == 0 || draws < 2 {
        return Err(CliError::Usage("need at least one instance and two draws".into()));
    }
    let started = Instant::now();
    let cfg = OracleConfig { instances, train_steps: steps, draws, seed };
    let res = kalman_bound_suite(&cfg)?;
    println!("{:>3} {:>3} {:>3} {:>3} {:>12} {:>12} {:>8} {:>12} {:>8}", "#", "n_z", "n_x", "T", "exact", "elbo before", "se", "elbo after", "se");
    for (i, b) in res.iter().enumerate() {
        println!(
            "{i:>3} {:>3} {:>3} {:>3} {:>12.3} {:>12.3} {:>8.3} {:>12.3} {:>8.3}",
            b.n_z, b.n_x, b.steps, b.exact, b.elbo_before, b.se_before, b.elbo_after, b.se_after
        );
    }
    let held = res.iter().filter(|b| b.bound_holds()).count();
    let shrank = res.iter().filter(|b| b.gap_shrank()).count();
    println!(
        "bound held in {held}/{instances}, gap shrank in {shrank}/{instances}, {:.1}s",
        started.elapsed().as_secs_f64()
    );
    // At least 90% of instances must improve.
    if held == instances && shrank * 10 >= instances * 9 {
        Ok(())
    } else {
        Err(CliError::CheckFailed("Kalman bound check failed".into()))
    }
}

pub fn synth(
    out: &Path,
    subset: &str,
    units: usize,
    test_units: usize,
    min_life: usize,
    max_life: usize,
    seed: u64,
) -> Result<(), CliError> {
    if units == 0 || test_units == 0 || min_life < 2 || max_life < min_life {
        return Err(CliError::Usage("need units, test units and 2 <= min_life <= max_life".into()));
    }
    let cfg = SurrogateConfig { units, test_units, min_life, max_life };
    surrogate::write_files(out, &cfg, seed, subset)?;
    println!("wrote train_{subset}.txt, test_{subset}.txt and RUL_{subset}.txt to {}", out.display());
    Ok(())
}
