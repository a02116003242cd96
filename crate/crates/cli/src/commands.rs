//! Subcommand implementations.

use serde_json::{json, Value};
use std::path::Path;

use fedbatch::compress::{compression_noise_sweep, sweep_to_csv};
use fedbatch::data::make_synthetic;
use fedbatch::fed::{run_federated, MetricsLog, RunSummary};
use fedbatch::gradscale::estimate_gamma;
use fedbatch::nn::init_params;
use fedbatch::perf::{
    activation_memory, build_plan, fit_linear, parse_profile_csv, profile_to_csv, CostModel,
    MemoryModel,
};

use crate::config::{build_run, build_task, load_toml, ExperimentConfig, WorkloadConfig};
use crate::CliError;

/// Seed fan-out width: `FEDBATCH_WORKERS` if set, else one worker per seed
/// up to the available parallelism.
fn worker_count(seeds: usize) -> usize {
    if let Ok(v) = std::env::var("FEDBATCH_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(seeds)
        .max(1)
}

pub fn train(config_path: &Path) -> Result<(), CliError> {
    let cfg: ExperimentConfig = load_toml(config_path)?;
    cfg.validate()?;

    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create output dir: {e}")))?;

    // One unit of work per seed: build the task once, then run every variant.
    let run_one_seed = |seed: u64| -> Result<Vec<(String, RunSummary)>, CliError> {
        let task = build_task(&cfg.dataset, &cfg.partition, seed)?;
        let mut out = Vec::with_capacity(cfg.runs.len());
        for run in &cfg.runs {
            let spec = cfg.model.build(task.train.dim(), task.train.num_classes())?;
            let (sync, train_cfg, notes) = build_run(run, &cfg.train, &task.shards, seed)?;
            let mut log: MetricsLog =
                run_federated(&spec, &task.train, &task.shards, &task.test, &sync, &train_cfg)?
                    .log;
            log.summary_mut().notes.extend(notes);

            let dir = cfg.output_dir.join(&run.name).join(format!("seed_{seed}"));
            std::fs::create_dir_all(&dir)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
            std::fs::write(dir.join("metrics.csv"), log.to_csv())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut factors = String::from("factor,count\n");
            for fc in log.summary().factor_counts.iter() {
                factors.push_str(&format!("{},{}\n", fc.factor, fc.count));
            }
            std::fs::write(dir.join("factors.csv"), factors)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            out.push((run.name.clone(), log.summary().clone()));
        }
        Ok(out)
    };

    // Fan seeds out in waves; results keyed by seed so completion order is
    // irrelevant.
    let workers = worker_count(cfg.seeds.len());
    let mut per_seed: Vec<Vec<(String, RunSummary)>> = Vec::with_capacity(cfg.seeds.len());
    for wave in cfg.seeds.chunks(workers.max(1)) {
        let results: Vec<Result<Vec<(String, RunSummary)>, CliError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&seed| scope.spawn(move || run_one_seed(seed)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| {
                        Err(CliError::Runtime("worker thread panicked".into()))
                    }))
                    .collect()
            });
        for r in results {
            per_seed.push(r?);
        }
    }

    // Assemble summary.json: per-run details plus flat <run>_acc arrays.
    let mut runs_json = Vec::with_capacity(cfg.runs.len());
    let mut root = serde_json::Map::new();
    root.insert("name".into(), json!(cfg.name));
    root.insert("config".into(), json!(config_path.display().to_string()));
    root.insert("seeds".into(), json!(cfg.seeds));
    for (ri, run) in cfg.runs.iter().enumerate() {
        let summaries: Vec<&RunSummary> = per_seed.iter().map(|s| &s[ri].1).collect();
        let accs: Vec<f64> = summaries.iter().map(|s| s.final_test_accuracy).collect();
        let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        runs_json.push(json!({
            "name": run.name,
            "mode": summaries[0].mode,
            "sync_period": summaries[0].sync_period,
            "mean_final_test_acc": mean_acc,
            "per_seed": summaries,
        }));
        root.insert(format!("{}_acc", run.name), json!(accs));
    }
    root.insert("runs".into(), Value::Array(runs_json));

    let summary_path = cfg.output_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&Value::Object(root))
            .map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn build_workload(
    spec_path: &Path,
) -> Result<(WorkloadConfig, fedbatch::data::Dataset, fedbatch::nn::ModelSpec), CliError> {
    let cfg: WorkloadConfig = load_toml(spec_path)?;
    let ds = make_synthetic(
        cfg.dataset.classes,
        cfg.dataset.dim,
        cfg.dataset.per_class,
        cfg.dataset.spread,
        cfg.dataset.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let spec = cfg.model.build(ds.dim(), ds.num_classes())?;
    Ok((cfg, ds, spec))
}

pub fn profile(spec_path: &Path, batches: &[usize], reps: usize, out: &Path) -> Result<(), CliError> {
    if reps < 3 {
        return Err(CliError::Config("profiling needs --reps >= 3".into()));
    }
    if batches.is_empty() {
        return Err(CliError::Config("no batch sizes given".into()));
    }
    let (_, ds, spec) = build_workload(spec_path)?;
    let samples = fedbatch::perf::profile(&spec, &ds, batches, reps)?;
    std::fs::write(out, profile_to_csv(&samples)).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn plan(
    spec_path: &Path,
    profile_path: &Path,
    budget_bytes: u64,
    dataset_size: usize,
    candidates: &[usize],
    t_sync: f64,
    sync_period: usize,
    optimizer_multiplier: usize,
    out: &Path,
) -> Result<(), CliError> {
    let (_, _, spec) = build_workload(spec_path)?;
    let text = std::fs::read_to_string(profile_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", profile_path.display())))?;
    let samples = parse_profile_csv(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if samples.len() < 2 {
        return Err(CliError::Config("plan needs at least 2 profile rows".into()));
    }

    let tc_points: Vec<(f64, f64)> = samples.iter().map(|s| (s.batch_size as f64, s.t_c)).collect();
    let tmov_points: Vec<(f64, f64)> =
        samples.iter().map(|s| (s.batch_size as f64, s.t_mov)).collect();
    let mbatch_points: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| (s.batch_size as f64, s.m_batch as f64))
        .collect();

    let fit_tc = fit_linear(&tc_points)?;
    let fit_tmov = fit_linear(&tmov_points)?;
    let fit_mbatch = fit_linear(&mbatch_points)?;
    let cm = CostModel::new(fit_tc, fit_tmov, t_sync, sync_period)?;
    let mm = MemoryModel::new(
        spec.param_count(),
        spec.bytes_per_element(),
        optimizer_multiplier,
        activation_memory(&spec, 1),
        fit_mbatch,
    )?;

    let report = build_plan(&cm, &mm, dataset_size, budget_bytes, candidates);
    std::fs::write(
        out,
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", out.display());
    if !report.feasible {
        return Err(CliError::Infeasible(format!(
            "no candidate batch fits budget {budget_bytes} B"
        )));
    }
    Ok(())
}

pub fn sweep_compression(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, ds, spec) = build_workload(spec_path)?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("config needs a [sweep] section".into()))?;
    let rows = compression_noise_sweep(
        &spec,
        &ds,
        &sweep.batch_sizes,
        sweep.ratio,
        sweep.trials,
        sweep.seed,
    )?;
    std::fs::write(out, sweep_to_csv(&rows)).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn estimate_noise(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, ds, spec) = build_workload(spec_path)?;
    let noise = cfg
        .noise
        .as_ref()
        .ok_or_else(|| CliError::Config("config needs a [noise] section".into()))?;
    let params = init_params(&spec, noise.seed);
    let mut csv = String::from("b_small,b_large,trials,mean_gamma_norm\n");
    for (i, &b_small) in noise.b_small.iter().enumerate() {
        let est = estimate_gamma(
            &spec,
            &params,
            &ds,
            b_small,
            noise.b_large,
            noise.trials,
            noise.seed + i as u64,
        )?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            est.b_small, est.b_large, est.trials, est.mean_gamma_norm
        ));
    }
    std::fs::write(out, csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", out.display());
    Ok(())
}
