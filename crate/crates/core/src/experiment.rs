//! Trial orchestration and result files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{describe, ExperimentSpec};
use crate::error::{Error, Result};
use crate::trainer::{train, TrainReport};
use crate::weights::WeightStore;

/// Epochs averaged for the headline accuracy.
pub const TAIL_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub trials: usize,
    pub seeds: String,
    pub tail_acc_mean: f64,
    pub tail_acc_std: f64,
    pub tail_balanced_mean: f64,
    pub tail_balanced_std: f64,
    pub noisy_clean_ratio_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Mean and sample standard deviation over trials of the last-ten-epoch
/// accuracy. Timings are left out so reruns compare byte for byte.
pub fn aggregate(seeds: &[u64], reports: &[TrainReport]) -> AggregateRow {
    let tail: Vec<f64> = reports.iter().map(|r| r.tail_accuracy(TAIL_EPOCHS)).collect();
    let bal: Vec<f64> = reports.iter().map(|r| r.tail_balanced_accuracy(TAIL_EPOCHS)).collect();
    let ratio: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.epochs.last())
        .filter(|e| e.clean_mean_weight > 0.0 && e.noisy_mean_weight.is_finite())
        .map(|e| e.noisy_mean_weight / e.clean_mean_weight)
        .collect();
    let (tail_acc_mean, tail_acc_std) = mean_std(&tail);
    let (tail_balanced_mean, tail_balanced_std) = mean_std(&bal);
    AggregateRow {
        method: reports.first().map_or_else(String::new, |r| r.method.clone()),
        trials: reports.len(),
        seeds: seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        tail_acc_mean,
        tail_acc_std,
        tail_balanced_mean,
        tail_balanced_std,
        noisy_clean_ratio_mean: if ratio.is_empty() { f64::NAN } else { mean_std(&ratio).0 },
    }
}

const AGGREGATE_HEADER: &str =
    "method,trials,seeds,tail_acc_mean,tail_acc_std,tail_balanced_mean,tail_balanced_std,noisy_clean_ratio_mean";

fn row_fields(r: &AggregateRow) -> String {
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.method,
        r.trials,
        r.seeds,
        r.tail_acc_mean,
        r.tail_acc_std,
        r.tail_balanced_mean,
        r.tail_balanced_std,
        r.noisy_clean_ratio_mean
    )
}

pub fn aggregate_csv(row: &AggregateRow) -> String {
    format!("{AGGREGATE_HEADER}\n{}\n", row_fields(row))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::File::create(path)?.write_all(contents.as_bytes())?;
    Ok(())
}

/// Writes the report, epoch log, final weights, snapshots and stage report of
/// one trial.
pub fn write_trial(dir: &Path, seed: u64, noisy: &[bool], report: &TrainReport) -> Result<()> {
    let stem = format!("trial_seed{seed}");
    write(&dir.join(format!("{stem}.json")), &report.to_json())?;
    write(&dir.join(format!("{stem}_epochs.csv")), &report.epochs_csv()?)?;
    let store = WeightStore::from_values(report.final_weights.clone())?;
    store.write_csv(fs::File::create(dir.join(format!("{stem}_weights.csv")))?, noisy)?;
    if !report.snapshots.is_empty() {
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}_snapshots.csv")))?;
        w.write_record(["epoch", "index", "weight"])?;
        for (epoch, values) in &report.snapshots {
            for (i, v) in values.iter().enumerate() {
                w.write_record([epoch.to_string(), i.to_string(), format!("{v:?}")])?;
            }
        }
        w.flush()?;
    }
    write(&dir.join(format!("{stem}_stages.csv")), &report.stages.to_csv())
}

pub struct Outcome {
    pub reports: Vec<TrainReport>,
    pub aggregate: AggregateRow,
    /// First failure, if any trial failed. Finished trials are still written.
    pub failure: Option<Error>,
}

/// Runs every trial of `spec` and writes results under `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    write(&out.join("spec.toml"), &spec.to_toml())?;
    let dataset = spec.dataset()?;
    let seeds = spec.trial_seeds();
    let run_one = |&seed: &u64| -> Result<TrainReport> {
        let data = dataset.build(seed)?;
        let cfg = crate::trainer::TrainConfig { seed, ..spec.train.clone() };
        let report = train(&data, &cfg)?;
        write_trial(out, seed, &data.train.noisy, &report)?;
        Ok(report)
    };
    let results: Vec<Result<TrainReport>> = if spec.parallel {
        seeds.par_iter().map(run_one).collect()
    } else {
        let mut v = Vec::new();
        for s in &seeds {
            let r = run_one(s);
            let failed = r.is_err();
            v.push(r);
            if failed {
                break;
            }
        }
        v
    };
    let mut done_seeds = Vec::new();
    let mut reports = Vec::new();
    let mut failure = None;
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(rep) => {
                done_seeds.push(*seed);
                reports.push(rep);
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    let aggregate = aggregate(&done_seeds, &reports);
    write(&out.join("aggregate.csv"), &aggregate_csv(&aggregate))?;
    Ok(Outcome { reports, aggregate, failure })
}

/// Runs every grid point into its own subdirectory and writes `sweep.csv`.
pub fn run_sweep(spec: &ExperimentSpec, out: &Path) -> Result<(Vec<AggregateRow>, Option<Error>)> {
    let points = spec.expand_sweep()?;
    fs::create_dir_all(out)?;
    let mut table = format!("point,settings,{AGGREGATE_HEADER}\n");
    let mut rows = Vec::new();
    let mut failure = None;
    for (k, (point, sub)) in points.iter().enumerate() {
        let outcome = run_experiment(sub, &out.join(format!("point_{k:03}")))?;
        table.push_str(&format!("{k},\"{}\",{}\n", describe(point).replace('"', "'"), row_fields(&outcome.aggregate)));
        rows.push(outcome.aggregate);
        if let Some(e) = outcome.failure {
            failure = Some(e);
            break;
        }
    }
    write(&out.join("sweep.csv"), &table)?;
    Ok((rows, failure))
}
