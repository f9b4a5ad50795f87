use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use driftwt::config::ExperimentSpec;
use driftwt::experiment::{run_experiment, run_sweep, TAIL_EPOCHS};
use driftwt::objectives::EstimatorKind;
use driftwt::ratiobench::{rows_to_csv, run_bench};
use driftwt::trainer::{train, Baseline, TrainConfig, Transform};
use driftwt::{selftest, Error};

#[derive(Parser)]
#[command(name = "driftwt", version, about = "Dynamic importance weighting under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of one spec.
    Train(Common),
    /// Run the grid in the spec's [sweep] table.
    Sweep(Common),
    /// Score weight estimation alone against the analytic ratio.
    Oracle(Common),
    /// Time the training stages of one trial.
    Profile(Common),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run this single seed instead of the spec's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = |s: &str| s.parse::<EstimatorKind>())]
    estimator: Option<EstimatorKind>,
    #[arg(long, value_parser = |s: &str| s.parse::<Transform>())]
    transform: Option<Transform>,
    #[arg(long, value_parser = |s: &str| s.parse::<Baseline>())]
    baseline: Option<Baseline>,
    /// Run trials concurrently.
    #[arg(long)]
    parallel: bool,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec, Error> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
            spec.trials = 1;
        }
        let t = &mut spec.train;
        if let Some(e) = self.estimator {
            t.estimator = e;
        }
        if let Some(tr) = self.transform {
            t.transform = tr;
        }
        if self.baseline.is_some() {
            t.baseline = self.baseline;
        }
        spec.parallel |= self.parallel;
        Ok(spec)
    }

    fn out_dir(&self, spec: &ExperimentSpec) -> PathBuf {
        self.out.clone().or_else(|| spec.out.clone()).unwrap_or_else(|| Path::new("runs").join(&spec.name))
    }
}

fn cmd_train(c: &Common) -> Result<(), Error> {
    let spec = c.spec()?;
    let out = c.out_dir(&spec);
    let o = run_experiment(&spec, &out)?;
    for r in &o.reports {
        println!("seed {:>4}  last-{TAIL_EPOCHS} acc {:.4}", r.config.seed, r.tail_accuracy(TAIL_EPOCHS));
    }
    let a = &o.aggregate;
    println!("{}: {} trials, acc {:.4} ({:.4})  -> {}", a.method, a.trials, a.tail_acc_mean, a.tail_acc_std, out.display());
    o.failure.map_or(Ok(()), Err)
}

fn cmd_sweep(c: &Common) -> Result<(), Error> {
    let spec = c.spec()?;
    if spec.sweep.is_empty() {
        return Err(Error::Config("sweep: the spec has no [sweep] table".into()));
    }
    let out = c.out_dir(&spec);
    let (rows, failure) = run_sweep(&spec, &out)?;
    for (k, r) in rows.iter().enumerate() {
        println!("point {k:>3}  {}  acc {:.4} ({:.4})", r.method, r.tail_acc_mean, r.tail_acc_std);
    }
    println!("-> {}", out.join("sweep.csv").display());
    failure.map_or(Ok(()), Err)
}

fn cmd_oracle(c: &Common) -> Result<(), Error> {
    let spec = c.spec()?;
    let mut cfg = spec.oracle.clone();
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    let kinds: Vec<EstimatorKind> = match c.estimator {
        Some(k) => vec![k],
        None => EstimatorKind::ALL.to_vec(),
    };
    let rows = run_bench(&kinds, &cfg)?;
    println!("{:<10}{:>10}{:>10}", "estimator", "nmse", "seconds");
    for r in &rows {
        println!("{:<10}{:>10.4}{:>10.2}", r.estimator, r.nmse, r.seconds);
    }
    if let Some(out) = c.out.clone().or(spec.out) {
        fs::create_dir_all(&out)?;
        fs::write(out.join("oracle.csv"), rows_to_csv(&rows))?;
    }
    Ok(())
}

fn cmd_profile(c: &Common) -> Result<(), Error> {
    let spec = c.spec()?;
    let seed = spec.trial_seeds().first().copied().unwrap_or(0);
    let data = spec.dataset()?.build(seed)?;
    let report = train(&data, &TrainConfig { seed, ..spec.train.clone() })?;
    let csv = report.stages.to_csv();
    print!("{csv}");
    let out = c.out_dir(&spec);
    fs::create_dir_all(&out)?;
    fs::write(out.join("profile.csv"), &csv)?;
    fs::write(out.join("profile.json"), report.stages.to_json())?;
    Ok(())
}

fn cmd_selftest() -> Result<(), Error> {
    let checks = selftest::run();
    for c in &checks {
        println!("{} {}{}", if c.passed { "ok  " } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) });
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(Error::Evaluation(format!("{n} checks failed"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Oracle(c) => cmd_oracle(c),
        Command::Profile(c) => cmd_profile(c),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
