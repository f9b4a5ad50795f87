//! Weight estimation alone, scored against an analytic density ratio.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::critic::Critic;
use crate::data::make_covariate_shift_1d;
use crate::error::Result;
use crate::kernels::{BasisSet, RbfKernel};
use crate::metrics::we_nmse;
use crate::numerics::Rng;
use crate::objectives::{EstimatorKind, KliepObjective, KmmObjective, LsifObjective, Objective, W1Objective};
use crate::pgd::{self, PgdConfig, StepSize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_train: usize,
    pub n_val: usize,
    /// Kernel width; `None` uses the median heuristic.
    pub sigma: Option<f64>,
    pub epsilon: f64,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// W1 subgradient rounds, critic steps per round, critic Adam rate and
    /// initial weight step (in units of Φ).
    pub w1_rounds: usize,
    pub w1_critic_steps: usize,
    pub w1_critic_lr: f64,
    pub w1_step: f64,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_train: 2000,
            n_val: 200,
            sigma: None,
            epsilon: 0.1,
            lambda: 1e-5,
            tol: 1e-8,
            max_iter: 10_000,
            w1_rounds: 200,
            w1_critic_steps: 100,
            w1_critic_lr: 1e-2,
            w1_step: 1.0,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub estimator: String,
    /// Mean NMSE over seeds.
    pub nmse: f64,
    pub per_seed: Vec<f64>,
    pub seconds: f64,
}

fn kernel(cfg: &BenchConfig, train: &[Vec<f64>], val: &[Vec<f64>]) -> Result<RbfKernel> {
    match cfg.sigma {
        Some(s) => RbfKernel::new(s),
        None => {
            let mut all = train.to_vec();
            all.extend_from_slice(val);
            Ok(RbfKernel::median_heuristic(&all))
        }
    }
}

fn converge(obj: &dyn Objective, x0: &[f64], step: StepSize, cfg: &BenchConfig) -> Result<Vec<f64>> {
    let x0 = obj.constraint().project(x0)?;
    let pc = PgdConfig::to_convergence(step, cfg.tol, cfg.max_iter);
    Ok(pgd::run(obj, &x0, &pc)?.point)
}

/// Per-sample weights on `train` from one estimator run to convergence.
pub fn estimate_weights(
    kind: EstimatorKind,
    train: &[Vec<f64>],
    val: &[Vec<f64>],
    cfg: &BenchConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = train.len();
    match kind {
        EstimatorKind::Kmm => {
            let k = kernel(cfg, train, val)?;
            let obj = KmmObjective::build(&k, train, val, cfg.epsilon)?;
            converge(&obj, &vec![1.0; n], StepSize::Auto, cfg)
        }
        EstimatorKind::Kliep => {
            let k = kernel(cfg, train, val)?;
            let obj = KliepObjective::build(BasisSet::new(val.to_vec())?, k, train, val)?;
            let b0 = obj.constraint().project(&vec![1.0; val.len()])?;
            let l = obj.local_curvature(&b0);
            let beta = converge(&obj, &b0, StepSize::Fixed(1.0 / l.max(1e-12)), cfg)?;
            obj.model().weights_from_params(&beta, train)
        }
        EstimatorKind::Lsif => {
            let k = kernel(cfg, train, val)?;
            let obj = LsifObjective::build(BasisSet::new(val.to_vec())?, k, train, val, cfg.lambda)?;
            let beta = converge(&obj, &vec![1.0; val.len()], StepSize::Auto, cfg)?;
            obj.model().weights_from_params(&beta, train)
        }
        EstimatorKind::W1 => {
            // D_W1 is convex in w with subgradient −Φ*/n_tr. Each round fits
            // a fresh critic (a warm-started one cannot reverse its slope in
            // one dimension without crossing the penalty's zero-gradient
            // barrier), then takes a diminishing projected subgradient step.
            // The second half of the iterates is averaged.
            let dim = train[0].len();
            let band = ConstraintSet::mean_band(cfg.epsilon)?;
            let mut w = vec![1.0; n];
            let mut avg = vec![0.0; n];
            let burn = cfg.w1_rounds / 2;
            for round in 0..cfg.w1_rounds {
                let mut critic = Critic::new(dim, 16, 10.0, rng)?;
                for _ in 0..cfg.w1_critic_steps {
                    critic.train_step(train, &w, val, cfg.w1_critic_lr, true, rng)?;
                }
                let obj = W1Objective::new(critic.values(train), &critic.values(val), cfg.epsilon)?;
                let g = obj.gradient(&w);
                let step = cfg.w1_step * n as f64 / ((round + 1) as f64).sqrt();
                let moved: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                w = band.project(&moved)?;
                if round >= burn {
                    for (a, b) in avg.iter_mut().zip(&w) {
                        *a += b;
                    }
                }
            }
            let k = (cfg.w1_rounds - burn).max(1) as f64;
            Ok(avg.into_iter().map(|v| v / k).collect())
        }
    }
}

/// NMSE of every estimator on the one-dimensional covariate-shift task.
pub fn run_bench(kinds: &[EstimatorKind], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        let t0 = Instant::now();
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let ds = make_covariate_shift_1d(cfg.n_train, cfg.n_val, 10, seed)?;
            let oracle = ds.oracle.as_ref().expect("covariate task has an oracle").ratios(&ds.train);
            let mut rng = Rng::new(seed ^ 0x5eed);
            let w = estimate_weights(kind, &ds.train.xs, &ds.val.xs, cfg, &mut rng)?;
            per_seed.push(we_nmse(&w, &oracle)?);
        }
        let nmse = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(BenchRow { estimator: kind.name().into(), nmse, per_seed, seconds: t0.elapsed().as_secs_f64() });
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("estimator,nmse,seconds\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.3}\n", r.estimator, r.nmse, r.seconds));
    }
    s
}
