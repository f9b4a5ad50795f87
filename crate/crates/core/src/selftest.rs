//! Quick invariant checks runnable from a release binary.

use crate::constraints::ConstraintSet;
use crate::critic::Critic;
use crate::error::Result;
use crate::kernels::{BasisSet, RbfKernel};
use crate::model::Classifier;
use crate::numerics::{check_gradient, sq_dist, Rng};
use crate::objectives::{KliepObjective, KmmObjective, LsifObjective, Objective};
use crate::optim::OptimizerKind;
use crate::pgd::{self, PgdConfig, StepSize};
use crate::weights::WeightStore;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn points(n: usize, d: usize, shift: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| shift + rng.normal()).collect()).collect()
}

fn projection(rng: &mut Rng) -> Result<(bool, String)> {
    let mut worst_feas = 0usize;
    let mut worst_idem = 0.0f64;
    for t in 0..600 {
        let n = 2 + rng.below(49);
        let x: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let set = match t % 3 {
            0 => ConstraintSet::mean_band(rng.uniform_range(0.0, 0.5))?,
            1 => ConstraintSet::weighted_sum_one((0..n).map(|_| rng.uniform_range(0.1, 2.0)).collect())?,
            _ => ConstraintSet::NonnegOrthant,
        };
        let p = set.project(&x)?;
        worst_feas += !set.is_feasible(&p, 1e-8) as usize;
        worst_idem = worst_idem.max(sq_dist(&set.project(&p)?, &p).sqrt());
    }
    Ok((worst_feas == 0 && worst_idem <= 1e-12, format!("infeasible {worst_feas}, idempotence gap {worst_idem:.1e}")))
}

fn gradients(rng: &mut Rng) -> Result<(bool, String)> {
    let tr = points(12, 2, 0.0, rng);
    let va = points(6, 2, 0.5, rng);
    let k = RbfKernel::new(1.0)?;
    let kmm = KmmObjective::build(&k, &tr, &va, 0.1)?;
    let kliep = KliepObjective::build(BasisSet::new(va.clone())?, k.clone(), &tr, &va)?;
    let lsif = LsifObjective::build(BasisSet::new(va.clone())?, k, &tr, &va, 1e-3)?;
    let mut worst = 0.0f64;
    let w: Vec<f64> = (0..12).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    worst = worst.max(check_gradient(|x| kmm.value(x), |x| kmm.gradient(x), &w, 1e-5)?);
    let b: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    worst = worst.max(check_gradient(|x| kliep.value(x), |x| kliep.gradient(x), &b, 1e-6)?);
    worst = worst.max(check_gradient(|x| lsif.value(x), |x| lsif.gradient(x), &b, 1e-5)?);

    let critic = Critic::new(2, 4, 10.0, rng)?;
    let interps = Critic::sample_interpolates(&tr, &w, &va, rng);
    let f = |p: &[f64]| {
        let mut c = critic.clone();
        c.set_params(p).expect("same shape");
        c.loss_at(&tr, &w, &va, &interps, 10.0).map_or(f64::NAN, |l| l.value)
    };
    let g = |p: &[f64]| {
        let mut c = critic.clone();
        c.set_params(p).expect("same shape");
        c.loss_at(&tr, &w, &va, &interps, 10.0).map_or_else(|_| vec![f64::NAN; p.len()], |l| l.grad)
    };
    worst = worst.max(check_gradient(f, g, critic.params(), 1e-6)?);

    let model = Classifier::new(2, 5, 3, OptimizerKind::Sgd, rng)?;
    let ys: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let risk = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p).expect("same shape");
        let lb = m.forward_loss(&tr, &ys).expect("valid batch");
        lb.losses.iter().zip(&w).map(|(l, wi)| l * wi).sum::<f64>() / 12.0
    };
    let grad = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p).expect("same shape");
        let lb = m.forward_loss(&tr, &ys).expect("valid batch");
        m.weighted_gradient(&lb, &w).expect("matching weights")
    };
    worst = worst.max(check_gradient(risk, grad, model.params(), 1e-6)?);
    Ok((worst < 1e-4, format!("max relative error {worst:.1e}")))
}

fn monotone_pgd(rng: &mut Rng) -> Result<(bool, String)> {
    let tr = points(40, 1, 0.0, rng);
    let va = points(10, 1, 1.0, rng);
    let obj = KmmObjective::build(&RbfKernel::new(1.0)?, &tr, &va, 0.1)?;
    let x0 = obj.constraint().project(&vec![1.0; 40])?;
    let r = pgd::run(&obj, &x0, &PgdConfig::fixed(200, StepSize::Auto))?;
    let rises = r.trajectory.windows(2).filter(|p| p[1] > p[0] + 1e-10).count();
    Ok((rises == 0, format!("{rises} increases over {} steps", r.iterations)))
}

fn reproducible_rng() -> Result<(bool, String)> {
    let mut a = Rng::new(2024);
    let mut b = Rng::new(2024);
    let same = (0..1000).all(|_| a.next_u64() == b.next_u64());
    let mut c = Rng::new(2025);
    let differs = (0..4).any(|_| a.next_u64() != c.next_u64());
    Ok((same && differs, String::new()))
}

fn store_round_trip(rng: &mut Rng) -> Result<(bool, String)> {
    let mut store = WeightStore::new(50)?;
    let idx = rng.permutation(50)[..20].to_vec();
    let vals: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
    store.scatter(&idx, &vals)?;
    let back = store.gather(&idx)?;
    Ok((back == vals, String::new()))
}

/// Runs every check with a fixed seed.
pub fn run() -> Vec<Check> {
    let mut rng = Rng::new(7);
    let mut checks = Vec::new();
    let mut push = |name: &'static str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        checks.push(Check { name, passed, detail });
    };
    push("projection feasibility and idempotence", projection(&mut rng));
    push("analytic gradients", gradients(&mut rng));
    push("monotone PGD at step 1/L", monotone_pgd(&mut rng));
    push("seeded RNG reproducibility", reproducible_rng());
    push("weight store round trip", store_round_trip(&mut rng));
    checks
}
