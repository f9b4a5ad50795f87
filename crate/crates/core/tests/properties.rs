use proptest::prelude::*;

use driftwt::constraints::ConstraintSet;
use driftwt::kernels::{BasisSet, RbfKernel};
use driftwt::numerics::{sq_dist, Rng};
use driftwt::objectives::{KmmObjective, LsifObjective, Objective};
use driftwt::pgd::{self, PgdConfig, StepSize};

fn set_strategy() -> impl Strategy<Value = (ConstraintSet, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        let x = prop::collection::vec(-5.0f64..5.0, n);
        let a = prop::collection::vec(0.1f64..3.0, n);
        (0usize..3, 0.0f64..0.5, a, x).prop_map(|(k, eps, a, x)| {
            let set = match k {
                0 => ConstraintSet::mean_band(eps).unwrap(),
                1 => ConstraintSet::weighted_sum_one(a).unwrap(),
                _ => ConstraintSet::NonnegOrthant,
            };
            (set, x)
        })
    })
}

fn points(n: usize, shift: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| vec![shift + rng.normal(), rng.normal()]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_feasible_and_idempotent((set, x) in set_strategy()) {
        let p = set.project(&x).unwrap();
        prop_assert!(set.is_feasible(&p, 1e-8));
        prop_assert!(sq_dist(&set.project(&p).unwrap(), &p) <= 1e-24);
    }

    #[test]
    fn projection_beats_feasible_rescalings((set, x) in set_strategy(), t in 0.5f64..1.5) {
        // Any positive rescaling of the projection that stays feasible is
        // no closer to x.
        let p = set.project(&x).unwrap();
        let q: Vec<f64> = p.iter().map(|v| v * t).collect();
        if set.is_feasible(&q, 0.0) {
            prop_assert!(sq_dist(&p, &x) <= sq_dist(&q, &x) + 1e-9);
        }
    }

    #[test]
    fn warm_start_step_never_increases_objective(seed in 0u64..1000, lsif in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let tr = points(12, 0.0, &mut rng);
        let va = points(6, 0.7, &mut rng);
        let k = RbfKernel::new(1.0).unwrap();
        let obj: Box<dyn Objective> = if lsif {
            Box::new(LsifObjective::build(BasisSet::new(va.clone()).unwrap(), k, &tr, &va, 1e-3).unwrap())
        } else {
            Box::new(KmmObjective::build(&k, &tr, &va, 0.1).unwrap())
        };
        let start: Vec<f64> = (0..obj.dim()).map(|_| rng.uniform_range(0.0, 3.0)).collect();
        let x0 = obj.constraint().project(&start).unwrap();
        let r = pgd::run(obj.as_ref(), &x0, &PgdConfig::fixed(1, StepSize::Auto)).unwrap();
        prop_assert!(r.trajectory[1] <= r.trajectory[0] + 1e-10);
    }
}
