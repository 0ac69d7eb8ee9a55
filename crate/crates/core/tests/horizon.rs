use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmab::analysis::{ergodicity_report, value_lipschitz_constant};
use rmab::fixed_point::solve_fixed_point;
use rmab::horizon::{
    bias_estimate, plan, plan_with, relaxed_value, rotated_cost, select_horizon, surrogate_cost, PlanMethod,
    PlanOptions,
};
use rmab::model::{
    one_hot, random_instance, random_instance_with, yan_instance, BudgetMode, Instance, ProductDistribution,
    RandomInstanceConfig,
};

fn random_x(inst: &Instance, rng: &mut ChaCha8Rng) -> ProductDistribution {
    let x = inst
        .arms
        .iter()
        .map(|a| {
            let w: Vec<f64> = (0..a.num_states()).map(|_| -rng.random::<f64>().ln()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect();
    ProductDistribution { x }
}

fn random_state(inst: &Instance, rng: &mut ChaCha8Rng) -> Vec<usize> {
    inst.arms.iter().map(|a| rng.random_range(0..a.num_states())).collect()
}

fn options(method: PlanMethod) -> PlanOptions {
    PlanOptions { method, zero_terminal: false }
}

fn instance(seed: u64, n: usize, mode: BudgetMode) -> Instance {
    let mut cfg = RandomInstanceConfig::new(n);
    cfg.max_states = 5;
    cfg.budget_mode = mode;
    random_instance_with(seed, cfg)
}

#[test]
fn flat_and_column_generation_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..12 {
        for mode in [BudgetMode::AtMost, BudgetMode::Exactly] {
            let inst = instance(seed, 6, mode);
            let fp = solve_fixed_point(&inst).unwrap();
            let x = random_x(&inst, &mut rng);
            for tau in [1, 3, 6] {
                let a = plan_with(&inst, &x, tau, &fp.mu, options(PlanMethod::Flat)).unwrap();
                let b = plan_with(&inst, &x, tau, &fp.mu, options(PlanMethod::ColumnGeneration)).unwrap();
                assert!((a.value - b.value).abs() < 1e-7 * (1.0 + a.value.abs()), "seed {seed} τ={tau}");
                for p in [&a, &b] {
                    assert!(p.conservation_residual(&inst) < 1e-8);
                    let r = p.report.unwrap();
                    assert!(r.duality_gap <= 1e-7 * (1.0 + r.objective.abs()));
                    assert!(r.primal_residual <= 1e-8);
                    assert!(r.complementary_slackness <= 1e-7);
                }
            }
        }
    }
}

#[test]
fn zero_horizon_is_the_terminal_reward() {
    let inst = random_instance(4, 8, 6);
    let fp = solve_fixed_point(&inst).unwrap();
    let x = random_x(&inst, &mut ChaCha8Rng::seed_from_u64(2));
    let p = plan(&inst, &x, 0, &fp.mu).unwrap();
    assert_eq!(p.value, x.inner(&fp.mu));
    assert_eq!(surrogate_cost(&inst, &fp, &x, 0).unwrap(), 0.0);
}

#[test]
fn lagrangian_bound_is_weakly_dual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..10 {
        let inst = instance(seed, 5, BudgetMode::AtMost);
        let fp = solve_fixed_point(&inst).unwrap();
        let x = random_x(&inst, &mut rng);
        let tau = 4;
        let p = plan_with(&inst, &x, tau, &fp.mu, options(PlanMethod::Flat)).unwrap();
        let at_opt = relaxed_value(&inst, &x, &fp.mu, &p.lambdas).unwrap();
        assert!((at_opt - p.value).abs() < 1e-7, "strong duality: {at_opt} vs {}", p.value);
        for _ in 0..50 {
            let lambdas: Vec<f64> = (0..tau).map(|_| rng.random_range(0.0..2.0)).collect();
            assert!(relaxed_value(&inst, &x, &fp.mu, &lambdas).unwrap() >= p.value - 1e-9);
        }
    }
}

#[test]
fn value_is_bounded_by_horizon_plus_multiplier_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..10 {
        let inst = random_instance(seed, 7, 6);
        let fp = solve_fixed_point(&inst).unwrap();
        for tau in 1..=5 {
            let x = one_hot(&random_state(&inst, &mut rng), &inst).unwrap();
            let v = plan(&inst, &x, tau, &fp.mu).unwrap().value;
            assert!(v <= tau as f64 + fp.mu_sup_norm() + 1e-9);
        }
    }
}

#[test]
fn stationary_point_has_zero_cost() {
    for seed in 0..10 {
        for mode in [BudgetMode::AtMost, BudgetMode::Exactly] {
            let inst = instance(seed, 6, mode);
            let fp = solve_fixed_point(&inst).unwrap();
            let xs = fp.x_star();
            assert!(rotated_cost(&inst, &fp, &xs, &fp.u_star()).unwrap().abs() < 1e-8);
            for tau in 1..=6 {
                assert!(surrogate_cost(&inst, &fp, &xs, tau).unwrap().abs() < 1e-8, "seed {seed} τ={tau}");
            }
            let sel = select_horizon(&inst, &fp, &xs, 1e-6, 10).unwrap();
            assert_eq!(sel.tau, 1);
            assert!(sel.converged);
        }
    }
}

#[test]
fn rotated_cost_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..10 {
        for mode in [BudgetMode::AtMost, BudgetMode::Exactly] {
            let inst = instance(seed, 6, mode);
            let fp = solve_fixed_point(&inst).unwrap();
            let budget = inst.alpha * inst.num_arms() as f64;
            let mut tried = 0;
            while tried < 100 {
                let x = random_x(&inst, &mut rng);
                let mut u: Vec<Vec<f64>> =
                    x.x.iter().map(|xn| xn.iter().map(|v| v * rng.random::<f64>()).collect()).collect();
                let total: f64 = u.iter().flatten().sum();
                let target = match mode {
                    BudgetMode::AtMost => total.min(budget),
                    BudgetMode::Exactly => budget,
                };
                let scale = target / total;
                if u.iter().flatten().zip(x.x.iter().flatten()).any(|(a, b)| a * scale > *b) {
                    continue;
                }
                u.iter_mut().flatten().for_each(|v| *v *= scale);
                assert!(rotated_cost(&inst, &fp, &x, &u).unwrap() >= -1e-8);
                tried += 1;
            }
        }
    }
}

#[test]
fn surrogate_cost_is_nondecreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..6 {
        let inst = instance(seed, 5, BudgetMode::Exactly);
        let fp = solve_fixed_point(&inst).unwrap();
        for _ in 0..3 {
            let x = one_hot(&random_state(&inst, &mut rng), &inst).unwrap();
            let mut prev = 0.0;
            for tau in 1..=8 {
                let c = surrogate_cost(&inst, &fp, &x, tau).unwrap();
                assert!(c >= prev - 1e-8, "seed {seed} τ={tau}: {c} < {prev}");
                prev = c;
            }
        }
    }
}

#[test]
fn one_arm_perturbation_is_lipschitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tested = 0;
    for seed in 0..8 {
        let inst = random_instance(seed, 6, 4);
        let Some((k, rho)) = ergodicity_report(&inst, 3, false).unwrap().positive() else { continue };
        let fp = solve_fixed_point(&inst).unwrap();
        for _ in 0..10 {
            let x = random_x(&inst, &mut rng);
            let mut y = x.clone();
            let i = rng.random_range(0..inst.num_arms());
            y.x[i] = random_x(&inst, &mut rng).x[i].clone();
            let dist: f64 = x.x[i].iter().zip(&y.x[i]).map(|(a, b)| (a - b).abs()).sum();
            let t = rng.random_range(1..=5);
            let l = value_lipschitz_constant(fp.mu_sup_norm(), k, rho, t).unwrap();
            let vx = plan(&inst, &x, t, &fp.mu).unwrap().value;
            let vy = plan(&inst, &y, t, &fp.mu).unwrap().value;
            assert!((vx - vy).abs() <= l * dist / inst.num_arms() as f64 + 1e-6);
            tested += 1;
        }
    }
    assert!(tested >= 40);
}

#[test]
fn zero_terminal_drops_the_storage_term() {
    let inst = yan_instance(4);
    let fp = solve_fixed_point(&inst).unwrap();
    let x = one_hot(&[0, 1, 2, 0], &inst).unwrap();
    let zero = PlanOptions { method: PlanMethod::Flat, zero_terminal: true };
    let p = plan_with(&inst, &x, 3, &fp.mu, zero).unwrap();
    let with = plan_with(&inst, &x, 3, &fp.mu, options(PlanMethod::Flat)).unwrap();
    assert!(p.value <= with.value + 1e-9);
    assert!(p.value <= 3.0 + 1e-9);
}

#[test]
fn bias_vanishes_at_the_fixed_point() {
    let inst = random_instance(11, 4, 4);
    let fp = solve_fixed_point(&inst).unwrap();
    let h = bias_estimate(&inst, &fp, &fp.x_star(), 1e-6).unwrap();
    assert!(h.converged);
    // Estimates T g* − V_T(x*) and V_T(x*) = T g* + ⟨μ, x*⟩.
    assert!((h.value + fp.x_star().inner(&fp.mu)).abs() < 1e-6);
}
