//! The restless bandit seen as a two-action weakly coupled MDP must reproduce
//! every quantity of the native pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmab::analysis::ergodicity_coefficient;
use rmab::fixed_point::solve_fixed_point;
use rmab::horizon::{plan_with, PlanMethod, PlanOptions};
use rmab::model::{one_hot, random_instance, Instance};
use rmab::policies::lp_update_policy;
use rmab::rounding::RoundingMode;
use rmab::wmdp::{
    lp_update_policy_wmdp, run_wmdp, wmdp_ergodicity, wmdp_fixed_point, wmdp_plan, WmdpArm, WmdpInstance,
};

const FLAT: PlanOptions = PlanOptions { method: PlanMethod::Flat, zero_terminal: false };
const TOL: f64 = 1e-8;

fn corpus() -> Vec<Instance> {
    (0..20).map(|seed| random_instance(500 + seed, 3 + seed as usize % 5, 5)).collect()
}

fn random_state(inst: &Instance, rng: &mut ChaCha8Rng) -> Vec<usize> {
    inst.arms.iter().map(|a| rng.random_range(0..a.num_states())).collect()
}

#[test]
fn fixed_point_embeds() {
    for inst in corpus() {
        let native = solve_fixed_point(&inst).unwrap();
        let w = wmdp_fixed_point(&WmdpInstance::from_rmab(&inst).unwrap()).unwrap();
        assert!((native.gain - w.gain).abs() < TOL);
        for (a, b) in native.mu.iter().flatten().zip(w.mu.iter().flatten()) {
            assert!((a - b).abs() < TOL, "μ {a} vs {b}");
        }
        for (ya, yb) in native.y_star.iter().flatten().zip(w.y_star.iter().flatten()) {
            assert!((ya[0] - yb[0]).abs() < TOL && (ya[1] - yb[1]).abs() < TOL);
        }
        assert!((native.lambda_rel - w.budget_duals[0]).abs() < TOL);
    }
}

#[test]
fn plans_embed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for inst in corpus() {
        let fp = solve_fixed_point(&inst).unwrap();
        let w = WmdpInstance::from_rmab(&inst).unwrap();
        let state = random_state(&inst, &mut rng);
        let x = one_hot(&state, &inst).unwrap();
        for tau in [1, 3] {
            let native = plan_with(&inst, &x, tau, &fp.mu, FLAT).unwrap();
            let embedded = wmdp_plan(&w, &x.x, tau, &fp.mu).unwrap();
            assert!((native.value - embedded.value).abs() < TOL);
            for (fa, fb) in native.flows.iter().flatten().flatten().zip(embedded.flows.iter().flatten().flatten()) {
                assert!((fa[0] - fb[0]).abs() < TOL && (fa[1] - fb[1]).abs() < TOL);
            }
            for (la, db) in native.lambdas.iter().zip(&embedded.duals) {
                assert!((la - db[0]).abs() < TOL);
            }
        }
    }
}

#[test]
fn ergodicity_embeds() {
    for inst in corpus() {
        let w = WmdpInstance::from_rmab(&inst).unwrap();
        for k in 1..=4 {
            let a = ergodicity_coefficient(&inst, k).unwrap();
            let b = wmdp_ergodicity(&w, 0, k, false).unwrap();
            assert!((a - b).abs() < TOL, "k {k}: {a} vs {b}");
        }
    }
}

#[test]
fn activation_profiles_embed() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for inst in corpus() {
        let fp = solve_fixed_point(&inst).unwrap();
        let mut native = lp_update_policy(&inst, &fp, 3, RoundingMode::Randomized).unwrap().with_plan_options(FLAT);
        let embedded = lp_update_policy_wmdp(&WmdpInstance::from_rmab(&inst).unwrap(), 3, Some(0.0)).unwrap();
        assert_eq!(embedded.a_star(), 0);
        for _ in 0..3 {
            let state = random_state(&inst, &mut rng);
            let p = native.profile(&state).unwrap();
            let q = embedded.profile(&state).unwrap();
            for (pn, qn) in p.iter().zip(&q) {
                assert!((pn - qn[1]).abs() < TOL && (1.0 - pn - qn[0]).abs() < TOL);
            }
        }
    }
}

fn random_wmdp_arm(rng: &mut ChaCha8Rng, states: usize, actions: usize) -> WmdpArm {
    let p = (0..actions)
        .map(|_| {
            (0..states)
                .map(|_| {
                    let row: Vec<f64> = (0..states).map(|_| 0.05 + rng.random::<f64>()).collect();
                    let s: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
        .collect();
    let r = (0..actions).map(|_| (0..states).map(|_| rng.random::<f64>()).collect()).collect();
    WmdpArm::new(p, r).unwrap()
}

/// Optimal gain of one arm alone, by value iteration on the lazy chain
/// `(I + P)/2`, which has the same gain.
fn single_arm_gain(arm: &WmdpArm) -> f64 {
    let n = arm.num_states();
    let mut v = vec![0.0; n];
    for _ in 0..100_000 {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..arm.num_actions())
                    .map(|a| arm.reward(s, a) + 0.5 * v[s] + 0.5 * arm.expect(a, s, &v))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff: Vec<f64> = next.iter().zip(&v).map(|(a, b)| a - b).collect();
        let hi = diff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = diff.iter().cloned().fold(f64::INFINITY, f64::min);
        v = next.iter().map(|x| x - next[0]).collect();
        if hi - lo < 1e-12 {
            return 0.5 * (hi + lo);
        }
    }
    panic!("value iteration did not converge");
}

#[test]
fn uncoupled_arms_decompose() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let arms: Vec<WmdpArm> = (0..4).map(|_| random_wmdp_arm(&mut rng, 3, 3)).collect();
        let expected = arms.iter().map(single_arm_gain).sum::<f64>() / arms.len() as f64;
        let costs = vec![Vec::new(); arms.len()];
        let inst = WmdpInstance::new(arms, costs, Vec::new()).unwrap();
        let fp = wmdp_fixed_point(&inst).unwrap();
        assert!((fp.gain - expected).abs() < 1e-8, "{} vs {expected}", fp.gain);
    }
}

#[test]
fn slack_constraints_have_zero_duals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arms: Vec<WmdpArm> = (0..5).map(|_| random_wmdp_arm(&mut rng, 3, 3)).collect();
    // The first budget never binds; the second does.
    let costs = arms
        .iter()
        .map(|_| vec![vec![vec![0.0, 0.1, 0.1]; 3], vec![vec![0.0, 1.0, 2.0]; 3]])
        .collect();
    let inst = WmdpInstance::new(arms, costs, vec![5.0, 0.3]).unwrap();
    let fp = wmdp_fixed_point(&inst).unwrap();
    assert_eq!(fp.budget_duals[0].abs(), 0.0);
    assert!(fp.budget_duals[1] >= 0.0);
    let mut policy = lp_update_policy_wmdp(&inst, 2, None).unwrap();
    let record = run_wmdp(&inst, &mut policy, 50, 1, 0).unwrap();
    assert_eq!(record.rewards.len(), 50);
}
