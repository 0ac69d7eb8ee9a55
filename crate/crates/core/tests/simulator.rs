use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmab::fixed_point::solve_fixed_point;
use rmab::model::{yan_instance, ArmModel, BudgetMode, Instance};
use rmab::policies::{lp_update_policy, random_feasible_policy, LpPriorityPolicy};
use rmab::rounding::RoundingMode;
use rmab::simulator::{initial_state, mean_ci95, normalized_metric, replicate_rngs, run_replicate, step};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(observed: &[usize], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((observed.len() - 1) as f64).unwrap().cdf(stat)
}

fn three_state_arm() -> ArmModel {
    let p0 = vec![vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8], vec![0.6, 0.3, 0.1]];
    let p1 = vec![vec![0.7, 0.2, 0.1], vec![0.0, 0.5, 0.5], vec![0.25, 0.25, 0.5]];
    ArmModel::new(0, p0, p1, vec![0.0, 0.5, 1.0], vec![0.2, 0.4, 0.9]).unwrap()
}

#[test]
fn transitions_follow_the_kernel() {
    let inst = Instance::new(vec![three_state_arm()], 1.0, BudgetMode::AtMost).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 30_000;
    for (a, s) in [(0, 0), (0, 2), (1, 1), (1, 2)] {
        let mut counts = vec![0usize; 3];
        for _ in 0..draws {
            counts[step(&inst, &[s], &[a == 1], &mut rng).unwrap().0[0]] += 1;
        }
        let row = inst.arms[0].row(a, s);
        let support: Vec<usize> = (0..3).filter(|&t| row[t] > 0.0).collect();
        for t in 0..3 {
            if row[t] == 0.0 {
                assert_eq!(counts[t], 0);
            }
        }
        let obs: Vec<usize> = support.iter().map(|&t| counts[t]).collect();
        let exp: Vec<f64> = support.iter().map(|&t| row[t] * draws as f64).collect();
        assert!(chi_square_p(&obs, &exp) > 1e-3, "a={a} s={s}: {counts:?}");
    }
}

#[test]
fn initial_states_are_uniform() {
    let inst = Instance::new(vec![three_state_arm()], 1.0, BudgetMode::AtMost).unwrap();
    let mut counts = vec![0usize; 3];
    for rep in 0..6000 {
        let (mut init, _) = replicate_rngs(17, rep);
        counts[initial_state(&inst, &mut init)[0]] += 1;
    }
    assert!(chi_square_p(&counts, &[2000.0; 3]) > 1e-3, "{counts:?}");
}

#[test]
fn replicate_streams_are_distinct_and_reproducible() {
    let inst = yan_instance(10);
    let mut policy = random_feasible_policy(&inst);
    let a = run_replicate(&inst, &mut policy, 50, 4, 0, true, None).unwrap();
    let b = run_replicate(&inst, &mut policy, 50, 4, 0, true, None).unwrap();
    let c = run_replicate(&inst, &mut policy, 50, 4, 1, true, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states, c.states);
    // Replicates are independent draws: the two start states agree no more
    // often than chance over many pairs.
    let mut same = 0;
    for rep in 0..400 {
        let (mut i0, _) = replicate_rngs(4, 2 * rep);
        let (mut i1, _) = replicate_rngs(4, 2 * rep + 1);
        same += usize::from(initial_state(&inst, &mut i0)[0] == initial_state(&inst, &mut i1)[0]);
    }
    // Yan arms have 3 states, so a match has probability 1/3.
    let sigma = (400.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    assert!((same as f64 - 400.0 / 3.0).abs() < 4.0 * sigma);
}

#[test]
fn policies_share_the_initial_state() {
    let inst = yan_instance(12);
    let fp = solve_fixed_point(&inst).unwrap();
    let mut p1 = random_feasible_policy(&inst);
    let mut p2 = LpPriorityPolicy::from_fixed_point(&inst, &fp);
    let a = run_replicate(&inst, &mut p1, 3, 9, 5, true, None).unwrap();
    let b = run_replicate(&inst, &mut p2, 3, 9, 5, true, None).unwrap();
    assert_eq!(a.states[0], b.states[0]);
}

#[test]
fn student_t_interval_by_hand() {
    // Mean 2, sample sd 1, t_{0.975, 2} = 4.302653.
    let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]);
    assert!((m - 2.0).abs() < 1e-15);
    assert!((h - 4.302_652_729_7 / 3f64.sqrt()).abs() < 1e-8);
    assert_eq!(mean_ci95(&[5.0]).1, 0.0);
}

#[test]
fn pinned_yan_trajectory() {
    // Regression value from this implementation; any change in stream use,
    // planning or rounding moves it.
    let inst = yan_instance(30).with_budget_mode(BudgetMode::Exactly);
    let fp = solve_fixed_point(&inst).unwrap();
    let mut policy = lp_update_policy(&inst, &fp, 4, RoundingMode::Randomized).unwrap().with_cache();
    let records: Vec<_> =
        (0..3).map(|rep| run_replicate(&inst, &mut policy, 200, 2024, rep, false, None).unwrap()).collect();
    let metric = normalized_metric(&records, fp.gain).unwrap();
    assert!((metric.final_mean - PINNED).abs() < 1e-9, "{}", metric.final_mean);
}

const PINNED: f64 = 0.965_173_780_170;
