use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmab::rounding::{
    marginal_error_bound, round_budgeted, round_water_filling, round_wmdp, wmdp_action_probability,
};

fn profile(rng: &mut ChaCha8Rng, n: usize, cap: f64) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let s: f64 = p.iter().sum();
    let target = rng.random_range(0.0..=cap);
    if s > target {
        p.iter_mut().for_each(|v| *v *= target / s);
    }
    p
}

fn count(a: &[bool]) -> usize {
    a.iter().filter(|&&b| b).count()
}

proptest! {
    #[test]
    fn systematic_sampling_count_is_floor_or_ceil(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = rng.random_range(0.0..=n as f64);
        let p = profile(&mut rng, n, cap);
        let sum: f64 = p.iter().sum();
        let a = round_budgeted(&p, cap, &mut rng).unwrap();
        let c = count(&a);
        prop_assert!(c <= (cap + 1e-9).floor() as usize);
        prop_assert!(c == (sum - 1e-9).floor().max(0.0) as usize || c == (sum + 1e-9).ceil() as usize
            || c == (cap + 1e-9).floor() as usize);
        for (ai, pi) in a.iter().zip(&p) {
            if *pi == 0.0 { prop_assert!(!ai); }
            if *pi >= 1.0 { prop_assert!(ai); }
        }
    }

    #[test]
    fn water_filling_respects_the_cap(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = rng.random_range(0.0..=n as f64);
        let p = profile(&mut rng, n, cap);
        let sum: f64 = p.iter().sum();
        let c = count(&round_water_filling(&p, cap, &mut rng).unwrap());
        prop_assert!(c <= (cap + 1e-9).floor() as usize);
        prop_assert!(c as f64 >= (sum.min(cap) - 1e-9).floor());
    }
}

#[test]
fn marginals_match_within_binomial_noise() {
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..5 {
        let n = 12 + trial;
        let cap = 0.35 * n as f64;
        let mut p = profile(&mut rng, n, cap);
        // Use the whole integer part of the budget so truncation never bites.
        let s: f64 = p.iter().sum();
        let whole = (cap + 1e-9).floor();
        if s > whole {
            p.iter_mut().for_each(|v| *v *= whole / s);
        }
        let sum: f64 = p.iter().sum();
        let mut hits = vec![0usize; n];
        for _ in 0..draws {
            let a = round_budgeted(&p, cap, &mut rng).unwrap();
            let c = count(&a);
            assert!(c == sum.floor() as usize || c == sum.ceil() as usize);
            for (h, b) in hits.iter_mut().zip(&a) {
                *h += usize::from(*b);
            }
        }
        let mut mean_err = 0.0;
        let mut mean_sigma = 0.0;
        for (h, &pn) in hits.iter().zip(&p) {
            let est = *h as f64 / draws as f64;
            let sigma = (pn * (1.0 - pn) / draws as f64).sqrt();
            assert!((est - pn).abs() <= 3.0 * sigma + 1e-12, "trial {trial}: {est} vs {pn}");
            mean_err += (est - pn).abs() / n as f64;
            mean_sigma += sigma / n as f64;
        }
        assert!(mean_err <= marginal_error_bound(n, cap) + 3.0 * mean_sigma);
    }
}

#[test]
fn water_filling_takes_the_top_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = [0.9, 0.6, 0.1, 0.0];
    let mut third = 0;
    for _ in 0..10_000 {
        let a = round_water_filling(&p, 2.0, &mut rng).unwrap();
        assert!(a[0]);
        assert!(!a[3]);
        assert!(count(&a) <= 2);
        third += usize::from(a[2]);
    }
    // B = 1.6: arm 0 always, arm 1 with probability 0.6, never arm 2.
    assert_eq!(third, 0);
}

#[test]
fn over_budget_profiles_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(round_budgeted(&[0.8, 0.8], 1.0, &mut rng).is_err());
    assert!(round_budgeted(&[1.5], 2.0, &mut rng).is_err());
    assert!(round_water_filling(&[0.8, 0.8], 1.0, &mut rng).is_err());
}

#[test]
fn shrunk_rounding_has_the_stated_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = vec![0.5, 0.3, 0.2];
    let eps = 0.1;
    let draws = 200_000;
    let mut hits = [0usize; 3];
    for _ in 0..draws {
        hits[round_wmdp(&[q.clone()], eps, 0, &mut rng).unwrap()[0]] += 1;
    }
    for a in 0..3 {
        let p = wmdp_action_probability(&q, eps, 0, a);
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((hits[a] as f64 / draws as f64 - p).abs() <= 4.0 * sigma);
    }
    assert!((wmdp_action_probability(&q, eps, 0, 0) - 0.7).abs() < 1e-12);
}
