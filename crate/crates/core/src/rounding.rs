//! Turning fractional pull probabilities into feasible joint actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    /// Systematic sampling with exact marginals.
    #[default]
    Randomized,
    /// Highest probabilities first, one randomized boundary arm.
    WaterFilling,
}

impl std::str::FromStr for RoundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "randomized" => Ok(RoundingMode::Randomized),
            "water-filling" => Ok(RoundingMode::WaterFilling),
            other => Err(Error::InvalidArgument(format!("unknown rounding mode `{other}`"))),
        }
    }
}

fn check_profile(p: &[f64], cap: f64) -> Result<f64> {
    if let Some(v) = p.iter().find(|v| !(-1e-9..=1.0 + 1e-9).contains(*v)) {
        return Err(Error::InvalidArgument(format!("activation probability {v} outside [0, 1]")));
    }
    let sum: f64 = p.iter().map(|v| v.clamp(0.0, 1.0)).sum();
    if sum > cap + 1e-9 {
        return Err(Error::InvalidArgument(format!("activation mass {sum} exceeds budget {cap}")));
    }
    Ok(sum)
}

fn floor_cap(cap: f64) -> usize {
    (cap + 1e-9).floor().max(0.0) as usize
}

/// Drops the highest-numbered activations until at most `limit` remain.
fn truncate(actions: &mut [bool], limit: usize) {
    let mut count = actions.iter().filter(|&&a| a).count();
    for a in actions.iter_mut().rev() {
        if count <= limit {
            break;
        }
        if *a {
            *a = false;
            count -= 1;
        }
    }
}

/// Systematic sampling: one uniform `U`, and arm `n` is active when the
/// interval it occupies on the cumulative sum of `p` contains a point of
/// `U + ℤ`. Marginals are exact and the count is `⌊Σp⌋` or `⌈Σp⌉`, then
/// capped at `⌊cap⌋`.
pub fn round_budgeted<R: Rng + ?Sized>(p: &[f64], cap: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_profile(p, cap)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut actions = Vec::with_capacity(p.len());
    for &pn in p {
        let next = cum + pn.clamp(0.0, 1.0);
        actions.push((next - u).ceil() - (cum - u).ceil() >= 1.0);
        cum = next;
    }
    truncate(&mut actions, floor_cap(cap));
    Ok(actions)
}

/// Activates arms by descending `p` (ties by arm id) until `⌊B⌋` are active,
/// with `B = min(Σp, cap)`; the next arm is active with probability `B − ⌊B⌋`
/// when that keeps the count within `⌊cap⌋`.
pub fn round_water_filling<R: Rng + ?Sized>(p: &[f64], cap: f64, rng: &mut R) -> Result<Vec<bool>> {
    let sum = check_profile(p, cap)?;
    let b = sum.min(cap);
    let whole = floor_cap(b);
    let frac = (b - whole as f64).max(0.0);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
    let mut actions = vec![false; p.len()];
    for &n in order.iter().take(whole) {
        actions[n] = true;
    }
    let u: f64 = rng.random();
    if frac > 1e-9 && whole < floor_cap(cap) && u < frac {
        if let Some(&n) = order.get(whole) {
            actions[n] = true;
        }
    }
    Ok(actions)
}

pub fn round<R: Rng + ?Sized>(mode: RoundingMode, p: &[f64], cap: f64, rng: &mut R) -> Result<Vec<bool>> {
    match mode {
        RoundingMode::Randomized => round_budgeted(p, cap, rng),
        RoundingMode::WaterFilling => round_water_filling(p, cap, rng),
    }
}

/// Right-hand side of the marginal-error bound `(αN − ⌊αN⌋)/N`.
pub fn marginal_error_bound(num_arms: usize, cap: f64) -> f64 {
    (cap - floor_cap(cap) as f64).max(0.0) / num_arms as f64
}

/// Independent per-arm sampling from shrunk distributions: action `a ≠ a*`
/// has probability `(q(a) − ε)⁺` and `a*` takes the remaining mass.
pub fn round_wmdp<R: Rng + ?Sized>(distributions: &[Vec<f64>], epsilon: f64, a_star: usize, rng: &mut R) -> Result<Vec<usize>> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument("ε must be nonnegative".into()));
    }
    distributions
        .iter()
        .map(|q| {
            if a_star >= q.len() {
                return Err(Error::InvalidArgument(format!("fallback action {a_star} out of range")));
            }
            let u: f64 = rng.random();
            let mut cum = 0.0;
            for (a, &qa) in q.iter().enumerate() {
                if a == a_star {
                    continue;
                }
                cum += (qa - epsilon).max(0.0);
                if u < cum {
                    return Ok(a);
                }
            }
            Ok(a_star)
        })
        .collect()
}

/// Probability that `round_wmdp` plays `a` for an arm with distribution `q`.
pub fn wmdp_action_probability(q: &[f64], epsilon: f64, a_star: usize, a: usize) -> f64 {
    let shrunk = |b: usize| (q[b] - epsilon).max(0.0);
    if a == a_star {
        1.0 - (0..q.len()).filter(|&b| b != a_star).map(shrunk).sum::<f64>()
    } else {
        shrunk(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn integral_profiles_are_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(round_budgeted(&[1.0, 0.0, 0.0], 1.5, &mut rng).unwrap(), vec![true, false, false]);
            assert_eq!(round_water_filling(&[0.0, 1.0, 1.0], 2.0, &mut rng).unwrap(), vec![false, true, true]);
        }
    }

    #[test]
    fn water_filling_boundary_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut second = 0;
        for _ in 0..10_000 {
            let a = round_water_filling(&[0.9, 0.6, 0.1], 2.0, &mut rng).unwrap();
            assert!(a[0] && !a[2]);
            second += usize::from(a[1]);
        }
        assert!((second as f64 / 10_000.0 - 0.6).abs() < 0.02);
    }

    #[test]
    fn water_filling_fractional_cap_keeps_the_top_arms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a = round_water_filling(&[0.2, 0.9, 0.5, 0.9], 2.5, &mut rng).unwrap();
            assert_eq!(a, vec![false, true, false, true]);
        }
    }

    #[test]
    fn water_filling_equal_profile_uses_lowest_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = round_water_filling(&[0.5; 4], 2.0, &mut rng).unwrap();
        assert_eq!(a, vec![true, true, false, false]);
    }

    #[test]
    fn rejects_excess_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(round_budgeted(&[0.9, 0.9], 1.0, &mut rng).is_err());
        assert!(round_budgeted(&[1.5], 2.0, &mut rng).is_err());
    }

    #[test]
    fn wmdp_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(round_wmdp(&d, 0.0, 0, &mut rng).unwrap(), vec![2, 1]);
        assert_eq!(round_wmdp(&d, 1.0, 0, &mut rng).unwrap(), vec![0, 0]);
        assert!((wmdp_action_probability(&[0.2, 0.5, 0.3], 0.1, 0, 0) - 0.4).abs() < 1e-12);
    }
}
