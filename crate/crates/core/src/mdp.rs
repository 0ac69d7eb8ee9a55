//! Single-arm dynamic programming: relative value iteration, backward
//! induction and stationary distributions.

use crate::error::{Error, Result};
use crate::model::ArmModel;

/// Mixing weight of the aperiodicity transform `δP + (1 − δ)I`.
const APERIODICITY: f64 = 0.5;

/// Optimal average-reward solution of one arm under a pull price `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSolution {
    pub gain: f64,
    /// Relative values of the untransformed arm, minimum 0.
    pub bias: Vec<f64>,
    /// Greedy action per state; ties go to action 0.
    pub policy: Vec<usize>,
    pub iterations: usize,
}

/// Relative value iteration on the arm with reward `r(s, a) − λa`, stopped
/// when the span of successive differences drops below `tol`.
///
/// Fails when the span has not converged after `max_iter` sweeps, which
/// happens on multichain arms whose optimal gain depends on the start state.
pub fn relative_value_iteration(arm: &ArmModel, lambda: f64, tol: f64, max_iter: usize) -> Result<ArmSolution> {
    let n = arm.num_states();
    let d = APERIODICITY;
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    for it in 1..=max_iter {
        for s in 0..n {
            let q0 = arm.reward(s, 0) + d * arm.expect(0, s, &v) + (1.0 - d) * v[s];
            let q1 = arm.reward(s, 1) - lambda + d * arm.expect(1, s, &v) + (1.0 - d) * v[s];
            next[s] = q0.max(q1);
        }
        let (lo, hi) = next
            .iter()
            .zip(&v)
            .map(|(a, b)| a - b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        let anchor = next[0];
        for (vs, ns) in v.iter_mut().zip(&next) {
            *vs = ns - anchor;
        }
        if hi - lo < tol {
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let bias: Vec<f64> = v.iter().map(|x| d * (x - min)).collect();
            let policy = greedy_policy(arm, lambda, &bias);
            return Ok(ArmSolution { gain: 0.5 * (lo + hi), bias, policy, iterations: it });
        }
    }
    Err(Error::NumericalFailure(format!(
        "relative value iteration did not converge in {max_iter} sweeps"
    )))
}

/// Greedy action for each state with respect to `v`, ties to action 0.
fn greedy_policy(arm: &ArmModel, lambda: f64, v: &[f64]) -> Vec<usize> {
    (0..arm.num_states())
        .map(|s| {
            let q0 = arm.reward(s, 0) + arm.expect(0, s, v);
            let q1 = arm.reward(s, 1) - lambda + arm.expect(1, s, v);
            usize::from(q1 > q0 + 1e-12)
        })
        .collect()
}

/// Finite-horizon values `W_t(s) = max_a [r(s,a) − λ_t a + P_a W_{t+1}(s)]`
/// with `W_τ = terminal`. Returns `W_0` and the greedy action table indexed
/// `[t][s]`; ties go to action 0.
pub fn backward_induction(arm: &ArmModel, lambdas: &[f64], terminal: &[f64]) -> (Vec<f64>, Vec<Vec<usize>>) {
    let n = arm.num_states();
    let mut w = terminal.to_vec();
    let mut next = vec![0.0; n];
    let mut actions = vec![Vec::new(); lambdas.len()];
    for t in (0..lambdas.len()).rev() {
        let mut row = vec![0usize; n];
        for s in 0..n {
            let q0 = arm.reward(s, 0) + arm.expect(0, s, &w);
            let q1 = arm.reward(s, 1) - lambdas[t] + arm.expect(1, s, &w);
            if q1 > q0 {
                next[s] = q1;
                row[s] = 1;
            } else {
                next[s] = q0;
            }
        }
        std::mem::swap(&mut w, &mut next);
        actions[t] = row;
    }
    (w, actions)
}

/// Row-major kernel of the stationary randomized policy that pulls state `s`
/// with probability `pull[s]`.
pub fn policy_kernel(arm: &ArmModel, pull: &[f64]) -> Vec<f64> {
    let n = arm.num_states();
    let mut k = Vec::with_capacity(n * n);
    for (s, &p) in pull.iter().enumerate() {
        k.extend(arm.row(0, s).iter().zip(arm.row(1, s)).map(|(a, b)| (1.0 - p) * a + p * b));
    }
    k
}

/// Stationary distribution of a row-major `n × n` kernel with a single
/// recurrent class.
pub fn stationary_distribution(kernel: &[f64], n: usize) -> Result<Vec<f64>> {
    // Solve πᵀ(P − I) = 0 with the last equation replaced by Σπ = 1.
    let mut a = vec![0.0; n * (n + 1)];
    let w = n + 1;
    for i in 0..n {
        for j in 0..n {
            a[i * w + j] = kernel[j * n + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1) * w + j] = 1.0;
    }
    a[(n - 1) * w + n] = 1.0;
    let x = gauss_solve(&mut a, n).ok_or_else(|| {
        Error::NumericalFailure("kernel has more than one recurrent class".into())
    })?;
    Ok(x.into_iter().map(|v| v.max(0.0)).collect())
}

/// Solves the `n × (n+1)` augmented system in place with partial pivoting.
pub(crate) fn gauss_solve(a: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let w = n + 1;
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x * w + c].abs().total_cmp(&a[y * w + c].abs()))?;
        if a[p * w + c].abs() < 1e-12 {
            return None;
        }
        for k in 0..w {
            a.swap(p * w + k, c * w + k);
        }
        for i in c + 1..n {
            let f = a[i * w + c] / a[c * w + c];
            if f != 0.0 {
                for k in c..w {
                    a[i * w + k] -= f * a[c * w + k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i * w + k] * x[k]).sum();
        x[i] = (a[i * w + n] - s) / a[i * w + i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{counterexample_yan, random_instance};

    #[test]
    fn one_state_arm() {
        let arm = ArmModel::new(0, vec![vec![1.0]], vec![vec![1.0]], vec![0.0], vec![1.0]).unwrap();
        let sol = relative_value_iteration(&arm, 0.25, 1e-12, 100).unwrap();
        assert!((sol.gain - 0.75).abs() < 1e-12);
        assert_eq!(sol.policy, vec![1]);
        let sol = relative_value_iteration(&arm, 1.0, 1e-12, 100).unwrap();
        assert_eq!(sol.policy, vec![0], "tie goes to action 0");
    }

    #[test]
    fn bias_satisfies_poisson_equation() {
        let inst = random_instance(11, 3, 6);
        for arm in &inst.arms {
            let sol = relative_value_iteration(arm, 0.2, 1e-12, 100_000).unwrap();
            for s in 0..arm.num_states() {
                let q = |a: usize| arm.reward(s, a) - 0.2 * a as f64 + arm.expect(a, s, &sol.bias);
                let best = q(0).max(q(1));
                assert!((sol.bias[s] + sol.gain - best).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let (arm, _) = counterexample_yan();
        let k = policy_kernel(&arm, &[0.3, 0.6, 1.0]);
        let pi = stationary_distribution(&k, 3).unwrap();
        let mut x = vec![1.0, 0.0, 0.0];
        for _ in 0..2000 {
            let mut y = vec![0.0; 3];
            for s in 0..3 {
                for t in 0..3 {
                    y[t] += x[s] * k[s * 3 + t];
                }
            }
            x = y;
        }
        for (a, b) in pi.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_induction_zero_horizon_is_terminal() {
        let (arm, _) = counterexample_yan();
        let (w, acts) = backward_induction(&arm, &[], &[1.0, 2.0, 3.0]);
        assert_eq!(w, vec![1.0, 2.0, 3.0]);
        assert!(acts.is_empty());
    }
}
