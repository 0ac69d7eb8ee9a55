//! The stationary relaxation: gain, optimal state-action measure, Markov
//! multipliers and the budget dual, plus the LP-priority index built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, LpProblem, LpStatus};
use crate::mdp;
use crate::model::{BudgetMode, Instance, ProductDistribution};

/// Solution of the stationary relaxation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    /// Optimal relaxed average reward per arm.
    pub gain: f64,
    /// Per arm, per state: `[y(s, 0), y(s, 1)]`.
    pub y_star: Vec<Vec<[f64; 2]>>,
    /// Multipliers of the stationarity rows, shifted so each arm's minimum is 0.
    pub mu: Vec<Vec<f64>>,
    /// Dual of the budget row, in reward units per pull.
    pub lambda_rel: f64,
    pub budget_mode: BudgetMode,
}

impl FixedPoint {
    /// Stationary state distribution `x*(s) = y*(s, 0) + y*(s, 1)`.
    pub fn x_star(&self) -> ProductDistribution {
        let x = self.y_star.iter().map(|arm| arm.iter().map(|[a, b]| a + b).collect()).collect();
        ProductDistribution { x }
    }

    /// Pull component `u*(s) = y*(s, 1)`.
    pub fn u_star(&self) -> Vec<Vec<f64>> {
        self.y_star.iter().map(|arm| arm.iter().map(|y| y[1]).collect()).collect()
    }

    /// Probability that arm `n` pulls in state `s` under the stationary
    /// randomized policy; `None` where `x*(s) = 0`.
    pub fn pull_probability(&self, n: usize, s: usize) -> Option<f64> {
        let [a, b] = self.y_star[n][s];
        (a + b > 1e-12).then(|| (b / (a + b)).clamp(0.0, 1.0))
    }

    pub fn mu_sup_norm(&self) -> f64 {
        self.mu.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `(1/N) Σ_n ‖y*_n(·, 1)‖₁`.
    pub fn pull_fraction(&self) -> f64 {
        let total: f64 = self.y_star.iter().flatten().map(|y| y[1]).sum();
        total / self.y_star.len() as f64
    }

    /// The fixed point of `instance.replicate(copies)`, which by symmetry is
    /// this one with every arm repeated.
    pub fn replicate(&self, copies: usize) -> FixedPoint {
        fn rep<T: Clone>(v: &[T], copies: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(v.len() * copies);
            for _ in 0..copies {
                out.extend_from_slice(v);
            }
            out
        }
        FixedPoint { y_star: rep(&self.y_star, copies), mu: rep(&self.mu, copies), ..self.clone() }
    }

    /// Largest violation of normalization and stationarity over all arms.
    pub fn stationarity_residual(&self, instance: &Instance) -> f64 {
        let mut worst: f64 = 0.0;
        for (arm, y) in instance.arms.iter().zip(&self.y_star) {
            let total: f64 = y.iter().map(|v| v[0] + v[1]).sum();
            worst = worst.max((total - 1.0).abs());
            let mut flow = vec![0.0; arm.num_states()];
            let y0: Vec<f64> = y.iter().map(|v| v[0]).collect();
            let y1: Vec<f64> = y.iter().map(|v| v[1]).collect();
            arm.push_forward(0, &y0, &mut flow);
            arm.push_forward(1, &y1, &mut flow);
            for (s, f) in flow.iter().enumerate() {
                worst = worst.max((y[s][0] + y[s][1] - f).abs());
            }
        }
        worst
    }
}

fn normalize_mu(mu: &mut [Vec<f64>]) {
    for m in mu {
        let min = m.iter().copied().fold(f64::INFINITY, f64::min);
        for v in m.iter_mut() {
            *v -= min;
        }
    }
}

/// Solves the stationary relaxation as one LP. Arms with identical models
/// share variables, weighted by their multiplicity.
pub fn solve_fixed_point(instance: &Instance) -> Result<FixedPoint> {
    let (types, reps) = instance.arm_types();
    let mut count = vec![0usize; reps.len()];
    for &k in &types {
        count[k] += 1;
    }
    let mut offset = Vec::with_capacity(reps.len());
    let mut nvars = 0;
    for &r in &reps {
        offset.push(nvars);
        nvars += 2 * instance.arms[r].num_states();
    }
    let var = |k: usize, s: usize, a: usize| offset[k] + 2 * s + a;

    let mut lp = LpProblem::new(nvars);
    let mut stationarity_rows = Vec::with_capacity(reps.len());
    for (k, &r) in reps.iter().enumerate() {
        let arm = &instance.arms[r];
        let ns = arm.num_states();
        for s in 0..ns {
            for a in 0..2 {
                lp.set_objective(var(k, s, a), arm.reward(s, a));
            }
        }
        let first = lp.num_eq();
        for t in 0..ns {
            let mut coeffs = vec![(var(k, t, 0), 1.0), (var(k, t, 1), 1.0)];
            for s in 0..ns {
                for a in 0..2 {
                    let p = arm.prob(a, s, t);
                    if p != 0.0 {
                        coeffs.push((var(k, s, a), -p));
                    }
                }
            }
            lp.add_eq(coeffs, 0.0);
        }
        stationarity_rows.push(first);
        lp.add_eq((0..ns).flat_map(|s| [(var(k, s, 0), 1.0), (var(k, s, 1), 1.0)]), count[k] as f64);
    }
    let pulls: Vec<(usize, f64)> = reps
        .iter()
        .enumerate()
        .flat_map(|(k, &r)| (0..instance.arms[r].num_states()).map(move |s| (k, s)))
        .map(|(k, s)| (var(k, s, 1), 1.0))
        .collect();
    let budget = instance.budget();
    let exactly = instance.budget_mode == BudgetMode::Exactly;
    if exactly {
        lp.add_eq(pulls, budget);
    } else {
        lp.add_le(pulls, budget);
    }

    let sol = lp::solve(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(Error::Infeasible),
        LpStatus::Unbounded => return Err(Error::Unbounded),
    }
    let lambda_rel = if exactly { sol.eq_duals[lp.num_eq() - 1] } else { sol.ineq_duals[0] };

    let mut y_star = Vec::with_capacity(instance.num_arms());
    let mut mu = Vec::with_capacity(instance.num_arms());
    for &k in &types {
        let ns = instance.arms[reps[k]].num_states();
        let m = count[k] as f64;
        y_star.push((0..ns).map(|s| [sol.primal[var(k, s, 0)] / m, sol.primal[var(k, s, 1)] / m]).collect());
        mu.push(sol.eq_duals[stationarity_rows[k]..stationarity_rows[k] + ns].to_vec());
    }
    normalize_mu(&mut mu);
    Ok(FixedPoint {
        gain: sol.objective / instance.num_arms() as f64,
        y_star,
        mu,
        lambda_rel,
        budget_mode: instance.budget_mode,
    })
}

const RVI_TOL: f64 = 1e-10;
const RVI_MAX_ITER: usize = 1_000_000;

struct Evaluation {
    gain: f64,
    pulls: f64,
    per_type: Vec<(mdp::ArmSolution, Vec<f64>)>,
}

/// Options for [`solve_fixed_point_decomposed_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecomposedOptions {
    /// Width of the final λ bracket.
    pub tol: f64,
    /// Known upper bound on the optimal λ, such as `k/ρ_k`.
    pub lambda_upper: Option<f64>,
}

/// Solves the relaxation by minimizing the Lagrangian dual
/// `αλ + (1/N) Σ_n g_n(λ)` over the scalar pull price `λ`, where `g_n` is the
/// optimal gain of arm `n` alone with reward `r(s, a) − λa`.
pub fn solve_fixed_point_decomposed(instance: &Instance, tol: f64) -> Result<FixedPoint> {
    solve_fixed_point_decomposed_with(instance, DecomposedOptions { tol, lambda_upper: None })
}

pub fn solve_fixed_point_decomposed_with(instance: &Instance, options: DecomposedOptions) -> Result<FixedPoint> {
    let (types, reps) = instance.arm_types();
    let mut count = vec![0usize; reps.len()];
    for &k in &types {
        count[k] += 1;
    }
    let n = instance.num_arms() as f64;
    let alpha = instance.alpha;
    let exactly = instance.budget_mode == BudgetMode::Exactly;

    let evaluate = |lambda: f64| -> Result<Evaluation> {
        let mut gain = 0.0;
        let mut pulls = 0.0;
        let mut per_type = Vec::with_capacity(reps.len());
        for (k, &r) in reps.iter().enumerate() {
            let arm = &instance.arms[r];
            let sol = mdp::relative_value_iteration(arm, lambda, RVI_TOL, RVI_MAX_ITER)?;
            let pull: Vec<f64> = sol.policy.iter().map(|&a| a as f64).collect();
            let pi = mdp::stationary_distribution(&mdp::policy_kernel(arm, &pull), arm.num_states())?;
            let m = count[k] as f64;
            gain += m * sol.gain;
            pulls += m * pi.iter().zip(&pull).map(|(p, a)| p * a).sum::<f64>();
            per_type.push((sol, pi));
        }
        Ok(Evaluation { gain: gain / n, pulls: pulls / n, per_type })
    };

    let at_zero = evaluate(0.0)?;
    let (lambda, lo_eval, hi_eval) = if !exactly && at_zero.pulls <= alpha + 1e-12 {
        let e = evaluate(0.0)?;
        (0.0, e, at_zero)
    } else {
        // Bracket the sign change of the subgradient α − pulls(λ).
        let (mut lo, mut hi, mut lo_eval, mut hi_eval);
        if at_zero.pulls > alpha {
            lo = 0.0;
            lo_eval = at_zero;
            hi = options.lambda_upper.unwrap_or(1.0).max(1e-3);
            hi_eval = evaluate(hi)?;
            while hi_eval.pulls > alpha {
                lo = hi;
                lo_eval = hi_eval;
                hi *= 2.0;
                if hi > 1e9 {
                    return Err(Error::NumericalFailure("failed to bracket the budget price".into()));
                }
                hi_eval = evaluate(hi)?;
            }
        } else {
            hi = 0.0;
            hi_eval = at_zero;
            lo = -1.0;
            lo_eval = evaluate(lo)?;
            while lo_eval.pulls < alpha {
                hi = lo;
                hi_eval = lo_eval;
                lo *= 2.0;
                if lo < -1e9 {
                    return Err(Error::NumericalFailure("failed to bracket the budget price".into()));
                }
                lo_eval = evaluate(lo)?;
            }
        }
        while hi - lo > options.tol {
            let mid = 0.5 * (lo + hi);
            let e = evaluate(mid)?;
            if e.pulls > alpha {
                lo = mid;
                lo_eval = e;
            } else {
                hi = mid;
                hi_eval = e;
            }
        }
        (0.5 * (lo + hi), lo_eval, hi_eval)
    };

    // Mix the two bracket-end measures so the budget is met exactly when it binds.
    let theta = if lo_eval.pulls - hi_eval.pulls > 1e-12 {
        ((alpha - hi_eval.pulls) / (lo_eval.pulls - hi_eval.pulls)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let center = evaluate(lambda)?;
    let gain = alpha * lambda + center.gain;

    let mut y_star = Vec::with_capacity(instance.num_arms());
    let mut mu = Vec::with_capacity(instance.num_arms());
    for &k in &types {
        let (lo_sol, lo_pi) = &lo_eval.per_type[k];
        let (hi_sol, hi_pi) = &hi_eval.per_type[k];
        let y: Vec<[f64; 2]> = (0..lo_pi.len())
            .map(|s| {
                let mut v = [0.0; 2];
                v[lo_sol.policy[s]] += theta * lo_pi[s];
                v[hi_sol.policy[s]] += (1.0 - theta) * hi_pi[s];
                v
            })
            .collect();
        y_star.push(y);
        mu.push(center.per_type[k].0.bias.clone());
    }
    normalize_mu(&mut mu);
    Ok(FixedPoint { gain, y_star, mu, lambda_rel: lambda, budget_mode: instance.budget_mode })
}

/// Per-arm, per-state `Q(s, a) = r(s, a) − λa + P_a μ(s)` and the index
/// `ω(s) = Q(s, 1) − Q(s, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityIndexTable {
    pub q: Vec<Vec<[f64; 2]>>,
    pub omega: Vec<Vec<f64>>,
}

impl PriorityIndexTable {
    pub fn index(&self, arm: usize, state: usize) -> f64 {
        self.omega[arm][state]
    }
}

pub fn priority_index_table(instance: &Instance, fixed_point: &FixedPoint) -> PriorityIndexTable {
    let lambda = fixed_point.lambda_rel;
    let mut q = Vec::with_capacity(instance.num_arms());
    let mut omega = Vec::with_capacity(instance.num_arms());
    for (arm, mu) in instance.arms.iter().zip(&fixed_point.mu) {
        let qa: Vec<[f64; 2]> = (0..arm.num_states())
            .map(|s| {
                [
                    arm.reward(s, 0) + arm.expect(0, s, mu),
                    arm.reward(s, 1) - lambda + arm.expect(1, s, mu),
                ]
            })
            .collect();
        omega.push(qa.iter().map(|[a, b]| b - a).collect());
        q.push(qa);
    }
    PriorityIndexTable { q, omega }
}
