//! Checkable constants and diagnostics: the synchronization coefficient ρ_k,
//! the bounds built from it, the Jensen gap of the horizon LP and a
//! brute-force optimum for tiny instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::FixedPoint;
use crate::horizon::plan;
use crate::model::{one_hot, BudgetMode, Instance, ProductDistribution};
use crate::simulator::mean_ci95;

/// Largest `k` accepted without `force`.
pub const DEFAULT_K_CAP: usize = 8;
/// Joint-state cap for [`brute_force_optimal`].
pub const BRUTE_FORCE_STATE_CAP: usize = 4096;
/// Feasible joint-action cap for [`brute_force_optimal`].
pub const BRUTE_FORCE_ACTION_CAP: usize = 1_000_000;

/// A minimizing configuration for one arm: the first chain starts in `s` and
/// plays `actions`, the second starts in `s_prime` and stays passive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub arm: usize,
    pub s: usize,
    pub s_prime: usize,
    pub actions: Vec<u8>,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEntry {
    pub k: usize,
    pub rho: f64,
    /// Same minimum with the passive sequence given to the first chain.
    pub rho_symmetric: f64,
    /// One witness per arm.
    pub witnesses: Vec<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityReport {
    pub entries: Vec<RhoEntry>,
    /// Smallest `k` with `ρ_k > 0`, if any up to the scanned maximum.
    pub first_positive: Option<usize>,
}

impl ErgodicityReport {
    pub fn rho(&self, k: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.k == k).map(|e| e.rho)
    }

    /// `(k, ρ_k)` for the first positive coefficient.
    pub fn positive(&self) -> Option<(usize, f64)> {
        let k = self.first_positive?;
        self.rho(k).map(|r| (k, r))
    }
}

fn check_k(k: usize, force: bool) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > DEFAULT_K_CAP && !force {
        return Err(Error::TooLarge(format!(
            "k = {k} exceeds the default cap {DEFAULT_K_CAP}; pass force to run it"
        )));
    }
    Ok(())
}

fn overlap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// `e_s · P_{a_1} ⋯ P_{a_k}` for every start state `s`.
fn k_step_rows(arm: &crate::model::ArmModel, actions: &[u8]) -> Vec<Vec<f64>> {
    let n = arm.num_states();
    (0..n)
        .map(|s| {
            let mut v = vec![0.0; n];
            v[s] = 1.0;
            for &a in actions {
                let mut next = vec![0.0; n];
                arm.push_forward(usize::from(a), &v, &mut next);
                v = next;
            }
            v
        })
        .collect()
}

/// Minimum over start pairs and action sequences for one arm. The sequences
/// are enumerated depth-first so prefix products are shared.
fn arm_minimum(arm: &crate::model::ArmModel, arm_id: usize, k: usize) -> (Witness, f64) {
    let n = arm.num_states();
    let passive = k_step_rows(arm, &vec![0u8; k]);
    let mut best = Witness { arm: arm_id, s: 0, s_prime: 0, actions: vec![0; k], overlap: f64::INFINITY };
    let mut best_sym = f64::INFINITY;
    let start: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            let mut v = vec![0.0; n];
            v[s] = 1.0;
            v
        })
        .collect();
    let mut seq = Vec::with_capacity(k);
    let mut stack = vec![start];
    descend(arm, k, &passive, &mut seq, &mut stack, &mut best, &mut best_sym);
    (best, best_sym)
}

fn descend(
    arm: &crate::model::ArmModel,
    k: usize,
    passive: &[Vec<f64>],
    seq: &mut Vec<u8>,
    stack: &mut Vec<Vec<Vec<f64>>>,
    best: &mut Witness,
    best_sym: &mut f64,
) {
    if seq.len() == k {
        let rows = stack.last().expect("stack holds the current prefix");
        for (s, row) in rows.iter().enumerate() {
            for (s_prime, base) in passive.iter().enumerate() {
                let v = overlap(row, base);
                if v < best.overlap {
                    *best = Witness { arm: best.arm, s, s_prime, actions: seq.clone(), overlap: v };
                }
                let w = overlap(base, row);
                if w < *best_sym {
                    *best_sym = w;
                }
            }
        }
        return;
    }
    for a in 0..2u8 {
        let n = arm.num_states();
        let next: Vec<Vec<f64>> = stack
            .last()
            .expect("stack holds the current prefix")
            .iter()
            .map(|v| {
                let mut out = vec![0.0; n];
                arm.push_forward(usize::from(a), v, &mut out);
                out
            })
            .collect();
        stack.push(next);
        seq.push(a);
        descend(arm, k, passive, seq, stack, best, best_sym);
        seq.pop();
        stack.pop();
    }
}

fn rho_entry(instance: &Instance, k: usize) -> RhoEntry {
    let (types, reps) = instance.arm_types();
    let per_type: Vec<(Witness, f64)> = reps.iter().map(|&r| arm_minimum(&instance.arms[r], r, k)).collect();
    let witnesses: Vec<Witness> = types
        .iter()
        .enumerate()
        .map(|(n, &t)| Witness { arm: n, ..per_type[t].0.clone() })
        .collect();
    let rho = per_type.iter().map(|(w, _)| w.overlap).fold(f64::INFINITY, f64::min);
    let rho_symmetric = per_type.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
    RhoEntry { k, rho: rho.clamp(0.0, 1.0), rho_symmetric: rho_symmetric.clamp(0.0, 1.0), witnesses }
}

/// Exact `ρ_k`: the smallest probability, over arms, start pairs and action
/// sequences, that a chain playing the sequence and a passive chain can be
/// coupled to the same state after `k` steps.
pub fn ergodicity_coefficient(instance: &Instance, k: usize) -> Result<f64> {
    check_k(k, false)?;
    Ok(rho_entry(instance, k).rho)
}

/// `ρ_1, …, ρ_{k_max}` with witnesses.
pub fn ergodicity_report(instance: &Instance, k_max: usize, force: bool) -> Result<ErgodicityReport> {
    check_k(k_max, force)?;
    let entries: Vec<RhoEntry> = (1..=k_max).map(|k| rho_entry(instance, k)).collect();
    let first_positive = entries.iter().find(|e| e.rho > 0.0).map(|e| e.k);
    Ok(ErgodicityReport { entries, first_positive })
}

/// Recomputes the overlap of a witness from scratch.
pub fn witness_overlap(instance: &Instance, witness: &Witness) -> Result<f64> {
    let arm = instance
        .arms
        .get(witness.arm)
        .ok_or_else(|| Error::InvalidArgument(format!("witness arm {} out of range", witness.arm)))?;
    let n = arm.num_states();
    if witness.s >= n || witness.s_prime >= n || witness.actions.iter().any(|&a| a > 1) {
        return Err(Error::InvalidArgument("witness does not fit the arm".into()));
    }
    let row = &k_step_rows(arm, &witness.actions)[witness.s];
    let base = &k_step_rows(arm, &vec![0u8; witness.actions.len()])[witness.s_prime];
    Ok(overlap(row, base))
}

/// Multiplier bound `(k/ρ_k)(1 + αk/ρ_k)`.
pub fn mu_bound(k: usize, rho: f64, alpha: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("ρ_k = {rho} must be positive")));
    }
    let r = k as f64 / rho;
    Ok(r * (1.0 + alpha * r))
}

/// Lipschitz constant of the horizon-`t` value in one arm's component:
/// `‖μ‖∞ + (1 + k/ρ_k) Σ_{l=1}^{t} (1 − ρ_k/k)^{l−1}`, to be divided by `N`.
pub fn value_lipschitz_constant(mu_inf: f64, k: usize, rho: f64, t: usize) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("ρ_k = {rho} must be positive")));
    }
    let q = 1.0 - rho / k as f64;
    let geometric: f64 = (0..t).map(|l| q.powi(l as i32)).sum();
    Ok(mu_inf + (1.0 + k as f64 / rho) * geometric)
}

/// Lipschitz constant of the bias function: `‖μ‖∞ + (1 + k/ρ_k)(k/ρ_k)`.
pub fn bias_lipschitz_constant(mu_inf: f64, k: usize, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("ρ_k = {rho} must be positive")));
    }
    let r = k as f64 / rho;
    Ok(mu_inf + (1.0 + r) * r)
}

/// Terms of the finite-`N` performance guarantee of the LP-update policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremBound {
    pub epsilon: f64,
    pub tau: usize,
    pub k: usize,
    pub rho: f64,
    pub mu_inf: f64,
    pub num_arms: usize,
    pub alpha: f64,
    /// `τ((1+k/ρ)(k/ρ) + 2‖μ‖∞ + 1)√(log(Nτ²)/N)`.
    pub concentration: f64,
    /// `(2‖μ‖∞ + 1 + τ)(αN − ⌊αN⌋)/N`.
    pub rounding: f64,
    /// `ε + concentration + rounding`.
    pub gap: f64,
    /// Same gap with `‖μ‖∞` replaced by its a priori bound.
    pub gap_a_priori: f64,
}

impl TheoremBound {
    /// The bound says nothing when it is at least the gain.
    pub fn is_vacuous(&self, g_star: f64) -> bool {
        self.gap >= g_star
    }
}

fn gap_terms(tau: usize, k: usize, rho: f64, mu_inf: f64, num_arms: usize, alpha: f64) -> (f64, f64) {
    let n = num_arms as f64;
    let t = tau as f64;
    let r = k as f64 / rho;
    let log = (n * t * t).ln().max(0.0);
    let concentration = t * ((1.0 + r) * r + 2.0 * mu_inf + 1.0) * (log / n).sqrt();
    let budget = alpha * n;
    let frac = budget - (budget + 1e-9).floor();
    let rounding = (2.0 * mu_inf + 1.0 + t) * frac.max(0.0) / n;
    (concentration, rounding)
}

pub fn theorem_bound(
    epsilon: f64,
    tau: usize,
    k: usize,
    rho: f64,
    mu_inf: f64,
    num_arms: usize,
    alpha: f64,
) -> Result<TheoremBound> {
    if epsilon < 0.0 || tau == 0 || k == 0 || !(rho > 0.0) || mu_inf < 0.0 || num_arms == 0 || !(alpha > 0.0) {
        return Err(Error::InvalidArgument(
            "theorem bound needs ε ≥ 0, τ, k, N ≥ 1, ρ_k > 0, ‖μ‖∞ ≥ 0 and α > 0".into(),
        ));
    }
    let (concentration, rounding) = gap_terms(tau, k, rho, mu_inf, num_arms, alpha);
    let mu_prior = mu_bound(k, rho, alpha)?;
    let (c2, r2) = gap_terms(tau, k, rho, mu_prior, num_arms, alpha);
    Ok(TheoremBound {
        epsilon,
        tau,
        k,
        rho,
        mu_inf,
        num_arms,
        alpha,
        concentration,
        rounding,
        gap: epsilon + concentration + rounding,
        gap_a_priori: epsilon + c2 + r2,
    })
}

/// Monte-Carlo estimate of `V_t(x) − E[V_t(X)]`, `X` drawn arm by arm from `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenEstimate {
    pub gap: f64,
    /// 95% half-width of the sampled mean.
    pub ci95: f64,
    pub fluid_value: f64,
    pub samples: usize,
}

pub fn jensen_gap(
    instance: &Instance,
    fixed_point: &FixedPoint,
    x: &ProductDistribution,
    t: usize,
    samples: usize,
    seed: u64,
) -> Result<JensenEstimate> {
    x.validate(instance)?;
    if samples < 2 {
        return Err(Error::InvalidArgument("the Jensen estimate needs at least two samples".into()));
    }
    if t == 0 {
        // V_0 is linear in x.
        return Ok(JensenEstimate { gap: 0.0, ci95: 0.0, fluid_value: x.inner(&fixed_point.mu), samples: 0 });
    }
    let fluid_value = plan(instance, x, t, &fixed_point.mu)?.value;
    if x.as_joint_state().is_some() {
        return Ok(JensenEstimate { gap: 0.0, ci95: 0.0, fluid_value, samples: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let state: Vec<usize> = x.x.iter().map(|xn| sample_index(xn, &mut rng)).collect();
        let point = one_hot(&state, instance)?;
        values.push(plan(instance, &point, t, &fixed_point.mu)?.value);
    }
    let (mean, ci95) = mean_ci95(&values);
    Ok(JensenEstimate { gap: fluid_value - mean, ci95, fluid_value, samples })
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        last = i;
        cum += pi;
        if u < cum {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceResult {
    /// Optimal long-run average reward of the joint MDP.
    pub value: f64,
    /// Final span of `Tv − v`.
    pub span: f64,
    pub iterations: usize,
    pub joint_states: usize,
    pub joint_actions: usize,
}

/// Feasible joint actions as bit masks over arms.
fn feasible_masks(instance: &Instance) -> Vec<u64> {
    let n = instance.num_arms();
    let cap = instance.max_pulls();
    (0u64..1 << n)
        .filter(|m| {
            let c = m.count_ones() as usize;
            match instance.budget_mode {
                BudgetMode::AtMost => c <= cap,
                BudgetMode::Exactly => c == cap,
            }
        })
        .collect()
}

/// Optimal average reward of the exact joint MDP by relative value iteration
/// with an aperiodicity transform, stopped when the span of `Tv − v` is
/// below `tol`.
pub fn brute_force_optimal(instance: &Instance, tol: f64, max_iter: usize) -> Result<BruteForceResult> {
    let n = instance.num_arms();
    let joint = instance.joint_state_count();
    if n > 30 || joint > BRUTE_FORCE_STATE_CAP {
        return Err(Error::TooLarge(format!(
            "joint state space of size {joint} exceeds the cap {BRUTE_FORCE_STATE_CAP}"
        )));
    }
    let masks = feasible_masks(instance);
    if masks.is_empty() {
        return Err(Error::InvalidModel("no feasible joint action".into()));
    }
    if masks.len() > BRUTE_FORCE_ACTION_CAP {
        return Err(Error::TooLarge(format!("{} joint actions exceed the cap", masks.len())));
    }
    // Mixed radix with arm 0 varying fastest.
    let sizes: Vec<usize> = instance.arms.iter().map(|a| a.num_states()).collect();
    let mut strides = vec![1usize; n];
    for i in 1..n {
        strides[i] = strides[i - 1] * sizes[i - 1];
    }
    let decode = |j: usize, i: usize| (j / strides[i]) % sizes[i];
    let rewards: Vec<Vec<f64>> = masks
        .iter()
        .map(|&m| {
            (0..joint)
                .map(|j| {
                    let total: f64 = (0..n)
                        .map(|i| instance.arms[i].reward(decode(j, i), usize::from(m >> i & 1 == 1)))
                        .sum();
                    total / n as f64
                })
                .collect()
        })
        .collect();

    const DELTA: f64 = 0.5;
    let mut v = vec![0.0; joint];
    let mut buf = vec![0.0; joint];
    let mut tmp = vec![0.0; joint];
    let mut tv = vec![0.0; joint];
    let mut span = f64::INFINITY;
    let mut gain = 0.0;
    for iter in 1..=max_iter {
        tv.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
        for (&m, r) in masks.iter().zip(&rewards) {
            // E[v(S') | S = j, A = m] by one mode product per arm.
            buf.copy_from_slice(&v);
            for i in 0..n {
                let a = usize::from(m >> i & 1 == 1);
                let arm = &instance.arms[i];
                for (j, out) in tmp.iter_mut().enumerate() {
                    let si = decode(j, i);
                    let base = j - si * strides[i];
                    *out = arm.row(a, si).iter().enumerate().map(|(t, p)| p * buf[base + t * strides[i]]).sum();
                }
                std::mem::swap(&mut buf, &mut tmp);
            }
            for j in 0..joint {
                let q = r[j] + DELTA * buf[j] + (1.0 - DELTA) * v[j];
                if q > tv[j] {
                    tv[j] = q;
                }
            }
        }
        let (lo, hi) = tv
            .iter()
            .zip(&v)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a - b), hi.max(a - b)));
        span = hi - lo;
        gain = 0.5 * (lo + hi);
        let anchor = tv[0];
        for (x, t) in v.iter_mut().zip(&tv) {
            *x = t - anchor;
        }
        if span < tol {
            return Ok(BruteForceResult { value: gain, span, iterations: iter, joint_states: joint, joint_actions: masks.len() });
        }
    }
    log::warn!("joint value iteration stopped at span {span:.3e}");
    Err(Error::NumericalFailure(format!(
        "joint value iteration did not reach span {tol:.1e} in {max_iter} sweeps (span {span:.3e}, gain ≈ {gain})"
    )))
}
