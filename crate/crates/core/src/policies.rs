//! Policies mapping joint states to budget-feasible joint actions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::{priority_index_table, FixedPoint, PriorityIndexTable};
use crate::horizon::{plan_with, PlanOptions};
use crate::model::{one_hot, validate_state, BudgetMode, Instance};
use crate::rounding::{self, RoundingMode};

/// A stateful decision rule. `reset` is called at the start of every trajectory.
pub trait Policy {
    fn label(&self) -> String;

    fn decide(&mut self, state: &[usize], rng: &mut dyn RngCore) -> Result<Vec<bool>>;

    fn reset(&mut self) {}
}

/// Checks that `actions` pulls a number of arms allowed by the budget mode.
pub fn check_budget(instance: &Instance, actions: &[bool]) -> Result<()> {
    let pulls = actions.iter().filter(|&&a| a).count();
    let max = instance.max_pulls();
    let ok = match instance.budget_mode {
        BudgetMode::AtMost => pulls <= max,
        BudgetMode::Exactly => pulls == max,
    };
    if actions.len() != instance.num_arms() || !ok {
        return Err(Error::InvalidArgument(format!(
            "action pulls {pulls} of {} arms; budget allows {max} ({:?})",
            actions.len(),
            instance.budget_mode
        )));
    }
    Ok(())
}

/// Tops up an action to exactly `target` pulls, preferring larger `score`, then lower id.
fn fill_to(actions: &mut [bool], target: usize, score: impl Fn(usize) -> f64) {
    let mut count = actions.iter().filter(|&&a| a).count();
    if count >= target {
        return;
    }
    let mut idle: Vec<usize> = (0..actions.len()).filter(|&n| !actions[n]).collect();
    idle.sort_by(|&i, &j| score(j).total_cmp(&score(i)).then(i.cmp(&j)));
    for n in idle {
        if count == target {
            break;
        }
        actions[n] = true;
        count += 1;
    }
}

/// Re-solves the τ-horizon LP from the current state at every step and
/// rounds its first-step pull probabilities.
pub struct LpUpdatePolicy {
    instance: Instance,
    mu: Vec<Vec<f64>>,
    tau: usize,
    rounding: RoundingMode,
    options: PlanOptions,
    cache: Option<HashMap<Vec<usize>, Vec<f64>>>,
}

pub fn lp_update_policy(instance: &Instance, fixed_point: &FixedPoint, tau: usize, rounding: RoundingMode) -> Result<LpUpdatePolicy> {
    if tau == 0 {
        return Err(Error::InvalidArgument("LP-update needs τ ≥ 1".into()));
    }
    Ok(LpUpdatePolicy {
        instance: instance.clone(),
        mu: fixed_point.mu.clone(),
        tau,
        rounding,
        options: PlanOptions::default(),
        cache: None,
    })
}

impl LpUpdatePolicy {
    pub fn with_plan_options(mut self, options: PlanOptions) -> Self {
        self.options = options;
        self
    }

    /// Memoizes first-step profiles by joint state. Plans are deterministic,
    /// so this changes running time only.
    pub fn with_cache(mut self) -> Self {
        self.cache = Some(HashMap::new());
        self
    }

    /// First-step pull probabilities of the plan from `state`.
    pub fn profile(&mut self, state: &[usize]) -> Result<Vec<f64>> {
        if let Some(p) = self.cache.as_ref().and_then(|c| c.get(state)) {
            return Ok(p.clone());
        }
        let x = one_hot(state, &self.instance)?;
        let plan = plan_with(&self.instance, &x, self.tau, &self.mu, self.options)?;
        let mut p = plan.first_step_profile(state);
        let cap = self.instance.budget();
        let sum: f64 = p.iter().sum();
        if sum > cap {
            for v in &mut p {
                *v *= cap / sum;
            }
        }
        if let Some(c) = self.cache.as_mut() {
            c.insert(state.to_vec(), p.clone());
        }
        Ok(p)
    }
}

impl Policy for LpUpdatePolicy {
    fn label(&self) -> String {
        format!("lp-update-{}", self.tau)
    }

    fn decide(&mut self, state: &[usize], rng: &mut dyn RngCore) -> Result<Vec<bool>> {
        let p = self.profile(state)?;
        let mut actions = rounding::round(self.rounding, &p, self.instance.budget(), rng)?;
        if self.instance.budget_mode == BudgetMode::Exactly {
            fill_to(&mut actions, self.instance.max_pulls(), |n| p[n]);
        }
        Ok(actions)
    }
}

/// Static priority rule: pull the `⌊αN⌋` arms with the largest index `ω(s_n)`.
pub struct LpPriorityPolicy {
    table: PriorityIndexTable,
    max_pulls: usize,
    mode: BudgetMode,
}

pub fn lp_priority_policy(instance: &Instance, table: PriorityIndexTable) -> LpPriorityPolicy {
    LpPriorityPolicy { table, max_pulls: instance.max_pulls(), mode: instance.budget_mode }
}

impl LpPriorityPolicy {
    pub fn from_fixed_point(instance: &Instance, fixed_point: &FixedPoint) -> Self {
        lp_priority_policy(instance, priority_index_table(instance, fixed_point))
    }

    /// Deterministic pull set for `state`.
    pub fn select(&self, state: &[usize]) -> Vec<bool> {
        let mut order: Vec<usize> = (0..state.len()).collect();
        let w = |n: usize| self.table.index(n, state[n]);
        order.sort_by(|&i, &j| w(j).total_cmp(&w(i)).then(i.cmp(&j)));
        let mut actions = vec![false; state.len()];
        for &n in order.iter().take(self.max_pulls) {
            if self.mode == BudgetMode::Exactly || w(n) >= -1e-9 {
                actions[n] = true;
            }
        }
        actions
    }
}

impl Policy for LpPriorityPolicy {
    fn label(&self) -> String {
        "lp-priority".into()
    }

    fn decide(&mut self, state: &[usize], _rng: &mut dyn RngCore) -> Result<Vec<bool>> {
        Ok(self.select(state))
    }
}

/// Best-effort priority-reassignment baseline.
///
/// Each arm samples the action of its own stationary randomized policy (from
/// the fixed point; states without stationary mass use the sign of the
/// priority index). Pull requests are granted in a persistent arm order while
/// budget remains; arms whose request was denied move to the front of the
/// order, keeping their relative order.
pub struct IdReassignPolicy {
    pull_prob: Vec<Vec<f64>>,
    order: Vec<usize>,
    max_pulls: usize,
    mode: BudgetMode,
}

pub fn id_reassignment_policy(instance: &Instance, fixed_point: &FixedPoint) -> IdReassignPolicy {
    let table = priority_index_table(instance, fixed_point);
    let pull_prob = instance
        .arms
        .iter()
        .enumerate()
        .map(|(n, arm)| {
            (0..arm.num_states())
                .map(|s| {
                    fixed_point
                        .pull_probability(n, s)
                        .unwrap_or(if table.index(n, s) > 0.0 { 1.0 } else { 0.0 })
                })
                .collect()
        })
        .collect();
    IdReassignPolicy {
        pull_prob,
        order: (0..instance.num_arms()).collect(),
        max_pulls: instance.max_pulls(),
        mode: instance.budget_mode,
    }
}

impl Policy for IdReassignPolicy {
    fn label(&self) -> String {
        "id-reassign".into()
    }

    fn reset(&mut self) {
        self.order = (0..self.order.len()).collect();
    }

    fn decide(&mut self, state: &[usize], rng: &mut dyn RngCore) -> Result<Vec<bool>> {
        let wants: Vec<bool> = state
            .iter()
            .enumerate()
            .map(|(n, &s)| rng.random::<f64>() < self.pull_prob[n][s])
            .collect();
        let mut actions = vec![false; state.len()];
        let mut used = 0;
        let mut denied = Vec::new();
        let mut rest = Vec::with_capacity(state.len());
        for &n in &self.order {
            if wants[n] && used < self.max_pulls {
                actions[n] = true;
                used += 1;
                rest.push(n);
            } else if wants[n] {
                denied.push(n);
            } else {
                rest.push(n);
            }
        }
        if self.mode == BudgetMode::Exactly {
            for &n in denied.iter().chain(&self.order) {
                if used == self.max_pulls {
                    break;
                }
                if !actions[n] {
                    actions[n] = true;
                    used += 1;
                }
            }
        }
        denied.extend(rest);
        self.order = denied;
        Ok(actions)
    }
}

/// Pulls a uniformly random `⌊αN⌋`-subset.
pub struct RandomPolicy {
    num_arms: usize,
    max_pulls: usize,
}

pub fn random_feasible_policy(instance: &Instance) -> RandomPolicy {
    RandomPolicy { num_arms: instance.num_arms(), max_pulls: instance.max_pulls() }
}

impl Policy for RandomPolicy {
    fn label(&self) -> String {
        "random".into()
    }

    fn decide(&mut self, state: &[usize], rng: &mut dyn RngCore) -> Result<Vec<bool>> {
        let mut actions = vec![false; state.len()];
        for n in index::sample(rng, self.num_arms, self.max_pulls) {
            actions[n] = true;
        }
        Ok(actions)
    }
}

/// Policy selector used by experiment configs and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    LpUpdate { tau: usize },
    LpPriority,
    IdReassign,
    Random,
}

impl PolicyKind {
    pub fn build(
        &self,
        instance: &Instance,
        fixed_point: &FixedPoint,
        rounding: RoundingMode,
    ) -> Result<Box<dyn Policy>> {
        Ok(match *self {
            PolicyKind::LpUpdate { tau } => Box::new(lp_update_policy(instance, fixed_point, tau, rounding)?),
            PolicyKind::LpPriority => Box::new(LpPriorityPolicy::from_fixed_point(instance, fixed_point)),
            PolicyKind::IdReassign => Box::new(id_reassignment_policy(instance, fixed_point)),
            PolicyKind::Random => Box::new(random_feasible_policy(instance)),
        })
    }

    pub fn tau(&self) -> Option<usize> {
        match self {
            PolicyKind::LpUpdate { tau } => Some(*tau),
            _ => None,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::LpUpdate { tau } => write!(f, "lp-update-{tau}"),
            PolicyKind::LpPriority => f.write_str("lp-priority"),
            PolicyKind::IdReassign => f.write_str("id-reassign"),
            PolicyKind::Random => f.write_str("random"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    /// Accepts `lp-update-<τ>`, `lp-priority`, `id-reassign` and `random`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lp-priority" => Ok(PolicyKind::LpPriority),
            "id-reassign" => Ok(PolicyKind::IdReassign),
            "random" => Ok(PolicyKind::Random),
            _ => s
                .strip_prefix("lp-update-")
                .and_then(|t| t.parse().ok())
                .filter(|&tau| tau >= 1)
                .map(|tau| PolicyKind::LpUpdate { tau })
                .ok_or_else(|| Error::InvalidArgument(format!("unknown policy `{s}`"))),
        }
    }
}

impl Serialize for PolicyKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Validates the state, asks the policy and checks the budget.
pub fn decide_checked(policy: &mut dyn Policy, instance: &Instance, state: &[usize], rng: &mut dyn RngCore) -> Result<Vec<bool>> {
    validate_state(state, instance)?;
    let actions = policy.decide(state, rng)?;
    check_budget(instance, &actions)?;
    Ok(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed_point::solve_fixed_point;
    use crate::model::{random_instance, yan_instance, ArmModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn policy_names_round_trip() {
        for s in ["lp-update-4", "lp-priority", "id-reassign", "random"] {
            assert_eq!(s.parse::<PolicyKind>().unwrap().to_string(), s);
        }
        assert!("lp-update-0".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn identical_arms_break_ties_by_id() {
        let inst = yan_instance(3).with_alpha(1.0 / 3.0);
        let fp = solve_fixed_point(&inst).unwrap();
        let p = LpPriorityPolicy::from_fixed_point(&inst.with_budget_mode(BudgetMode::Exactly), &fp);
        assert_eq!(p.select(&[1, 1, 1]), vec![true, false, false]);
    }

    #[test]
    fn at_most_skips_negative_indices() {
        // Pulling costs reward, so every index is negative.
        let arm = ArmModel::new(0, vec![vec![1.0]], vec![vec![1.0]], vec![1.0], vec![0.0]).unwrap();
        let inst = Instance::new(vec![arm; 4], 0.5, BudgetMode::AtMost).unwrap();
        let fp = solve_fixed_point(&inst).unwrap();
        let at_most = LpPriorityPolicy::from_fixed_point(&inst, &fp);
        assert_eq!(at_most.select(&[0; 4]).iter().filter(|&&a| a).count(), 0);
        let exact_inst = inst.with_budget_mode(BudgetMode::Exactly);
        let exact = LpPriorityPolicy::from_fixed_point(&exact_inst, &solve_fixed_point(&exact_inst).unwrap());
        assert_eq!(exact.select(&[0; 4]), vec![true, true, false, false]);
    }

    #[test]
    fn every_policy_respects_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [BudgetMode::AtMost, BudgetMode::Exactly] {
            let inst = random_instance(8, 5, 4).with_budget_mode(mode);
            let fp = solve_fixed_point(&inst).unwrap();
            for kind in [PolicyKind::LpUpdate { tau: 2 }, PolicyKind::LpPriority, PolicyKind::IdReassign, PolicyKind::Random] {
                let mut policy = kind.build(&inst, &fp, RoundingMode::Randomized).unwrap();
                for _ in 0..20 {
                    let state: Vec<usize> = inst.arms.iter().map(|a| rng.random_range(0..a.num_states())).collect();
                    decide_checked(policy.as_mut(), &inst, &state, &mut rng).unwrap();
                }
            }
        }
    }

    #[test]
    fn full_budget_random_pulls_everything() {
        let inst = random_instance(1, 3, 3).with_alpha(1.0);
        let mut p = random_feasible_policy(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.decide(&[0, 0, 0], &mut rng).unwrap(), vec![true; 3]);
        let none = random_instance(1, 3, 3).with_alpha(0.0);
        assert_eq!(random_feasible_policy(&none).decide(&[0, 0, 0], &mut rng).unwrap(), vec![false; 3]);
    }
}
