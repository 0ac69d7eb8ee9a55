//! Weakly coupled MDPs: arms with any number of actions, coupled by `E` cost
//! budgets. Restless bandits embed as two actions with cost `1{a = 1}`.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, LpProblem, LpStatus};
use crate::model::{BudgetMode, Instance};
use crate::rounding::round_wmdp;
use crate::simulator::{replicate_rngs, TrajectoryRecord};

const ROW_TOL: f64 = 1e-12;
/// Action sequences enumerated by [`wmdp_ergodicity`] without `force`.
pub const SEQUENCE_CAP: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct WmdpArm {
    num_states: usize,
    /// Row-major kernel per action.
    kernels: Vec<Vec<f64>>,
    /// `rewards[a][s]`.
    rewards: Vec<Vec<f64>>,
}

impl WmdpArm {
    /// `p[a][s][t]` and `r[a][s]`.
    pub fn new(p: Vec<Vec<Vec<f64>>>, r: Vec<Vec<f64>>) -> Result<Self> {
        let actions = p.len();
        if actions == 0 || r.len() != actions {
            return Err(Error::InvalidModel("an arm needs at least one action and one reward row per action".into()));
        }
        let k = p[0].len();
        if k == 0 {
            return Err(Error::InvalidModel("an arm needs at least one state".into()));
        }
        let mut kernels = Vec::with_capacity(actions);
        for (a, (pa, ra)) in p.into_iter().zip(&r).enumerate() {
            if pa.len() != k || pa.iter().any(|row| row.len() != k) || ra.len() != k {
                return Err(Error::InvalidModel(format!("action {a} dimensions disagree with {k} states")));
            }
            for (s, row) in pa.iter().enumerate() {
                if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidModel(format!("row-stochasticity action {a} row {s}")));
                }
            }
            if ra.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidModel(format!("reward outside [0, 1] action {a}")));
            }
            let mut flat = Vec::with_capacity(k * k);
            for row in pa {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    flat.extend(row.into_iter().map(|v| v / sum));
                } else {
                    flat.extend(row);
                }
            }
            kernels.push(flat);
        }
        Ok(WmdpArm { num_states: k, kernels, rewards: r })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.kernels.len()
    }

    pub fn row(&self, a: usize, s: usize) -> &[f64] {
        let n = self.num_states;
        &self.kernels[a][s * n..(s + 1) * n]
    }

    pub fn prob(&self, a: usize, s: usize, t: usize) -> f64 {
        self.kernels[a][s * self.num_states + t]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[a][s]
    }

    pub fn expect(&self, a: usize, s: usize, v: &[f64]) -> f64 {
        self.row(a, s).iter().zip(v).map(|(p, x)| p * x).sum()
    }

    /// Accumulates `w · P_a` into `out`.
    pub fn push_forward(&self, a: usize, w: &[f64], out: &mut [f64]) {
        for (s, &ws) in w.iter().enumerate() {
            if ws != 0.0 {
                for (o, p) in out.iter_mut().zip(self.row(a, s)) {
                    *o += ws * p;
                }
            }
        }
    }
}

/// Arms coupled by `Σ_n c^{n,e}(s_n, a_n) ≤ N b^e` for every constraint `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct WmdpInstance {
    pub arms: Vec<WmdpArm>,
    /// `costs[n][e][s][a]`.
    pub costs: Vec<Vec<Vec<Vec<f64>>>>,
    pub budgets: Vec<f64>,
    pub cost_bound: f64,
}

impl WmdpInstance {
    pub fn new(arms: Vec<WmdpArm>, costs: Vec<Vec<Vec<Vec<f64>>>>, budgets: Vec<f64>) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::InvalidModel("instance has no arms".into()));
        }
        let actions = arms[0].num_actions();
        if arms.iter().any(|a| a.num_actions() != actions) {
            return Err(Error::InvalidModel("all arms must share the action set".into()));
        }
        if costs.len() != arms.len() {
            return Err(Error::InvalidModel("one cost tensor per arm is required".into()));
        }
        if budgets.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::InvalidModel("budgets must be positive".into()));
        }
        let mut cost_bound: f64 = 0.0;
        for (n, (c, arm)) in costs.iter().zip(&arms).enumerate() {
            if c.len() != budgets.len() {
                return Err(Error::InvalidModel(format!("arm {n} has {} cost constraints, expected {}", c.len(), budgets.len())));
            }
            for ce in c {
                if ce.len() != arm.num_states() || ce.iter().any(|row| row.len() != actions) {
                    return Err(Error::InvalidModel(format!("cost dimensions of arm {n} disagree with the arm")));
                }
                for v in ce.iter().flatten() {
                    if !v.is_finite() || *v < 0.0 {
                        return Err(Error::InvalidModel(format!("negative or non-finite cost on arm {n}")));
                    }
                    cost_bound = cost_bound.max(*v);
                }
            }
        }
        Ok(WmdpInstance { arms, costs, budgets, cost_bound })
    }

    /// The restless bandit as a two-action WMDP with the single cost `1{a = 1}`
    /// and budget `α`. The embedding is the at-most budget.
    pub fn from_rmab(instance: &Instance) -> Result<Self> {
        if instance.budget_mode == BudgetMode::Exactly {
            return Err(Error::InvalidArgument("only the at-most budget embeds as a cost constraint".into()));
        }
        let arms = instance
            .arms
            .iter()
            .map(|arm| {
                let k = arm.num_states();
                let p = (0..2).map(|a| (0..k).map(|s| arm.row(a, s).to_vec()).collect()).collect();
                let r = (0..2).map(|a| arm.rewards(a).to_vec()).collect();
                WmdpArm::new(p, r)
            })
            .collect::<Result<Vec<_>>>()?;
        let costs = instance.arms.iter().map(|arm| vec![vec![vec![0.0, 1.0]; arm.num_states()]]).collect();
        WmdpInstance::new(arms, costs, vec![instance.alpha])
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn num_actions(&self) -> usize {
        self.arms[0].num_actions()
    }

    pub fn num_constraints(&self) -> usize {
        self.budgets.len()
    }

    /// `N b^e`.
    pub fn capacity(&self, e: usize) -> f64 {
        self.budgets[e] * self.arms.len() as f64
    }

    pub fn cost(&self, n: usize, e: usize, s: usize, a: usize) -> f64 {
        self.costs[n][e][s][a]
    }

    /// Per-constraint total cost of a joint state-action pair.
    pub fn load(&self, state: &[usize], actions: &[usize]) -> Vec<f64> {
        (0..self.num_constraints())
            .map(|e| state.iter().zip(actions).enumerate().map(|(n, (&s, &a))| self.cost(n, e, s, a)).sum())
            .collect()
    }

    pub fn is_feasible(&self, state: &[usize], actions: &[usize]) -> bool {
        self.load(state, actions).iter().enumerate().all(|(e, &l)| l <= self.capacity(e) + 1e-9)
    }

    /// Groups arms with identical kernels, rewards and costs.
    pub fn arm_types(&self) -> (Vec<usize>, Vec<usize>) {
        let mut reps: Vec<usize> = Vec::new();
        let mut types = Vec::with_capacity(self.arms.len());
        for n in 0..self.arms.len() {
            let same = |&r: &usize| self.arms[r] == self.arms[n] && self.costs[r] == self.costs[n];
            match reps.iter().position(same) {
                Some(k) => types.push(k),
                None => {
                    types.push(reps.len());
                    reps.push(n);
                }
            }
        }
        (types, reps)
    }

    fn validate_state(&self, state: &[usize]) -> Result<()> {
        if state.len() != self.num_arms() || state.iter().zip(&self.arms).any(|(&s, a)| s >= a.num_states()) {
            return Err(Error::InvalidArgument("state does not match the instance".into()));
        }
        Ok(())
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let file: WmdpFile = serde_json::from_str(json)?;
        file.into_instance()
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        WmdpInstance::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// On-disk format: the bandit arm schema with per-action `P`/`r` lists (or
/// `P0`/`P1`/`r0`/`r1` for two actions), plus `actions`, `costs` and `budgets`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WmdpFile {
    pub actions: usize,
    pub arms: Vec<WmdpRawArm>,
    pub costs: Vec<Vec<Vec<Vec<f64>>>>,
    pub budgets: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WmdpRawArm {
    pub states: usize,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(rename = "P0", default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<Vec<f64>>>,
    #[serde(rename = "P1", default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<Vec<f64>>,
}

impl WmdpFile {
    pub fn into_instance(self) -> Result<WmdpInstance> {
        let arms = self
            .arms
            .into_iter()
            .enumerate()
            .map(|(n, raw)| {
                let (p, r) = match (raw.p, raw.r, raw.p0, raw.p1, raw.r0, raw.r1) {
                    (Some(p), Some(r), None, None, None, None) => (p, r),
                    (None, None, Some(p0), Some(p1), Some(r0), Some(r1)) => (vec![p0, p1], vec![r0, r1]),
                    _ => return Err(Error::InvalidModel(format!("arm {n}: give either P and r or P0, P1, r0 and r1"))),
                };
                if p.len() != self.actions || p.first().map_or(true, |m| m.len() != raw.states) {
                    return Err(Error::InvalidModel(format!("arm {n}: dimensions disagree with actions and states")));
                }
                WmdpArm::new(p, r)
            })
            .collect::<Result<Vec<_>>>()?;
        WmdpInstance::new(arms, self.costs, self.budgets)
    }
}

/// The lowest-numbered action whose cost is pointwise minimal over every
/// arm, constraint and state. Such an action can always replace another
/// without breaking a budget; this is a sufficient check, not a
/// characterization.
pub fn find_feasible_action(instance: &WmdpInstance) -> Option<usize> {
    (0..instance.num_actions()).find(|&a_star| {
        instance.costs.iter().flatten().flatten().all(|row| row.iter().all(|&c| row[a_star] <= c))
    })
}

/// `ρ_k` with sequences over all actions and the comparison chain playing `a*`.
pub fn wmdp_ergodicity(instance: &WmdpInstance, a_star: usize, k: usize, force: bool) -> Result<f64> {
    let actions = instance.num_actions();
    if a_star >= actions || k == 0 {
        return Err(Error::InvalidArgument("need a valid a* and k ≥ 1".into()));
    }
    let count = (actions as f64).powi(k as i32);
    if count > SEQUENCE_CAP as f64 && !force {
        return Err(Error::TooLarge(format!("{actions}^{k} action sequences exceed the cap {SEQUENCE_CAP}")));
    }
    let (_, reps) = instance.arm_types();
    let mut rho = f64::INFINITY;
    for &r in &reps {
        let arm = &instance.arms[r];
        let n = arm.num_states();
        let unit = |s: usize| {
            let mut v = vec![0.0; n];
            v[s] = 1.0;
            v
        };
        let base: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let mut v = unit(s);
                for _ in 0..k {
                    let mut next = vec![0.0; n];
                    arm.push_forward(a_star, &v, &mut next);
                    v = next;
                }
                v
            })
            .collect();
        let mut stack = vec![(0..n).map(unit).collect::<Vec<_>>()];
        let mut choice = vec![0usize];
        // Iterative depth-first enumeration of A^k.
        while let Some(&a) = choice.last() {
            if a == actions {
                choice.pop();
                stack.pop();
                if let Some(c) = choice.last_mut() {
                    *c += 1;
                }
                continue;
            }
            let next: Vec<Vec<f64>> = stack
                .last()
                .expect("one prefix per open level")
                .iter()
                .map(|v| {
                    let mut out = vec![0.0; n];
                    arm.push_forward(a, v, &mut out);
                    out
                })
                .collect();
            if choice.len() == k {
                for row in &next {
                    for b in &base {
                        let v: f64 = row.iter().zip(b).map(|(x, y)| x.min(*y)).sum();
                        rho = rho.min(v);
                    }
                }
                *choice.last_mut().expect("nonempty") += 1;
            } else {
                stack.push(next);
                choice.push(0);
            }
        }
    }
    Ok(rho.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmdpFixedPoint {
    pub gain: f64,
    /// `y_star[n][s][a]`.
    pub y_star: Vec<Vec<Vec<f64>>>,
    /// Stationarity multipliers, shifted so each arm's minimum is 0.
    pub mu: Vec<Vec<f64>>,
    /// One dual per cost constraint, in reward units per unit cost.
    pub budget_duals: Vec<f64>,
}

impl WmdpFixedPoint {
    pub fn mu_sup_norm(&self) -> f64 {
        self.mu.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn lp_optimal(sol: &lp::LpSolution) -> Result<()> {
    match sol.status {
        LpStatus::Optimal => Ok(()),
        LpStatus::Infeasible => Err(Error::Infeasible),
        LpStatus::Unbounded => Err(Error::Unbounded),
    }
}

/// Stationary relaxation with one averaged constraint per cost.
pub fn wmdp_fixed_point(instance: &WmdpInstance) -> Result<WmdpFixedPoint> {
    let na = instance.num_actions();
    let (types, reps) = instance.arm_types();
    let mut count = vec![0usize; reps.len()];
    for &k in &types {
        count[k] += 1;
    }
    let mut offset = Vec::with_capacity(reps.len());
    let mut nvars = 0;
    for &r in &reps {
        offset.push(nvars);
        nvars += na * instance.arms[r].num_states();
    }
    let var = |k: usize, s: usize, a: usize| offset[k] + na * s + a;

    let mut lp = LpProblem::new(nvars);
    let mut stationarity_rows = Vec::with_capacity(reps.len());
    for (k, &r) in reps.iter().enumerate() {
        let arm = &instance.arms[r];
        let ns = arm.num_states();
        for s in 0..ns {
            for a in 0..na {
                lp.set_objective(var(k, s, a), arm.reward(s, a));
            }
        }
        let first = lp.num_eq();
        for t in 0..ns {
            let mut coeffs: Vec<(usize, f64)> = (0..na).map(|a| (var(k, t, a), 1.0)).collect();
            for s in 0..ns {
                for a in 0..na {
                    let p = arm.prob(a, s, t);
                    if p != 0.0 {
                        coeffs.push((var(k, s, a), -p));
                    }
                }
            }
            lp.add_eq(coeffs, 0.0);
        }
        stationarity_rows.push(first);
        lp.add_eq((0..ns).flat_map(|s| (0..na).map(move |a| (var(k, s, a), 1.0))), count[k] as f64);
    }
    let mut cost_rows = Vec::with_capacity(instance.num_constraints());
    for e in 0..instance.num_constraints() {
        let coeffs: Vec<(usize, f64)> = reps
            .iter()
            .enumerate()
            .flat_map(|(k, &r)| (0..instance.arms[r].num_states()).flat_map(move |s| (0..na).map(move |a| (k, r, s, a))))
            .filter_map(|(k, r, s, a)| {
                let c = instance.cost(r, e, s, a);
                (c != 0.0).then(|| (var(k, s, a), c))
            })
            .collect();
        cost_rows.push(lp.add_le(coeffs, instance.capacity(e)));
    }
    let sol = lp::solve(&lp)?;
    lp_optimal(&sol)?;
    let mut y_star = Vec::with_capacity(instance.num_arms());
    let mut mu = Vec::with_capacity(instance.num_arms());
    for &k in &types {
        let ns = instance.arms[reps[k]].num_states();
        let m = count[k] as f64;
        y_star.push((0..ns).map(|s| (0..na).map(|a| sol.primal[var(k, s, a)] / m).collect()).collect());
        let mut mk = sol.eq_duals[stationarity_rows[k]..stationarity_rows[k] + ns].to_vec();
        let min = mk.iter().copied().fold(f64::INFINITY, f64::min);
        mk.iter_mut().for_each(|v| *v -= min);
        mu.push(mk);
    }
    Ok(WmdpFixedPoint {
        gain: sol.objective / instance.num_arms() as f64,
        y_star,
        mu,
        budget_duals: cost_rows.iter().map(|&r| sol.ineq_duals[r]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmdpPlan {
    pub tau: usize,
    /// `flows[n][t][s][a]`.
    pub flows: Vec<Vec<Vec<Vec<f64>>>>,
    /// `V_τ(x)`, per arm.
    pub value: f64,
    /// `duals[t][e]`.
    pub duals: Vec<Vec<f64>>,
}

impl WmdpPlan {
    /// First-step action distribution of each arm in its own state.
    pub fn first_step_distributions(&self, x: &[Vec<f64>], state: &[usize]) -> Vec<Vec<f64>> {
        state
            .iter()
            .enumerate()
            .map(|(n, &s)| {
                let mass = x[n][s];
                let y = &self.flows[n][0][s];
                if mass <= 1e-12 {
                    let mut q = vec![0.0; y.len()];
                    q[0] = 1.0;
                    q
                } else {
                    y.iter().map(|v| (v / mass).clamp(0.0, 1.0)).collect()
                }
            })
            .collect()
    }
}

/// τ-horizon LP with per-step cost constraints and terminal reward `⟨μ, x_τ⟩`,
/// solved as one flat LP.
pub fn wmdp_plan(instance: &WmdpInstance, x: &[Vec<f64>], tau: usize, mu: &[Vec<f64>]) -> Result<WmdpPlan> {
    let n_arms = instance.num_arms();
    let na = instance.num_actions();
    if x.len() != n_arms
        || mu.len() != n_arms
        || instance.arms.iter().zip(x.iter().zip(mu)).any(|(a, (xn, m))| xn.len() != a.num_states() || m.len() != a.num_states())
    {
        return Err(Error::InvalidArgument("distribution or terminal reward shape does not match the instance".into()));
    }
    if x.iter().any(|xn| xn.iter().any(|v| *v < -1e-12) || (xn.iter().sum::<f64>() - 1.0).abs() > 1e-10) {
        return Err(Error::InvalidArgument("initial condition is not a distribution per arm".into()));
    }
    if tau == 0 {
        let total: f64 = x.iter().zip(mu).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>()).sum();
        return Ok(WmdpPlan { tau, flows: vec![Vec::new(); n_arms], value: total / n_arms as f64, duals: Vec::new() });
    }
    // Groups of arms sharing a type and an initial distribution.
    let (types, _) = instance.arm_types();
    let mut index: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
    let mut groups: Vec<(usize, f64, Vec<usize>)> = Vec::new();
    for (n, xn) in x.iter().enumerate() {
        let key = (types[n], xn.iter().map(|v| v.to_bits()).collect());
        let g = *index.entry(key).or_insert_with(|| {
            groups.push((n, 0.0, Vec::new()));
            groups.len() - 1
        });
        groups[g].1 += 1.0;
        groups[g].2.push(n);
    }
    let mut var_index: Vec<Vec<Vec<usize>>> = Vec::with_capacity(groups.len());
    let mut reach_sets: Vec<Vec<Vec<usize>>> = Vec::with_capacity(groups.len());
    let mut nvars = 0;
    for &(rep, _, _) in &groups {
        let arm = &instance.arms[rep];
        let ns = arm.num_states();
        let mut sets = Vec::with_capacity(tau);
        let mut cur: Vec<bool> = x[rep].iter().map(|&v| v > 0.0).collect();
        for _ in 0..tau {
            sets.push((0..ns).filter(|&s| cur[s]).collect::<Vec<_>>());
            let mut next = vec![false; ns];
            for s in (0..ns).filter(|&s| cur[s]) {
                for a in 0..na {
                    for (t, &p) in arm.row(a, s).iter().enumerate() {
                        if p > 0.0 {
                            next[t] = true;
                        }
                    }
                }
            }
            cur = next;
        }
        let mut idx = vec![vec![usize::MAX; ns]; tau];
        for (t, set) in sets.iter().enumerate() {
            for &s in set {
                idx[t][s] = nvars;
                nvars += na;
            }
        }
        var_index.push(idx);
        reach_sets.push(sets);
    }
    let mut lp = LpProblem::new(nvars);
    for (gi, &(rep, weight, _)) in groups.iter().enumerate() {
        let arm = &instance.arms[rep];
        let idx = &var_index[gi];
        for t in 0..tau {
            for &s in &reach_sets[gi][t] {
                for a in 0..na {
                    let mut c = arm.reward(s, a);
                    if t + 1 == tau {
                        c += arm.expect(a, s, &mu[rep]);
                    }
                    lp.set_objective(idx[t][s] + a, c);
                }
            }
        }
        for &s in &reach_sets[gi][0] {
            lp.add_eq((0..na).map(|a| (idx[0][s] + a, 1.0)), weight * x[rep][s]);
        }
        for t in 1..tau {
            for &s in &reach_sets[gi][t] {
                let mut coeffs: Vec<(usize, f64)> = (0..na).map(|a| (idx[t][s] + a, 1.0)).collect();
                for &sp in &reach_sets[gi][t - 1] {
                    for a in 0..na {
                        let p = arm.prob(a, sp, s);
                        if p != 0.0 {
                            coeffs.push((idx[t - 1][sp] + a, -p));
                        }
                    }
                }
                lp.add_eq(coeffs, 0.0);
            }
        }
    }
    let mut cost_rows = vec![Vec::with_capacity(instance.num_constraints()); tau];
    for (t, rows) in cost_rows.iter_mut().enumerate() {
        for e in 0..instance.num_constraints() {
            let mut coeffs = Vec::new();
            for (gi, &(rep, _, _)) in groups.iter().enumerate() {
                for &s in &reach_sets[gi][t] {
                    for a in 0..na {
                        let c = instance.cost(rep, e, s, a);
                        if c != 0.0 {
                            coeffs.push((var_index[gi][t][s] + a, c));
                        }
                    }
                }
            }
            rows.push(lp.add_le(coeffs, instance.capacity(e)));
        }
    }
    let sol = lp::solve(&lp)?;
    lp_optimal(&sol)?;
    let mut flows = vec![Vec::new(); n_arms];
    for (gi, (rep, weight, members)) in groups.iter().enumerate() {
        let ns = instance.arms[*rep].num_states();
        let f: Vec<Vec<Vec<f64>>> = (0..tau)
            .map(|t| {
                (0..ns)
                    .map(|s| match var_index[gi][t][s] {
                        usize::MAX => vec![0.0; na],
                        v => (0..na).map(|a| sol.primal[v + a].max(0.0) / weight).collect(),
                    })
                    .collect()
            })
            .collect();
        for &n in members {
            flows[n] = f.clone();
        }
    }
    let duals = cost_rows.iter().map(|rows| rows.iter().map(|&r| sol.ineq_duals[r]).collect()).collect();
    Ok(WmdpPlan { tau, flows, value: sol.objective / n_arms as f64, duals })
}

/// Proof-driven default shrinkage `√(log(Nτ²)/(2N))`.
pub fn default_epsilon(num_arms: usize, tau: usize) -> f64 {
    let n = num_arms as f64;
    let t = tau as f64;
    ((n * t * t).ln().max(0.0) / (2.0 * n)).sqrt()
}

/// LP-update for weakly coupled MDPs: plan from the current state, sample
/// each arm independently from its ε-shrunk first-step distribution, then
/// demote arms to `a*` while a budget is exceeded.
#[derive(Debug, Clone)]
pub struct WmdpLpUpdatePolicy {
    instance: WmdpInstance,
    mu: Vec<Vec<f64>>,
    tau: usize,
    epsilon: f64,
    a_star: usize,
}

pub fn lp_update_policy_wmdp(instance: &WmdpInstance, tau: usize, epsilon: Option<f64>) -> Result<WmdpLpUpdatePolicy> {
    let a_star = find_feasible_action(instance)
        .ok_or_else(|| Error::InvalidModel("no action passes the feasibility check".into()))?;
    if tau == 0 {
        return Err(Error::InvalidArgument("τ must be at least 1".into()));
    }
    let fp = wmdp_fixed_point(instance)?;
    Ok(WmdpLpUpdatePolicy {
        instance: instance.clone(),
        mu: fp.mu,
        tau,
        epsilon: epsilon.unwrap_or_else(|| default_epsilon(instance.num_arms(), tau)),
        a_star,
    })
}

impl WmdpLpUpdatePolicy {
    pub fn label(&self) -> String {
        format!("lp-update-wmdp-{}", self.tau)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn a_star(&self) -> usize {
        self.a_star
    }

    /// First-step action distribution of every arm.
    pub fn profile(&self, state: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.instance.validate_state(state)?;
        let x: Vec<Vec<f64>> = state
            .iter()
            .zip(&self.instance.arms)
            .map(|(&s, arm)| {
                let mut v = vec![0.0; arm.num_states()];
                v[s] = 1.0;
                v
            })
            .collect();
        let plan = wmdp_plan(&self.instance, &x, self.tau, &self.mu)?;
        Ok(plan.first_step_distributions(&x, state))
    }

    pub fn decide(&mut self, state: &[usize], rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let dists = self.profile(state)?;
        let mut actions = round_wmdp(&dists, self.epsilon, self.a_star, rng)?;
        self.demote(state, &mut actions)?;
        Ok(actions)
    }

    /// Replaces actions by `a*`, highest arm first, until every budget holds.
    fn demote(&self, state: &[usize], actions: &mut [usize]) -> Result<()> {
        let inst = &self.instance;
        let mut load = inst.load(state, actions);
        for n in (0..actions.len()).rev() {
            let over = (0..inst.num_constraints()).any(|e| load[e] > inst.capacity(e) + 1e-9);
            if !over {
                return Ok(());
            }
            if actions[n] != self.a_star {
                for (e, l) in load.iter_mut().enumerate() {
                    *l += inst.cost(n, e, state[n], self.a_star) - inst.cost(n, e, state[n], actions[n]);
                }
                actions[n] = self.a_star;
            }
        }
        if inst.is_feasible(state, actions) {
            Ok(())
        } else {
            Err(Error::Infeasible)
        }
    }
}

/// One transition of every arm and the mean reward earned.
pub fn wmdp_step<R: Rng + ?Sized>(instance: &WmdpInstance, state: &[usize], actions: &[usize], rng: &mut R) -> Result<(Vec<usize>, f64)> {
    instance.validate_state(state)?;
    if actions.len() != state.len() || actions.iter().any(|&a| a >= instance.num_actions()) {
        return Err(Error::InvalidArgument("actions do not match the instance".into()));
    }
    if !instance.is_feasible(state, actions) {
        return Err(Error::InvalidArgument("joint action exceeds a budget".into()));
    }
    let mut next = Vec::with_capacity(state.len());
    let mut reward = 0.0;
    for ((arm, &s), &a) in instance.arms.iter().zip(state).zip(actions) {
        reward += arm.reward(s, a);
        let u: f64 = rng.random();
        let row = arm.row(a, s);
        let mut cum = 0.0;
        let mut chosen = row.len() - 1;
        for (t, &p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                chosen = t;
                break;
            }
        }
        while row[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        next.push(chosen);
    }
    Ok((next, reward / state.len() as f64))
}

/// Rolls out replicate `replicate` of `seed`; only rewards are recorded.
pub fn run_wmdp(instance: &WmdpInstance, policy: &mut WmdpLpUpdatePolicy, horizon: usize, seed: u64, replicate: u64) -> Result<TrajectoryRecord> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let (mut init_rng, mut rng) = replicate_rngs(seed, replicate);
    let mut state: Vec<usize> = instance.arms.iter().map(|a| init_rng.random_range(0..a.num_states())).collect();
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let actions = policy.decide(&state, &mut rng)?;
        let (next, r) = wmdp_step(instance, &state, &actions, &mut rng)?;
        state = next;
        rewards.push(r);
    }
    Ok(TrajectoryRecord { seed, replicate, states: Vec::new(), actions: Vec::new(), rewards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three_action_arm() -> WmdpArm {
        WmdpArm::new(
            vec![
                vec![vec![0.9, 0.1], vec![0.5, 0.5]],
                vec![vec![0.2, 0.8], vec![0.1, 0.9]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
            vec![vec![0.0, 0.2], vec![0.3, 1.0], vec![0.1, 0.4]],
        )
        .unwrap()
    }

    #[test]
    fn feasible_action_rules() {
        let arm = three_action_arm();
        let inst = WmdpInstance::new(vec![arm.clone()], vec![vec![vec![vec![0.0, 1.0, 0.5]; 2]]], vec![0.5]).unwrap();
        assert_eq!(find_feasible_action(&inst), Some(0));
        let equal = WmdpInstance::new(vec![arm.clone()], vec![vec![vec![vec![1.0; 3]; 2]]], vec![2.0]).unwrap();
        assert_eq!(find_feasible_action(&equal), Some(0));
        let none = WmdpInstance::new(
            vec![arm],
            vec![vec![vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]]],
            vec![1.0],
        )
        .unwrap();
        assert_eq!(find_feasible_action(&none), None);
        assert!(lp_update_policy_wmdp(&none, 2, None).is_err());
    }

    #[test]
    fn ergodicity_extremes() {
        let uniform = WmdpArm::new(vec![vec![vec![0.5, 0.5]; 2]; 3], vec![vec![0.0; 2]; 3]).unwrap();
        let inst = WmdpInstance::new(vec![uniform], vec![vec![]], vec![]).unwrap();
        assert_eq!(wmdp_ergodicity(&inst, 0, 1, false).unwrap(), 1.0);
        let id = WmdpArm::new(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2], vec![vec![0.0; 2]; 2]).unwrap();
        let inst = WmdpInstance::new(vec![id], vec![vec![]], vec![]).unwrap();
        assert_eq!(wmdp_ergodicity(&inst, 0, 3, false).unwrap(), 0.0);
        assert!(wmdp_ergodicity(&inst, 0, 17, false).is_err());
    }

    #[test]
    fn single_action_policy_is_constant() {
        let arm = WmdpArm::new(vec![vec![vec![0.3, 0.7], vec![0.6, 0.4]]], vec![vec![0.5, 1.0]]).unwrap();
        let inst = WmdpInstance::new(vec![arm; 3], vec![vec![vec![vec![1.0]; 2]]; 3], vec![1.0]).unwrap();
        let mut p = lp_update_policy_wmdp(&inst, 3, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(p.decide(&[0, 1, 0], &mut rng).unwrap(), vec![0, 0, 0]);
        }
    }

    #[test]
    fn demotion_keeps_budget() {
        let arm = three_action_arm();
        let costs = vec![vec![vec![vec![0.0, 1.0, 0.5]; 2]]; 6];
        let inst = WmdpInstance::new(vec![arm; 6], costs, vec![0.25]).unwrap();
        let mut p = lp_update_policy_wmdp(&inst, 2, Some(0.0)).unwrap();
        let rec = run_wmdp(&inst, &mut p, 100, 5, 0).unwrap();
        assert_eq!(rec.len(), 100);
    }

    #[test]
    fn tau_zero_plan_is_terminal_value() {
        let arm = three_action_arm();
        let inst = WmdpInstance::new(vec![arm], vec![vec![]], vec![]).unwrap();
        let plan = wmdp_plan(&inst, &[vec![0.25, 0.75]], 0, &[vec![1.0, 3.0]]).unwrap();
        assert!((plan.value - 2.5).abs() < 1e-15);
    }

    #[test]
    fn json_forms() {
        let json = r#"{"actions": 2, "budgets": [0.5],
            "arms": [{"states": 1, "P0": [[1.0]], "P1": [[1.0]], "r0": [0.0], "r1": [1.0]},
                     {"states": 1, "P": [[[1.0]], [[1.0]]], "r": [[0.0], [1.0]]}],
            "costs": [[[[0.0, 1.0]]], [[[0.0, 1.0]]]]}"#;
        let inst = WmdpInstance::from_json_str(json).unwrap();
        assert_eq!(inst.arms[0], inst.arms[1]);
        assert!(WmdpInstance::from_json_str(&json.replace("\"r0\": [0.0], ", "")).is_err());
    }
}
