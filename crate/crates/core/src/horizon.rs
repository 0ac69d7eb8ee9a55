//! The τ-horizon fluid problem with terminal reward `⟨μ, ·⟩`, its Lagrangian
//! decomposition, and the dissipativity quantities built on it.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::FixedPoint;
use crate::lp::{self, LpProblem, LpStatus, RowKind, RowSpec, Simplex};
use crate::mdp;
use crate::model::{ArmModel, BudgetMode, Instance, ProductDistribution};

/// How the horizon LP is solved. Both methods return an optimal solution of
/// the same LP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMethod {
    /// One LP over all arms, states and times.
    Flat,
    /// Master over per-arm deterministic Markov policies, priced by backward induction.
    ColumnGeneration,
    /// Flat for small problems, column generation otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlanOptions {
    pub method: PlanMethod,
    /// Drop the terminal reward `⟨μ, x_τ⟩`.
    pub zero_terminal: bool,
}

/// Rows above which [`PlanMethod::Auto`] switches to column generation.
const AUTO_FLAT_ROWS: usize = 120;
const PRICING_TOL: f64 = 1e-10;
const MAX_PRICING_ROUNDS: usize = 10_000;

/// Solver diagnostics for one horizon solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpReport {
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub complementary_slackness: f64,
    pub objective: f64,
}

/// Optimal fluid trajectory from `x` over `tau` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPlan {
    pub tau: usize,
    pub x: ProductDistribution,
    /// Per arm, per time `t < τ`, per state: `[y(s, 0, t), y(s, 1, t)]`.
    pub flows: Vec<Vec<Vec<[f64; 2]>>>,
    /// Per arm occupancy at time `τ`.
    pub terminal: Vec<Vec<f64>>,
    /// `V_τ(x)`, per arm.
    pub value: f64,
    /// Budget multipliers `λ_t`, in reward units per pull.
    pub lambdas: Vec<f64>,
    pub report: Option<LpReport>,
    pub method: PlanMethod,
}

impl FlowPlan {
    /// `(1/N) Σ_n ‖y_n(·, 1, t)‖₁`.
    pub fn pull_fraction(&self, t: usize) -> f64 {
        let total: f64 = self.flows.iter().map(|f| f[t].iter().map(|y| y[1]).sum::<f64>()).sum();
        total / self.flows.len() as f64
    }

    /// First-step pull probability of each arm in its own state,
    /// `y_n(s_n, 1, 0) / x_n(s_n)`, or 0 where `x_n(s_n) = 0`.
    pub fn first_step_profile(&self, state: &[usize]) -> Vec<f64> {
        state
            .iter()
            .enumerate()
            .map(|(n, &s)| {
                let mass = self.x.x[n][s];
                if self.tau == 0 || mass <= 1e-12 {
                    0.0
                } else {
                    (self.flows[n][0][s][1] / mass).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    /// Largest violation of the initial-condition and flow-conservation rows.
    pub fn conservation_residual(&self, instance: &Instance) -> f64 {
        let mut worst: f64 = 0.0;
        for (n, arm) in instance.arms.iter().enumerate() {
            let mut inflow = self.x.x[n].clone();
            for t in 0..=self.tau {
                let out: Vec<f64> = if t < self.tau {
                    self.flows[n][t].iter().map(|y| y[0] + y[1]).collect()
                } else {
                    self.terminal[n].clone()
                };
                for (a, b) in out.iter().zip(&inflow) {
                    worst = worst.max((a - b).abs());
                }
                if t < self.tau {
                    inflow = propagate(arm, &self.flows[n][t]);
                }
            }
        }
        worst
    }
}

fn propagate(arm: &ArmModel, y: &[[f64; 2]]) -> Vec<f64> {
    let mut next = vec![0.0; arm.num_states()];
    for (s, v) in y.iter().enumerate() {
        for (a, &mass) in v.iter().enumerate() {
            if mass != 0.0 {
                for (o, p) in next.iter_mut().zip(arm.row(a, s)) {
                    *o += mass * p;
                }
            }
        }
    }
    next
}

/// Arms sharing a model and an initial distribution are planned together.
struct Group {
    arm: usize,
    weight: f64,
    x: Vec<f64>,
    members: Vec<usize>,
}

fn group_arms(instance: &Instance, x: &ProductDistribution) -> Vec<Group> {
    let (types, _) = instance.arm_types();
    let mut index: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for (n, xn) in x.x.iter().enumerate() {
        let key = (types[n], xn.iter().map(|v| v.to_bits()).collect());
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Group { arm: n, weight: 0.0, x: xn.clone(), members: Vec::new() });
            groups.len() - 1
        });
        groups[g].weight += 1.0;
        groups[g].members.push(n);
    }
    groups
}

fn reachable(arm: &ArmModel, x: &[f64], tau: usize) -> Vec<Vec<usize>> {
    let ns = arm.num_states();
    let mut sets = Vec::with_capacity(tau);
    let mut cur: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    for _ in 0..tau {
        sets.push((0..ns).filter(|&s| cur[s]).collect::<Vec<_>>());
        let mut next = vec![false; ns];
        for s in (0..ns).filter(|&s| cur[s]) {
            for a in 0..2 {
                for (t, &p) in arm.row(a, s).iter().enumerate() {
                    if p > 0.0 {
                        next[t] = true;
                    }
                }
            }
        }
        cur = next;
    }
    sets
}

/// Solves the τ-horizon LP from `x` with terminal reward `μ`.
pub fn plan(instance: &Instance, x: &ProductDistribution, tau: usize, mu: &[Vec<f64>]) -> Result<FlowPlan> {
    plan_with(instance, x, tau, mu, PlanOptions::default())
}

pub fn plan_with(
    instance: &Instance,
    x: &ProductDistribution,
    tau: usize,
    mu: &[Vec<f64>],
    options: PlanOptions,
) -> Result<FlowPlan> {
    x.validate(instance)?;
    if mu.len() != instance.num_arms()
        || mu.iter().zip(&instance.arms).any(|(m, a)| m.len() != a.num_states())
    {
        return Err(Error::InvalidArgument("terminal reward shape does not match the instance".into()));
    }
    let zero: Vec<Vec<f64>>;
    let terminal_reward = if options.zero_terminal {
        zero = instance.arms.iter().map(|a| vec![0.0; a.num_states()]).collect();
        &zero
    } else {
        mu
    };
    if tau == 0 {
        return Ok(FlowPlan {
            tau,
            x: x.clone(),
            flows: vec![Vec::new(); instance.num_arms()],
            terminal: x.x.clone(),
            value: x.inner(terminal_reward),
            lambdas: Vec::new(),
            report: None,
            method: options.method,
        });
    }
    let groups = group_arms(instance, x);
    let method = match options.method {
        PlanMethod::Auto => {
            let rows: usize = groups
                .iter()
                .map(|g| reachable(&instance.arms[g.arm], &g.x, tau).iter().map(Vec::len).sum::<usize>())
                .sum::<usize>()
                + tau;
            if rows <= AUTO_FLAT_ROWS {
                PlanMethod::Flat
            } else {
                PlanMethod::ColumnGeneration
            }
        }
        m => m,
    };
    let (group_flows, value_total, lambdas, report) = match method {
        PlanMethod::ColumnGeneration => solve_column_generation(instance, &groups, tau, terminal_reward)?,
        _ => solve_flat(instance, &groups, tau, terminal_reward)?,
    };
    let mut flows = vec![Vec::new(); instance.num_arms()];
    let mut terminal = vec![Vec::new(); instance.num_arms()];
    for (g, f) in groups.iter().zip(group_flows) {
        let arm = &instance.arms[g.arm];
        let last = propagate(arm, &f[tau - 1]);
        for &n in &g.members {
            flows[n] = f.clone();
            terminal[n] = last.clone();
        }
    }
    Ok(FlowPlan {
        tau,
        x: x.clone(),
        flows,
        terminal,
        value: value_total / instance.num_arms() as f64,
        lambdas,
        report: Some(report),
        method,
    })
}

type GroupFlows = Vec<Vec<Vec<[f64; 2]>>>;

fn solve_flat(
    instance: &Instance,
    groups: &[Group],
    tau: usize,
    mu: &[Vec<f64>],
) -> Result<(GroupFlows, f64, Vec<f64>, LpReport)> {
    // Variable index per (group, t, state, action); usize::MAX for unreachable states.
    let mut index: Vec<Vec<Vec<usize>>> = Vec::with_capacity(groups.len());
    let mut reach_sets = Vec::with_capacity(groups.len());
    let mut nvars = 0;
    for g in groups {
        let arm = &instance.arms[g.arm];
        let reach = reachable(arm, &g.x, tau);
        let mut idx = vec![vec![usize::MAX; arm.num_states()]; tau];
        for (t, set) in reach.iter().enumerate() {
            for &s in set {
                idx[t][s] = nvars;
                nvars += 2;
            }
        }
        index.push(idx);
        reach_sets.push(reach);
    }
    let mut lp = LpProblem::new(nvars);
    for (gi, g) in groups.iter().enumerate() {
        let arm = &instance.arms[g.arm];
        let terminal = &mu[g.arm];
        let idx = &index[gi];
        for t in 0..tau {
            for &s in &reach_sets[gi][t] {
                for a in 0..2 {
                    let mut c = arm.reward(s, a);
                    if t + 1 == tau {
                        c += arm.expect(a, s, terminal);
                    }
                    lp.set_objective(idx[t][s] + a, c);
                }
            }
        }
        for &s in &reach_sets[gi][0] {
            lp.add_eq([(idx[0][s], 1.0), (idx[0][s] + 1, 1.0)], g.weight * g.x[s]);
        }
        for t in 1..tau {
            for &s in &reach_sets[gi][t] {
                let mut coeffs = vec![(idx[t][s], 1.0), (idx[t][s] + 1, 1.0)];
                for &sp in &reach_sets[gi][t - 1] {
                    for a in 0..2 {
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
    let budget = instance.budget();
    let exactly = instance.budget_mode == BudgetMode::Exactly;
    let mut budget_rows = Vec::with_capacity(tau);
    for t in 0..tau {
        let coeffs: Vec<(usize, f64)> = (0..groups.len())
            .flat_map(|gi| reach_sets[gi][t].iter().map(move |&s| (gi, s)))
            .map(|(gi, s)| (index[gi][t][s] + 1, 1.0))
            .collect();
        budget_rows.push(if exactly { lp.add_eq(coeffs, budget) } else { lp.add_le(coeffs, budget) });
    }
    let sol = lp::solve(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(Error::Infeasible),
        LpStatus::Unbounded => return Err(Error::Unbounded),
    }
    let lambdas = budget_rows
        .iter()
        .map(|&r| if exactly { sol.eq_duals[r] } else { sol.ineq_duals[r] })
        .collect();
    let flows = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let ns = instance.arms[g.arm].num_states();
            (0..tau)
                .map(|t| {
                    (0..ns)
                        .map(|s| match index[gi][t][s] {
                            usize::MAX => [0.0; 2],
                            v => [sol.primal[v].max(0.0) / g.weight, sol.primal[v + 1].max(0.0) / g.weight],
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let report = LpReport {
        duality_gap: sol.duality_gap,
        primal_residual: sol.primal_residual,
        complementary_slackness: sol.complementary_slackness,
        objective: sol.objective,
    };
    Ok((flows, sol.objective, lambdas, report))
}

struct Column {
    group: usize,
    actions: Vec<Vec<usize>>,
}

/// Occupancy `d_t` for `t = 0..=τ` of a deterministic Markov policy from `x`,
/// together with its reward including the terminal term and its pulls per step.
fn evaluate_policy(arm: &ArmModel, x: &[f64], actions: &[Vec<usize>], terminal: &[f64]) -> (Vec<Vec<f64>>, f64, Vec<f64>) {
    let mut d = Vec::with_capacity(actions.len() + 1);
    let mut cur = x.to_vec();
    let mut value = 0.0;
    let mut pulls = Vec::with_capacity(actions.len());
    for act in actions {
        let mut next = vec![0.0; arm.num_states()];
        let mut pulled = 0.0;
        for (s, &m) in cur.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let a = act[s];
            value += m * arm.reward(s, a);
            if a == 1 {
                pulled += m;
            }
            for (o, p) in next.iter_mut().zip(arm.row(a, s)) {
                *o += m * p;
            }
        }
        pulls.push(pulled);
        d.push(std::mem::replace(&mut cur, next));
    }
    value += cur.iter().zip(terminal).map(|(a, b)| a * b).sum::<f64>();
    d.push(cur);
    (d, value, pulls)
}

fn solve_column_generation(
    instance: &Instance,
    groups: &[Group],
    tau: usize,
    mu: &[Vec<f64>],
) -> Result<(GroupFlows, f64, Vec<f64>, LpReport)> {
    let ng = groups.len();
    let exactly = instance.budget_mode == BudgetMode::Exactly;
    let budget = instance.budget();
    let mut rows: Vec<RowSpec> = groups.iter().map(|g| RowSpec { kind: RowKind::Eq, rhs: g.weight }).collect();
    let budget_kind = if exactly { RowKind::Eq } else { RowKind::Le };
    rows.extend((0..tau).map(|_| RowSpec { kind: budget_kind, rhs: budget }));
    let mut master = Simplex::new(&rows);
    let mut columns: Vec<Column> = Vec::new();
    let mut seen: HashSet<(usize, Vec<Vec<usize>>)> = HashSet::new();

    let mut add = |master: &mut Simplex, columns: &mut Vec<Column>, gi: usize, actions: Vec<Vec<usize>>| -> bool {
        if !seen.insert((gi, actions.clone())) {
            return false;
        }
        let g = &groups[gi];
        let arm = &instance.arms[g.arm];
        let (_, value, pulls) = evaluate_policy(arm, &g.x, &actions, &mu[g.arm]);
        let mut entries = vec![(gi, 1.0)];
        entries.extend(pulls.iter().enumerate().filter(|(_, &p)| p != 0.0).map(|(t, &p)| (ng + t, p)));
        master.add_column(&entries, value);
        columns.push(Column { group: gi, actions });
        true
    };

    for gi in 0..ng {
        let ns = instance.arms[groups[gi].arm].num_states();
        add(&mut master, &mut columns, gi, vec![vec![0; ns]; tau]);
        if exactly {
            add(&mut master, &mut columns, gi, vec![vec![1; ns]; tau]);
        }
    }

    let mut rounds = 0;
    let (duals, objective) = loop {
        match master.optimize()? {
            LpStatus::Optimal => {}
            LpStatus::Infeasible => return Err(Error::Infeasible),
            LpStatus::Unbounded => return Err(Error::Unbounded),
        }
        let duals = master.row_duals();
        let objective = master.objective();
        let lambdas = &duals[ng..];
        let mut added = false;
        for (gi, g) in groups.iter().enumerate() {
            let arm = &instance.arms[g.arm];
            let (w0, actions) = mdp::backward_induction(arm, lambdas, &mu[g.arm]);
            let priced: f64 = g.x.iter().zip(&w0).map(|(a, b)| a * b).sum();
            if priced - duals[gi] > PRICING_TOL * (1.0 + priced.abs()) {
                added |= add(&mut master, &mut columns, gi, actions);
            }
        }
        if !added {
            break (duals, objective);
        }
        rounds += 1;
        if rounds > MAX_PRICING_ROUNDS {
            return Err(Error::NumericalFailure("column generation did not converge".into()));
        }
    };
    master.refactor()?;
    let theta = master.structural_values(columns.len());

    let mut flows: GroupFlows = groups
        .iter()
        .map(|g| vec![vec![[0.0; 2]; instance.arms[g.arm].num_states()]; tau])
        .collect();
    for (col, &th) in columns.iter().zip(&theta) {
        if th <= 0.0 {
            continue;
        }
        let g = &groups[col.group];
        let arm = &instance.arms[g.arm];
        let (d, _, _) = evaluate_policy(arm, &g.x, &col.actions, &mu[g.arm]);
        for t in 0..tau {
            for (s, &m) in d[t].iter().enumerate() {
                flows[col.group][t][s][col.actions[t][s]] += th * m / g.weight;
            }
        }
    }

    let lambdas = duals[ng..].to_vec();
    // Certificate: the Lagrangian bound at the master's λ matches the master value.
    let mut bound = budget * lambdas.iter().sum::<f64>();
    for g in groups {
        let arm = &instance.arms[g.arm];
        let (w0, _) = mdp::backward_induction(arm, &lambdas, &mu[g.arm]);
        bound += g.weight * g.x.iter().zip(&w0).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut residual: f64 = 0.0;
    let mut cs: f64 = 0.0;
    for t in 0..tau {
        let used: f64 = flows.iter().zip(groups).map(|(f, g)| g.weight * f[t].iter().map(|y| y[1]).sum::<f64>()).sum();
        let slack = budget - used;
        residual = residual.max(if exactly { slack.abs() } else { -slack });
        cs = cs.max((lambdas[t] * slack).abs());
    }
    let theta_sum: Vec<f64> = {
        let mut v = vec![0.0; ng];
        for (col, &th) in columns.iter().zip(&theta) {
            v[col.group] += th;
        }
        v
    };
    for (g, s) in groups.iter().zip(&theta_sum) {
        residual = residual.max((g.weight - s).abs());
    }
    let report = LpReport {
        duality_gap: (bound - objective).abs(),
        primal_residual: residual,
        complementary_slackness: cs,
        objective,
    };
    Ok((flows, objective, lambdas, report))
}

/// Lagrangian bound `L(x, τ, λ) = α Σ_t λ_t + (1/N) Σ_n x_n · W_n`, where
/// `W_n` solves the single-arm problem with reward `r(s, a) − λ_t a` and
/// terminal reward `μ_n`.
pub fn relaxed_value(
    instance: &Instance,
    x: &ProductDistribution,
    mu: &[Vec<f64>],
    lambdas: &[f64],
) -> Result<f64> {
    x.validate(instance)?;
    let mut total = 0.0;
    for ((arm, xn), m) in instance.arms.iter().zip(&x.x).zip(mu) {
        let (w0, _) = mdp::backward_induction(arm, lambdas, m);
        total += xn.iter().zip(&w0).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(instance.alpha * lambdas.iter().sum::<f64>() + total / instance.num_arms() as f64)
}

/// Rotated stage cost
/// `c̄(x, u) = g* − (1/N) Σ_n [r_0·x_n + (r_1 − r_0)·u_n] + ⟨μ, x − x P_0 − u (P_1 − P_0)⟩`.
pub fn rotated_cost(instance: &Instance, fixed_point: &FixedPoint, x: &ProductDistribution, u: &[Vec<f64>]) -> Result<f64> {
    x.validate(instance)?;
    if u.len() != instance.num_arms() {
        return Err(Error::InvalidArgument("pull vector has the wrong number of arms".into()));
    }
    let mut pulls = 0.0;
    let mut reward = 0.0;
    let mut storage = 0.0;
    for (((arm, xn), un), mu) in instance.arms.iter().zip(&x.x).zip(u).zip(&fixed_point.mu) {
        if un.len() != arm.num_states() || un.iter().zip(xn).any(|(a, b)| *a < -1e-12 || *a > b + 1e-12) {
            return Err(Error::InvalidArgument("pull vector must satisfy 0 ≤ u ≤ x".into()));
        }
        let passive: Vec<f64> = xn.iter().zip(un).map(|(a, b)| a - b).collect();
        let mut next = vec![0.0; arm.num_states()];
        arm.push_forward(0, &passive, &mut next);
        arm.push_forward(1, un, &mut next);
        for s in 0..arm.num_states() {
            reward += passive[s] * arm.reward(s, 0) + un[s] * arm.reward(s, 1);
            storage += mu[s] * (xn[s] - next[s]);
        }
        pulls += un.iter().sum::<f64>();
    }
    let n = instance.num_arms() as f64;
    let frac = pulls / n;
    let violates = match instance.budget_mode {
        BudgetMode::AtMost => frac > instance.alpha + 1e-9,
        BudgetMode::Exactly => (frac - instance.alpha).abs() > 1e-9,
    };
    if violates {
        return Err(Error::InvalidArgument(format!("pull fraction {frac} violates the budget")));
    }
    Ok(fixed_point.gain - reward / n + storage / n)
}

/// `Cost_τ(x) = ⟨μ, x⟩ + τ g* − V_τ(x)`.
pub fn surrogate_cost(instance: &Instance, fixed_point: &FixedPoint, x: &ProductDistribution, tau: usize) -> Result<f64> {
    let v = plan(instance, x, tau, &fixed_point.mu)?;
    Ok(x.inner(&fixed_point.mu) + tau as f64 * fixed_point.gain - v.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSelection {
    pub tau: usize,
    pub converged: bool,
    /// `Cost_0, …, Cost_τ`.
    pub costs: Vec<f64>,
}

/// Smallest `τ ≤ τ_max` with `|Cost_τ − Cost_{τ−1}| ≤ ε`.
pub fn select_horizon(
    instance: &Instance,
    fixed_point: &FixedPoint,
    x: &ProductDistribution,
    epsilon: f64,
    tau_max: usize,
) -> Result<HorizonSelection> {
    if epsilon <= 0.0 || tau_max == 0 {
        return Err(Error::InvalidArgument("need ε > 0 and τ_max ≥ 1".into()));
    }
    let mut costs = vec![0.0];
    for tau in 1..=tau_max {
        let c = surrogate_cost(instance, fixed_point, x, tau)?;
        let prev = costs[tau - 1];
        costs.push(c);
        if (c - prev).abs() <= epsilon {
            return Ok(HorizonSelection { tau, converged: true, costs });
        }
    }
    Ok(HorizonSelection { tau: tau_max, converged: false, costs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    pub value: f64,
    pub horizon: usize,
    pub converged: bool,
}

const BIAS_MAX_HORIZON: usize = 512;

/// `h*(x) ≈ T g* − V_T(x)` with `T` doubled until successive estimates
/// differ by at most `tol`.
pub fn bias_estimate(instance: &Instance, fixed_point: &FixedPoint, x: &ProductDistribution, tol: f64) -> Result<BiasEstimate> {
    let at = |t: usize| -> Result<f64> {
        let v = plan_with(instance, x, t, &fixed_point.mu, PlanOptions { method: PlanMethod::ColumnGeneration, zero_terminal: false })?;
        Ok(t as f64 * fixed_point.gain - v.value)
    };
    let mut t = 1;
    let mut prev = at(t)?;
    while t < BIAS_MAX_HORIZON {
        t *= 2;
        let cur = at(t)?;
        if (cur - prev).abs() <= tol {
            return Ok(BiasEstimate { value: cur, horizon: t, converged: true });
        }
        prev = cur;
    }
    Ok(BiasEstimate { value: prev, horizon: t, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed_point::solve_fixed_point;
    use crate::model::{hong_instance, one_hot, random_instance};

    fn opts(method: PlanMethod) -> PlanOptions {
        PlanOptions { method, zero_terminal: false }
    }

    #[test]
    fn zero_horizon_is_storage() {
        let inst = random_instance(2, 3, 4);
        let fp = solve_fixed_point(&inst).unwrap();
        let x = ProductDistribution::uniform(&inst);
        let p = plan(&inst, &x, 0, &fp.mu).unwrap();
        assert_eq!(p.value, x.inner(&fp.mu));
    }

    #[test]
    fn flat_and_column_generation_agree() {
        for seed in 0..6 {
            let inst = random_instance(seed, 4, 5);
            let fp = solve_fixed_point(&inst).unwrap();
            let x = ProductDistribution::uniform(&inst);
            for tau in [1, 3] {
                let a = plan_with(&inst, &x, tau, &fp.mu, opts(PlanMethod::Flat)).unwrap();
                let b = plan_with(&inst, &x, tau, &fp.mu, opts(PlanMethod::ColumnGeneration)).unwrap();
                assert!((a.value - b.value).abs() < 1e-9, "seed {seed} tau {tau}: {} vs {}", a.value, b.value);
                assert!(a.conservation_residual(&inst) < 1e-9);
                assert!(b.conservation_residual(&inst) < 1e-9);
                for t in 0..tau {
                    assert!(b.pull_fraction(t) <= inst.alpha + 1e-9);
                }
                assert!(b.report.unwrap().duality_gap < 1e-8);
            }
        }
    }

    #[test]
    fn grouped_counterexample_plan() {
        let inst = hong_instance(6);
        let fp = solve_fixed_point(&inst).unwrap();
        let x = one_hot(&[0, 0, 3, 7, 7, 5], &inst).unwrap();
        let a = plan_with(&inst, &x, 4, &fp.mu, opts(PlanMethod::Flat)).unwrap();
        let b = plan_with(&inst, &x, 4, &fp.mu, opts(PlanMethod::ColumnGeneration)).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
        assert_eq!(a.flows[3], a.flows[4]);
    }

    #[test]
    fn strong_duality_at_plan_multipliers() {
        let inst = random_instance(9, 5, 4);
        let fp = solve_fixed_point(&inst).unwrap();
        let x = one_hot(&vec![0; 5], &inst).unwrap();
        let p = plan(&inst, &x, 3, &fp.mu).unwrap();
        let l = relaxed_value(&inst, &x, &fp.mu, &p.lambdas).unwrap();
        assert!((l - p.value).abs() < 1e-8);
        let bumped: Vec<f64> = p.lambdas.iter().map(|l| l + 0.1).collect();
        assert!(relaxed_value(&inst, &x, &fp.mu, &bumped).unwrap() >= p.value - 1e-9);
    }

    #[test]
    fn rotated_cost_vanishes_at_fixed_point() {
        let inst = random_instance(5, 4, 6);
        let fp = solve_fixed_point(&inst).unwrap();
        let c = rotated_cost(&inst, &fp, &fp.x_star(), &fp.u_star()).unwrap();
        assert!(c.abs() < 1e-8, "{c}");
        let zeros: Vec<Vec<f64>> = inst.arms.iter().map(|a| vec![0.0; a.num_states()]).collect();
        assert!(rotated_cost(&inst, &fp, &fp.x_star(), &zeros).unwrap() >= -1e-8);
    }

    #[test]
    fn horizon_at_fixed_point_is_one() {
        let inst = random_instance(6, 3, 4);
        let fp = solve_fixed_point(&inst).unwrap();
        let sel = select_horizon(&inst, &fp, &fp.x_star(), 1e-6, 5).unwrap();
        assert_eq!(sel.tau, 1);
        assert!(sel.converged);
    }
}
