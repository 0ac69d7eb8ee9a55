//! Dense revised simplex for small and medium linear programs.
//!
//! Problems are stated as `maximize c·x` subject to equality rows, `≤` rows
//! and lower bounds on the variables. The solver returns a basic optimal
//! solution together with the row duals certified by the terminal basis.

use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const BLAND_AFTER: usize = 50;

#[derive(Debug, Clone, PartialEq)]
struct Row {
    coeffs: Vec<(usize, f64)>,
    rhs: f64,
}

/// A maximization problem over nonnegative (or lower-bounded) variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    num_vars: usize,
    objective: Vec<f64>,
    eq: Vec<Row>,
    ineq: Vec<Row>,
    lower: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    /// Largest `|dual · slack|` over inequality rows.
    pub complementary_slackness: f64,
    /// Largest violation of any row or bound by `primal`.
    pub primal_residual: f64,
    /// `|c·x − dual objective|`.
    pub duality_gap: f64,
}

impl LpSolution {
    fn with_status(status: LpStatus) -> Self {
        LpSolution {
            status,
            primal: Vec::new(),
            objective: f64::NAN,
            eq_duals: Vec::new(),
            ineq_duals: Vec::new(),
            complementary_slackness: f64::NAN,
            primal_residual: f64::NAN,
            duality_gap: f64::NAN,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

impl LpProblem {
    pub fn new(num_vars: usize) -> Self {
        LpProblem {
            num_vars,
            objective: vec![0.0; num_vars],
            eq: Vec::new(),
            ineq: Vec::new(),
            lower: vec![0.0; num_vars],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_eq(&self) -> usize {
        self.eq.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq.len()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn set_objective(&mut self, var: usize, coeff: f64) {
        self.objective[var] = coeff;
    }

    pub fn set_lower_bound(&mut self, var: usize, bound: f64) {
        self.lower[var] = bound;
    }

    /// Adds `Σ coeffs · x = rhs` and returns its row index among equality rows.
    pub fn add_eq<I: IntoIterator<Item = (usize, f64)>>(&mut self, coeffs: I, rhs: f64) -> usize {
        self.eq.push(Row { coeffs: coeffs.into_iter().collect(), rhs });
        self.eq.len() - 1
    }

    /// Adds `Σ coeffs · x ≤ rhs` and returns its row index among inequality rows.
    pub fn add_le<I: IntoIterator<Item = (usize, f64)>>(&mut self, coeffs: I, rhs: f64) -> usize {
        self.ineq.push(Row { coeffs: coeffs.into_iter().collect(), rhs });
        self.ineq.len() - 1
    }

    fn validate(&self) -> Result<()> {
        if self.objective.iter().chain(&self.lower).any(|v| !v.is_finite()) {
            return Err(Error::InvalidLp("non-finite objective or bound".into()));
        }
        for row in self.eq.iter().chain(&self.ineq) {
            if !row.rhs.is_finite() {
                return Err(Error::InvalidLp("non-finite right-hand side".into()));
            }
            for &(j, v) in &row.coeffs {
                if j >= self.num_vars {
                    return Err(Error::InvalidLp(format!(
                        "variable index {j} out of range for {} variables",
                        self.num_vars
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::InvalidLp("non-finite coefficient".into()));
                }
            }
        }
        Ok(())
    }

    fn row_activity(row: &Row, x: &[f64]) -> f64 {
        row.coeffs.iter().map(|&(j, v)| v * x[j]).sum()
    }
}

/// Solves `problem`. Infeasibility and unboundedness are reported through
/// [`LpSolution::status`]; exceeding the pivot budget is an error.
pub fn solve(problem: &LpProblem) -> Result<LpSolution> {
    problem.validate()?;
    let n = problem.num_vars;
    let m_eq = problem.eq.len();
    let m = m_eq + problem.ineq.len();

    // Shift x = lower + x' so the engine only sees x' ≥ 0.
    let shifted_rhs = |row: &Row| row.rhs - LpProblem::row_activity(row, &problem.lower);
    let mut rows = Vec::with_capacity(m);
    for row in &problem.eq {
        rows.push(RowSpec { kind: RowKind::Eq, rhs: shifted_rhs(row) });
    }
    for row in &problem.ineq {
        rows.push(RowSpec { kind: RowKind::Le, rhs: shifted_rhs(row) });
    }

    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in problem.eq.iter().chain(&problem.ineq).enumerate() {
        for &(j, v) in &row.coeffs {
            if v != 0.0 {
                columns[j].push((i, v));
            }
        }
    }
    for col in &mut columns {
        merge_duplicates(col);
    }

    let mut engine = Simplex::new(&rows);
    for (j, col) in columns.into_iter().enumerate() {
        engine.add_column(&col, problem.objective[j]);
    }
    match engine.optimize()? {
        LpStatus::Optimal => {}
        status => return Ok(LpSolution::with_status(status)),
    }
    engine.refactor()?;

    let mut x = engine.structural_values(n);
    for (xj, l) in x.iter_mut().zip(&problem.lower) {
        *xj += l;
    }
    let duals = engine.row_duals();
    let (eq_duals, mut ineq_duals) = (duals[..m_eq].to_vec(), duals[m_eq..].to_vec());
    for d in &mut ineq_duals {
        if *d < 0.0 && *d > -FEAS_TOL {
            *d = 0.0;
        }
    }

    let objective: f64 = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();

    let mut residual: f64 = 0.0;
    for (xj, l) in x.iter().zip(&problem.lower) {
        residual = residual.max(l - xj);
    }
    for row in &problem.eq {
        residual = residual.max((LpProblem::row_activity(row, &x) - row.rhs).abs());
    }
    let mut cs: f64 = 0.0;
    for (row, d) in problem.ineq.iter().zip(&ineq_duals) {
        let slack = row.rhs - LpProblem::row_activity(row, &x);
        residual = residual.max(-slack);
        cs = cs.max((d * slack).abs());
    }

    // Dual objective b·y + l·(c − Aᵀy); the second term vanishes for zero bounds.
    let mut reduced = problem.objective.clone();
    for (row, d) in problem.eq.iter().zip(&eq_duals).chain(problem.ineq.iter().zip(&ineq_duals)) {
        for &(j, v) in &row.coeffs {
            reduced[j] -= v * d;
        }
    }
    let dual_objective: f64 = problem
        .eq
        .iter()
        .zip(&eq_duals)
        .chain(problem.ineq.iter().zip(&ineq_duals))
        .map(|(row, d)| row.rhs * d)
        .sum::<f64>()
        + problem.lower.iter().zip(&reduced).map(|(l, r)| l * r).sum::<f64>();

    Ok(LpSolution {
        status: LpStatus::Optimal,
        primal: x,
        objective,
        eq_duals,
        ineq_duals,
        complementary_slackness: cs,
        primal_residual: residual.max(0.0),
        duality_gap: (objective - dual_objective).abs(),
    })
}

fn merge_duplicates(col: &mut Vec<(usize, f64)>) {
    col.sort_by_key(|&(i, _)| i);
    col.dedup_by(|next, kept| {
        if next.0 == kept.0 {
            kept.1 += next.1;
            true
        } else {
            false
        }
    });
    col.retain(|&(_, v)| v != 0.0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RowKind {
    Eq,
    Le,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RowSpec {
    pub kind: RowKind,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Structural,
    Slack,
    Artificial,
}

/// Revised simplex engine with an explicit dense basis inverse.
///
/// Columns may be appended after a solve and `optimize` called again, which
/// resumes from the current basis. Structural columns are numbered in the
/// order they were added.
pub(crate) struct Simplex {
    m: usize,
    /// Row multipliers applied so that every right-hand side is nonnegative.
    sign: Vec<f64>,
    rhs: Vec<f64>,
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    kind: Vec<ColKind>,
    structural: Vec<usize>,
    basis: Vec<usize>,
    /// Position of each column in the basis, or `usize::MAX`.
    position: Vec<usize>,
    /// Column-major `m × m` basis inverse.
    binv: Vec<f64>,
    xb: Vec<f64>,
    phase_one_done: bool,
    pivots_since_refactor: usize,
}

impl Simplex {
    pub(crate) fn new(rows: &[RowSpec]) -> Self {
        let m = rows.len();
        let mut s = Simplex {
            m,
            sign: rows.iter().map(|r| if r.rhs < 0.0 { -1.0 } else { 1.0 }).collect(),
            rhs: rows.iter().map(|r| r.rhs.abs()).collect(),
            cols: Vec::new(),
            cost: Vec::new(),
            kind: Vec::new(),
            structural: Vec::new(),
            basis: vec![usize::MAX; m],
            position: Vec::new(),
            binv: vec![0.0; m * m],
            xb: Vec::new(),
            phase_one_done: false,
            pivots_since_refactor: 0,
        };
        for (i, row) in rows.iter().enumerate() {
            if row.kind == RowKind::Le {
                let j = s.push_column(vec![(i, s.sign[i])], 0.0, ColKind::Slack);
                if s.sign[i] > 0.0 {
                    s.basis[i] = j;
                }
            }
        }
        for i in 0..m {
            if s.basis[i] == usize::MAX {
                s.basis[i] = s.push_column(vec![(i, 1.0)], 0.0, ColKind::Artificial);
            }
        }
        for (i, &j) in s.basis.iter().enumerate() {
            s.position[j] = i;
            s.binv[i * m + i] = 1.0;
        }
        s.xb = s.rhs.clone();
        if !s.kind.contains(&ColKind::Artificial) {
            s.phase_one_done = true;
        }
        s
    }

    fn push_column(&mut self, col: Vec<(usize, f64)>, cost: f64, kind: ColKind) -> usize {
        self.cols.push(col);
        self.cost.push(cost);
        self.kind.push(kind);
        self.position.push(usize::MAX);
        self.cols.len() - 1
    }

    /// Appends a structural column given in the caller's row orientation.
    pub(crate) fn add_column(&mut self, entries: &[(usize, f64)], cost: f64) -> usize {
        let col = entries.iter().map(|&(i, v)| (i, v * self.sign[i])).collect();
        let j = self.push_column(col, cost, ColKind::Structural);
        self.structural.push(j);
        self.structural.len() - 1
    }

    /// Runs phase one (if not yet done) and phase two from the current basis.
    pub(crate) fn optimize(&mut self) -> Result<LpStatus> {
        if !self.phase_one_done {
            let phase_one: Vec<f64> = self
                .kind
                .iter()
                .map(|k| if *k == ColKind::Artificial { -1.0 } else { 0.0 })
                .collect();
            self.iterate(&phase_one, true)?;
            self.refactor()?;
            let infeasibility: f64 = self
                .basis
                .iter()
                .zip(&self.xb)
                .filter(|(&j, _)| self.kind[j] == ColKind::Artificial)
                .map(|(_, &v)| v)
                .sum();
            let scale = 1.0 + self.rhs.iter().fold(0.0f64, |a, &b| a.max(b));
            if infeasibility > FEAS_TOL * scale {
                return Ok(LpStatus::Infeasible);
            }
            self.drive_out_artificials();
            self.phase_one_done = true;
        }
        let cost = self.cost.clone();
        self.iterate(&cost, false)
    }

    fn iterate(&mut self, cost: &[f64], phase_one: bool) -> Result<LpStatus> {
        let cap = 50 * (self.m + self.cols.len()).max(1);
        let mut degenerate_run = 0usize;
        let mut pi = vec![0.0; self.m];
        let mut alpha = vec![0.0; self.m];
        for _ in 0..cap {
            if self.pivots_since_refactor >= self.m.max(20) {
                self.refactor()?;
            }
            self.compute_pi(cost, &mut pi);
            let bland = degenerate_run >= BLAND_AFTER;
            let Some(q) = self.choose_entering(cost, &pi, phase_one, bland) else {
                return Ok(LpStatus::Optimal);
            };
            self.compute_alpha(q, &mut alpha);
            let Some(r) = self.choose_leaving(&alpha, bland) else {
                if phase_one {
                    return Err(Error::NumericalFailure("phase one reported unbounded".into()));
                }
                return Ok(LpStatus::Unbounded);
            };
            let step = self.xb[r].max(0.0) / alpha[r];
            if step.abs() <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(q, r, &alpha);
        }
        Err(Error::NumericalFailure(format!("simplex exceeded {cap} pivots")))
    }

    fn compute_pi(&self, cost: &[f64], pi: &mut [f64]) {
        let m = self.m;
        for (k, p) in pi.iter_mut().enumerate() {
            let col = &self.binv[k * m..(k + 1) * m];
            *p = self.basis.iter().zip(col).map(|(&j, b)| cost[j] * b).sum();
        }
    }

    fn reduced_cost(&self, j: usize, cost: &[f64], pi: &[f64]) -> f64 {
        cost[j] - self.cols[j].iter().map(|&(i, v)| pi[i] * v).sum::<f64>()
    }

    fn choose_entering(&self, cost: &[f64], pi: &[f64], phase_one: bool, bland: bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.cols.len() {
            if self.position[j] != usize::MAX {
                continue;
            }
            if !phase_one && self.kind[j] == ColKind::Artificial {
                continue;
            }
            let d = self.reduced_cost(j, cost, pi);
            if d <= OPT_TOL {
                continue;
            }
            if bland {
                return Some(j);
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    }

    fn compute_alpha(&self, q: usize, alpha: &mut [f64]) {
        let m = self.m;
        alpha.fill(0.0);
        for &(k, v) in &self.cols[q] {
            let col = &self.binv[k * m..(k + 1) * m];
            for (a, b) in alpha.iter_mut().zip(col) {
                *a += v * b;
            }
        }
    }

    fn choose_leaving(&self, alpha: &[f64], bland: bool) -> Option<usize> {
        // Basic artificials sitting on redundant rows must stay at zero.
        let mut forced: Option<usize> = None;
        let mut bound = f64::INFINITY;
        for i in 0..self.m {
            if self.phase_one_done && self.kind[self.basis[i]] == ColKind::Artificial {
                if alpha[i].abs() > PIVOT_TOL && forced.is_none_or(|f| alpha[i].abs() > alpha[f].abs()) {
                    forced = Some(i);
                }
                continue;
            }
            if alpha[i] > PIVOT_TOL {
                bound = bound.min((self.xb[i].max(0.0) + FEAS_TOL) / alpha[i]);
            }
        }
        if forced.is_some() {
            return forced;
        }
        if bound == f64::INFINITY {
            return None;
        }
        let mut best: Option<usize> = None;
        if bland {
            let mut min_ratio = f64::INFINITY;
            for i in 0..self.m {
                if alpha[i] > PIVOT_TOL {
                    min_ratio = min_ratio.min(self.xb[i].max(0.0) / alpha[i]);
                }
            }
            for i in 0..self.m {
                if alpha[i] > PIVOT_TOL
                    && self.xb[i].max(0.0) / alpha[i] <= min_ratio + 1e-12
                    && best.is_none_or(|b| self.basis[i] < self.basis[b])
                {
                    best = Some(i);
                }
            }
        } else {
            for i in 0..self.m {
                if alpha[i] > PIVOT_TOL
                    && self.xb[i].max(0.0) / alpha[i] <= bound
                    && best.is_none_or(|b| alpha[i] > alpha[b])
                {
                    best = Some(i);
                }
            }
        }
        best
    }

    fn pivot(&mut self, q: usize, r: usize, alpha: &[f64]) {
        let m = self.m;
        let ar = alpha[r];
        for k in 0..m {
            let col = &mut self.binv[k * m..(k + 1) * m];
            let v = col[r] / ar;
            if v != 0.0 {
                for (c, a) in col.iter_mut().zip(alpha) {
                    *c -= a * v;
                }
            }
            col[r] = v;
        }
        let theta = self.xb[r].max(0.0) / ar;
        for (x, a) in self.xb.iter_mut().zip(alpha) {
            *x -= a * theta;
        }
        self.xb[r] = theta;
        for x in &mut self.xb {
            if *x < 0.0 && *x > -FEAS_TOL {
                *x = 0.0;
            }
        }
        let leaving = self.basis[r];
        self.position[leaving] = usize::MAX;
        self.basis[r] = q;
        self.position[q] = r;
        self.pivots_since_refactor += 1;
    }

    /// Rebuilds the basis inverse from scratch and recomputes basic values.
    pub(crate) fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        // Row-major augmented elimination on [B | I].
        let mut a = vec![0.0; m * m];
        for (i, &j) in self.basis.iter().enumerate() {
            for &(k, v) in &self.cols[j] {
                a[k * m + i] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let p = (c..m)
                .max_by(|&x, &y| a[x * m + c].abs().total_cmp(&a[y * m + c].abs()))
                .unwrap_or(c);
            if a[p * m + c].abs() < 1e-13 {
                return Err(Error::NumericalFailure("singular basis".into()));
            }
            if p != c {
                for k in 0..m {
                    a.swap(p * m + k, c * m + k);
                    inv.swap(p * m + k, c * m + k);
                }
            }
            let d = a[c * m + c];
            for k in 0..m {
                a[c * m + k] /= d;
                inv[c * m + k] /= d;
            }
            for i in 0..m {
                if i == c {
                    continue;
                }
                let f = a[i * m + c];
                if f != 0.0 {
                    for k in 0..m {
                        a[i * m + k] -= f * a[c * m + k];
                        inv[i * m + k] -= f * inv[c * m + k];
                    }
                }
            }
        }
        // inv is row-major B⁻¹; store column-major.
        for i in 0..m {
            for k in 0..m {
                self.binv[k * m + i] = inv[i * m + k];
            }
        }
        for i in 0..m {
            self.xb[i] = (0..m).map(|k| self.binv[k * m + i] * self.rhs[k]).sum();
            if self.xb[i] < 0.0 && self.xb[i] > -FEAS_TOL {
                self.xb[i] = 0.0;
            }
        }
        self.pivots_since_refactor = 0;
        Ok(())
    }

    fn drive_out_artificials(&mut self) {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        for r in 0..m {
            if self.kind[self.basis[r]] != ColKind::Artificial {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.cols.len() {
                if self.position[j] != usize::MAX || self.kind[j] == ColKind::Artificial {
                    continue;
                }
                let v: f64 = self.cols[j].iter().map(|&(k, v)| v * self.binv[k * m + r]).sum();
                if v.abs() > 1e-7 && best.is_none_or(|(_, b)| v.abs() > b) {
                    best = Some((j, v.abs()));
                }
            }
            if let Some((q, _)) = best {
                self.compute_alpha(q, &mut alpha);
                self.xb[r] = 0.0;
                self.pivot(q, r, &alpha);
            }
        }
    }

    pub(crate) fn objective(&self) -> f64 {
        self.basis.iter().zip(&self.xb).map(|(&j, x)| self.cost[j] * x.max(0.0)).sum()
    }

    /// Values of the first `n` structural columns.
    pub(crate) fn structural_values(&self, n: usize) -> Vec<f64> {
        self.structural[..n]
            .iter()
            .map(|&j| match self.position[j] {
                usize::MAX => 0.0,
                i => self.xb[i].max(0.0),
            })
            .collect()
    }

    /// Dual values in the caller's row orientation.
    pub(crate) fn row_duals(&self) -> Vec<f64> {
        let mut pi = vec![0.0; self.m];
        self.compute_pi(&self.cost, &mut pi);
        pi.iter().zip(&self.sign).map(|(p, s)| p * s).collect()
    }
}
