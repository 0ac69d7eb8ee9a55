//! Arms, instances, joint states and product distributions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Printed matrices carry 2-3 decimals; rows this close to stochastic are renormalized.
const LOAD_ROW_TOL: f64 = 1e-2;
const ROW_TOL: f64 = 1e-12;

/// One arm of a restless bandit: two actions, row-stochastic kernels and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    pub id: usize,
    num_states: usize,
    /// Row-major `num_states × num_states` kernel for each action.
    kernels: [Vec<f64>; 2],
    rewards: [Vec<f64>; 2],
}

impl ArmModel {
    /// Builds an arm from nested rows. Rows are renormalized if their sums are
    /// within the printed-rounding tolerance of 1; rewards are not rescaled.
    pub fn new(
        id: usize,
        p0: Vec<Vec<f64>>,
        p1: Vec<Vec<f64>>,
        r0: Vec<f64>,
        r1: Vec<f64>,
    ) -> Result<Self> {
        let raw = RawArm { states: p0.len(), p0, p1, r0, r1 };
        let mut report = ValidationReport::default();
        raw.check(id, &mut report);
        if !report.is_ok() {
            return Err(Error::InvalidModel(report.violations.join("; ")));
        }
        Ok(raw.into_arm(id))
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Transition row of action `a` from state `s`.
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

    pub fn rewards(&self, a: usize) -> &[f64] {
        &self.rewards[a]
    }

    /// `Σ_t P_a(s, t) v(t)`.
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

    fn map_rewards(&mut self, f: impl Fn(f64) -> f64) {
        for r in self.rewards.iter_mut().flatten() {
            *r = f(*r);
        }
    }

    fn to_raw(&self) -> RawArm {
        let n = self.num_states;
        let rows = |a: usize| (0..n).map(|s| self.row(a, s).to_vec()).collect();
        RawArm {
            states: n,
            p0: rows(0),
            p1: rows(1),
            r0: self.rewards[0].clone(),
            r1: self.rewards[1].clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// At most `⌊αN⌋` arms are pulled.
    #[default]
    AtMost,
    /// Exactly `⌊αN⌋` arms are pulled.
    Exactly,
}

impl std::str::FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at-most" => Ok(BudgetMode::AtMost),
            "exactly" => Ok(BudgetMode::Exactly),
            other => Err(Error::InvalidArgument(format!("unknown budget mode `{other}`"))),
        }
    }
}

/// Affine map from stored rewards back to the units they were supplied in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub offset: f64,
    pub scale: f64,
}

impl RewardScale {
    pub const IDENTITY: RewardScale = RewardScale { offset: 0.0, scale: 1.0 };

    pub fn to_raw(&self, normalized: f64) -> f64 {
        self.offset + self.scale * normalized
    }
}

/// `N` heterogeneous arms sharing a pull budget `αN`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub arms: Vec<ArmModel>,
    pub alpha: f64,
    pub budget_mode: BudgetMode,
    pub reward_scale: RewardScale,
}

impl Instance {
    /// Builds an instance, rescaling rewards to `[0, 1]` when any lies outside.
    pub fn new(mut arms: Vec<ArmModel>, alpha: f64, budget_mode: BudgetMode) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::InvalidModel("instance has no arms".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidModel(format!("alpha {alpha} outside [0, 1]")));
        }
        for (i, arm) in arms.iter_mut().enumerate() {
            arm.id = i;
        }
        let (lo, hi) = reward_range(&arms);
        let reward_scale = if lo < 0.0 || hi > 1.0 {
            let scale = if hi > lo { hi - lo } else { 1.0 };
            for arm in &mut arms {
                arm.map_rewards(|r| (r - lo) / scale);
            }
            log::info!("rewards rescaled from [{lo}, {hi}] to [0, 1]");
            RewardScale { offset: lo, scale }
        } else {
            RewardScale::IDENTITY
        };
        Ok(Instance { arms, alpha, budget_mode, reward_scale })
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    /// `αN` as a real number.
    pub fn budget(&self) -> f64 {
        self.alpha * self.arms.len() as f64
    }

    /// `⌊αN⌋`, the number of pulls allowed per step.
    pub fn max_pulls(&self) -> usize {
        (self.budget() + 1e-9).floor() as usize
    }

    pub fn max_states(&self) -> usize {
        self.arms.iter().map(ArmModel::num_states).max().unwrap_or(0)
    }

    /// Total number of joint states, saturating on overflow.
    pub fn joint_state_count(&self) -> usize {
        self.arms.iter().fold(1usize, |acc, a| acc.saturating_mul(a.num_states()))
    }

    /// Groups arms with identical kernels and rewards. Returns the type of
    /// each arm and one representative arm index per type.
    pub fn arm_types(&self) -> (Vec<usize>, Vec<usize>) {
        let mut reps: Vec<usize> = Vec::new();
        let mut types = Vec::with_capacity(self.arms.len());
        for (n, arm) in self.arms.iter().enumerate() {
            let same = |&r: &usize| {
                let o = &self.arms[r];
                o.kernels == arm.kernels && o.rewards == arm.rewards
            };
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

    pub fn with_budget_mode(&self, budget_mode: BudgetMode) -> Instance {
        Instance { budget_mode, ..self.clone() }
    }

    pub fn with_alpha(&self, alpha: f64) -> Instance {
        Instance { alpha, ..self.clone() }
    }

    /// Repeats the arm list `copies` times, keeping α.
    pub fn replicate(&self, copies: usize) -> Instance {
        let mut arms = Vec::with_capacity(self.arms.len() * copies);
        for _ in 0..copies {
            arms.extend(self.arms.iter().cloned());
        }
        for (i, arm) in arms.iter_mut().enumerate() {
            arm.id = i;
        }
        Instance { arms, ..self.clone() }
    }

    /// Checks every structural invariant of a constructed instance.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.arms.is_empty() {
            report.violations.push("instance has no arms".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            report.violations.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        for (n, arm) in self.arms.iter().enumerate() {
            for a in 0..2 {
                for s in 0..arm.num_states {
                    let row = arm.row(a, s);
                    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        report.violations.push(format!("entry outside [0, 1] arm {n} action {a} row {s}"));
                    }
                    if (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                        report.violations.push(format!("row-stochasticity arm {n} action {a} row {s}"));
                    }
                    let r = arm.reward(s, a);
                    if !(0.0..=1.0).contains(&r) {
                        report.violations.push(format!("reward outside [0, 1] arm {n} state {s} action {a}"));
                    }
                }
            }
        }
        report
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(json)?;
        file.into_instance()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Instance::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes the stored (normalized) model.
    pub fn to_json(&self) -> Result<String> {
        let file = InstanceFile {
            alpha: self.alpha,
            budget_mode: self.budget_mode,
            arms: self.arms.iter().map(ArmModel::to_raw).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

fn reward_range(arms: &[ArmModel]) -> (f64, f64) {
    arms.iter()
        .flat_map(|a| a.rewards.iter().flatten())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    /// Adjustments applied on load that are not violations.
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// On-disk instance format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    pub alpha: f64,
    #[serde(default)]
    pub budget_mode: BudgetMode,
    pub arms: Vec<RawArm>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawArm {
    pub states: usize,
    #[serde(rename = "P0")]
    pub p0: Vec<Vec<f64>>,
    #[serde(rename = "P1")]
    pub p1: Vec<Vec<f64>>,
    pub r0: Vec<f64>,
    pub r1: Vec<f64>,
}

impl RawArm {
    fn check(&self, n: usize, report: &mut ValidationReport) {
        let k = self.states;
        if k == 0 {
            report.violations.push(format!("arm {n} has no states"));
            return;
        }
        for (a, p) in [&self.p0, &self.p1].into_iter().enumerate() {
            if p.len() != k || p.iter().any(|row| row.len() != k) {
                report.violations.push(format!("kernel dimensions arm {n} action {a} disagree with states={k}"));
                continue;
            }
            for (s, row) in p.iter().enumerate() {
                if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    report.violations.push(format!("negative or non-finite entry arm {n} action {a} row {s}"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > LOAD_ROW_TOL {
                    report.violations.push(format!("row-stochasticity arm {n} action {a} row {s}"));
                } else if (sum - 1.0).abs() > ROW_TOL {
                    report.notes.push(format!("arm {n} action {a} row {s} renormalized (sum {sum})"));
                }
            }
        }
        for (a, r) in [&self.r0, &self.r1].into_iter().enumerate() {
            if r.len() != k {
                report.violations.push(format!("reward length arm {n} action {a} disagrees with states={k}"));
            } else if r.iter().any(|v| !v.is_finite()) {
                report.violations.push(format!("non-finite reward arm {n} action {a}"));
            } else if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                report.notes.push(format!("arm {n} action {a} rewards outside [0, 1]; rescale applied"));
            }
        }
    }

    fn into_arm(self, id: usize) -> ArmModel {
        let k = self.states;
        let flatten = |p: Vec<Vec<f64>>, a: usize| {
            let mut out = Vec::with_capacity(k * k);
            for (s, row) in p.into_iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    log::debug!("arm {id} action {a} row {s}: residual {:.3e} removed", sum - 1.0);
                    out.extend(row.into_iter().map(|v| v / sum));
                } else {
                    out.extend(row);
                }
            }
            out
        };
        ArmModel {
            id,
            num_states: k,
            kernels: [flatten(self.p0, 0), flatten(self.p1, 1)],
            rewards: [self.r0, self.r1],
        }
    }
}

impl InstanceFile {
    /// Reports dimension and stochasticity problems without building the instance.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.arms.is_empty() {
            report.violations.push("instance has no arms".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            report.violations.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        for (n, arm) in self.arms.iter().enumerate() {
            arm.check(n, &mut report);
        }
        report
    }

    pub fn into_instance(self) -> Result<Instance> {
        let report = self.validate();
        if !report.is_ok() {
            return Err(Error::InvalidModel(report.violations.join("; ")));
        }
        let arms = self.arms.into_iter().enumerate().map(|(i, a)| a.into_arm(i)).collect();
        Instance::new(arms, self.alpha, self.budget_mode)
    }
}

/// One distribution per arm over that arm's states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductDistribution {
    pub x: Vec<Vec<f64>>,
}

impl ProductDistribution {
    pub fn num_arms(&self) -> usize {
        self.x.len()
    }

    /// Uniform over each arm's states.
    pub fn uniform(instance: &Instance) -> Self {
        let x = instance
            .arms
            .iter()
            .map(|a| vec![1.0 / a.num_states() as f64; a.num_states()])
            .collect();
        ProductDistribution { x }
    }

    /// Checks shape against `instance` and that each component lies in the simplex.
    pub fn validate(&self, instance: &Instance) -> Result<()> {
        if self.x.len() != instance.num_arms() {
            return Err(Error::InvalidArgument(format!(
                "distribution has {} components, instance has {} arms",
                self.x.len(),
                instance.num_arms()
            )));
        }
        for (n, (xn, arm)) in self.x.iter().zip(&instance.arms).enumerate() {
            if xn.len() != arm.num_states() {
                return Err(Error::InvalidArgument(format!("component {n} has wrong length")));
            }
            if xn.iter().any(|v| *v < -1e-12) || (xn.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!("component {n} is not a distribution")));
            }
        }
        Ok(())
    }

    /// `(1/N) Σ_n μ_n · x_n`.
    pub fn inner(&self, mu: &[Vec<f64>]) -> f64 {
        let total: f64 = self
            .x
            .iter()
            .zip(mu)
            .map(|(x, m)| x.iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        total / self.x.len() as f64
    }

    /// `w·self + (1−w)·other`, componentwise.
    pub fn mix(&self, other: &Self, w: f64) -> Self {
        let x = self
            .x
            .iter()
            .zip(&other.x)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| w * u + (1.0 - w) * v).collect())
            .collect();
        ProductDistribution { x }
    }

    /// Recovers the joint state if every component is a point mass.
    pub fn as_joint_state(&self) -> Option<Vec<usize>> {
        self.x
            .iter()
            .map(|xn| {
                let s = xn.iter().position(|&v| v > 0.5)?;
                (xn.iter().enumerate().all(|(t, &v)| if t == s { v == 1.0 } else { v == 0.0 })).then_some(s)
            })
            .collect()
    }
}

/// Checks a joint state against the instance's state spaces.
pub fn validate_state(state: &[usize], instance: &Instance) -> Result<()> {
    if state.len() != instance.num_arms() {
        return Err(Error::InvalidArgument(format!(
            "state has {} entries, instance has {} arms",
            state.len(),
            instance.num_arms()
        )));
    }
    for (n, (&s, arm)) in state.iter().zip(&instance.arms).enumerate() {
        if s >= arm.num_states() {
            return Err(Error::InvalidArgument(format!(
                "arm {n} state {s} out of range 0..{}",
                arm.num_states()
            )));
        }
    }
    Ok(())
}

/// Point-mass encoding of a joint state.
pub fn one_hot(state: &[usize], instance: &Instance) -> Result<ProductDistribution> {
    validate_state(state, instance)?;
    let x = state
        .iter()
        .zip(&instance.arms)
        .map(|(&s, arm)| {
            let mut v = vec![0.0; arm.num_states()];
            v[s] = 1.0;
            v
        })
        .collect();
    Ok(ProductDistribution { x })
}

/// Options for [`random_instance_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomInstanceConfig {
    pub num_arms: usize,
    pub min_states: usize,
    pub max_states: usize,
    pub alpha: f64,
    pub budget_mode: BudgetMode,
}

impl RandomInstanceConfig {
    pub fn new(num_arms: usize) -> Self {
        RandomInstanceConfig {
            num_arms,
            min_states: 1,
            max_states: 10,
            alpha: 0.4,
            budget_mode: BudgetMode::AtMost,
        }
    }
}

/// Random instance with state sizes uniform on `1..=max_states`, `Exp(1)`
/// kernel rows normalized to sum 1 and `Exp(1)` rewards min-max scaled to `[0, 1]`.
pub fn random_instance(seed: u64, num_arms: usize, max_states: usize) -> Instance {
    random_instance_with(seed, RandomInstanceConfig { max_states, ..RandomInstanceConfig::new(num_arms) })
}

pub fn random_instance_with(seed: u64, config: RandomInstanceConfig) -> Instance {
    assert!(config.num_arms >= 1, "random instance needs at least one arm");
    assert!(1 <= config.min_states && config.min_states <= config.max_states);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arms = Vec::with_capacity(config.num_arms);
    for id in 0..config.num_arms {
        let k = rng.random_range(config.min_states..=config.max_states);
        let mut kernel = || {
            let mut flat = Vec::with_capacity(k * k);
            for _ in 0..k {
                let row: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let sum: f64 = row.iter().sum();
                flat.extend(row.into_iter().map(|v| v / sum));
            }
            flat
        };
        let kernels = [kernel(), kernel()];
        let rewards = [
            (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect(),
            (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect(),
        ];
        arms.push(ArmModel { id, num_states: k, kernels, rewards });
    }
    let (lo, hi) = reward_range(&arms);
    let scale = if hi > lo { hi - lo } else { 1.0 };
    for arm in &mut arms {
        arm.map_rewards(|r| (r - lo) / scale);
    }
    Instance {
        arms,
        alpha: config.alpha,
        budget_mode: config.budget_mode,
        reward_scale: RewardScale { offset: lo, scale },
    }
}

/// The 8-state arm whose fluid limit cycles under the LP-priority policy (α = 0.5).
pub fn counterexample_hong() -> (ArmModel, f64) {
    let mut p0 = vec![vec![0.0; 8]; 8];
    let mut p1 = vec![vec![0.0; 8]; 8];
    p0[0][0] = 1.0;
    p0[1][1] = 1.0;
    p0[2][1] = 0.48;
    p0[2][2] = 0.52;
    p0[3][2] = 0.47;
    p0[3][3] = 0.53;
    for s in 4..7 {
        p0[s][s] = 0.9;
        p0[s][s + 1] = 0.1;
    }
    p0[7][0] = 0.1;
    p0[7][7] = 0.9;
    for s in 0..4 {
        p1[s][s] = 0.9;
        p1[s][s + 1] = 0.1;
    }
    for (s, back) in [(4, 0.46), (5, 0.45), (6, 0.44), (7, 0.43)] {
        p1[s][s - 1] = back;
        p1[s][s] = 1.0 - back;
    }
    let mut r0 = vec![0.0; 8];
    r0[7] = 0.1;
    let arm = ArmModel::new(0, p0, p1, r0, vec![0.0; 8]).expect("built-in arm is valid");
    (arm, 0.5)
}

/// The 3-state arm on which LP-priority is strictly suboptimal (α = 0.4).
pub fn counterexample_yan() -> (ArmModel, f64) {
    let p0 = vec![
        vec![0.022, 0.102, 0.875],
        vec![0.034, 0.172, 0.794],
        vec![0.523, 0.455, 0.022],
    ];
    let p1 = vec![
        vec![0.149, 0.304, 0.547],
        vec![0.568, 0.411, 0.020],
        vec![0.253, 0.273, 0.474],
    ];
    let arm = ArmModel::new(0, p0, p1, vec![0.0; 3], vec![0.374, 0.117, 0.079])
        .expect("built-in arm is valid");
    (arm, 0.4)
}

/// `n` copies of the Hong arm at α = 0.5.
pub fn hong_instance(n: usize) -> Instance {
    let (arm, alpha) = counterexample_hong();
    Instance::new(vec![arm; n], alpha, BudgetMode::AtMost).expect("valid")
}

/// `n` copies of the Yan arm at α = 0.4.
pub fn yan_instance(n: usize) -> Instance {
    let (arm, alpha) = counterexample_yan();
    Instance::new(vec![arm; n], alpha, BudgetMode::AtMost).expect("valid")
}

/// `⌈n/2⌉` Hong arms followed by `⌊n/2⌋` Yan arms, α = 0.4.
pub fn mixed_counterexample(n: usize) -> Instance {
    let (hong, _) = counterexample_hong();
    let (yan, _) = counterexample_yan();
    let mut arms = vec![hong; n.div_ceil(2)];
    arms.extend(std::iter::repeat_n(yan, n / 2));
    Instance::new(arms, 0.4, BudgetMode::AtMost).expect("valid")
}
