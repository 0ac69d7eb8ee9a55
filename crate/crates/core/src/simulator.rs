//! Seeded rollouts of the joint system and the normalized-reward metric.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{validate_state, Instance};
use crate::policies::{check_budget, Policy};

/// Samples every arm's next state independently and returns the mean reward
/// `(1/N) Σ_n r_n(s_n, a_n)` earned in `state`.
pub fn step<R: Rng + ?Sized>(instance: &Instance, state: &[usize], actions: &[bool], rng: &mut R) -> Result<(Vec<usize>, f64)> {
    validate_state(state, instance)?;
    check_budget(instance, actions)?;
    let mut next = Vec::with_capacity(state.len());
    let mut reward = 0.0;
    for ((arm, &s), &pull) in instance.arms.iter().zip(state).zip(actions) {
        let a = usize::from(pull);
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
        // Guard against rounding in the cumulative sum landing on a zero-probability tail.
        while row[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        next.push(chosen);
    }
    Ok((next, reward / state.len() as f64))
}

/// Random streams for replicate `replicate` of master seed `seed`: one for
/// the initial state and one for decisions and transitions.
pub fn replicate_rngs(seed: u64, replicate: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(2 * replicate);
    let mut dynamics = ChaCha8Rng::seed_from_u64(seed);
    dynamics.set_stream(2 * replicate + 1);
    (init, dynamics)
}

/// Initial joint state with every arm uniform over its states.
pub fn initial_state<R: Rng + ?Sized>(instance: &Instance, rng: &mut R) -> Vec<usize> {
    instance.arms.iter().map(|a| rng.random_range(0..a.num_states())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub replicate: u64,
    /// Joint states `S(0), …, S(T−1)`; empty unless the path was recorded.
    pub states: Vec<Vec<usize>>,
    /// Joint actions `A(0), …, A(T−1)`; empty unless the path was recorded.
    pub actions: Vec<Vec<bool>>,
    /// Mean reward per step.
    pub rewards: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn average_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Rolls out `policy` for `horizon` steps, recording states and actions.
pub fn run(instance: &Instance, policy: &mut dyn Policy, horizon: usize, seed: u64) -> Result<TrajectoryRecord> {
    run_replicate(instance, policy, horizon, seed, 0, true, None)
}

/// Rolls out replicate `replicate` of `seed`. The initial state is drawn
/// from its own stream, so every policy sees the same start for a given
/// `(seed, replicate)`.
pub fn run_replicate(
    instance: &Instance,
    policy: &mut dyn Policy,
    horizon: usize,
    seed: u64,
    replicate: u64,
    record_path: bool,
    initial: Option<&[usize]>,
) -> Result<TrajectoryRecord> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let (mut init_rng, mut rng) = replicate_rngs(seed, replicate);
    let mut state = match initial {
        Some(s) => {
            validate_state(s, instance)?;
            s.to_vec()
        }
        None => initial_state(instance, &mut init_rng),
    };
    policy.reset();
    let mut record = TrajectoryRecord {
        seed,
        replicate,
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::with_capacity(horizon),
    };
    for _ in 0..horizon {
        let actions = policy.decide(&state, &mut rng as &mut dyn RngCore)?;
        let (next, reward) = step(instance, &state, &actions, &mut rng)?;
        if record_path {
            record.states.push(std::mem::replace(&mut state, next));
            record.actions.push(actions);
        } else {
            state = next;
        }
        record.rewards.push(reward);
    }
    Ok(record)
}

/// Mean and 95% Student-t half-width. The half-width is 0 for fewer than two values.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

/// Running average reward divided by `g*`, averaged across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    /// Across-replicate mean of the normalized running average at `t = 1..=T`.
    pub mean: Vec<f64>,
    pub ci95: Vec<f64>,
    /// Normalized running average at `T` for each replicate.
    pub finals: Vec<f64>,
    pub final_mean: f64,
    pub final_ci95: f64,
}

/// Per-replicate normalized running averages `(1/t) Σ_{s<t} R(s) / g*`.
pub fn normalized_series(record: &TrajectoryRecord, g_star: f64) -> Vec<f64> {
    let mut total = 0.0;
    record
        .rewards
        .iter()
        .enumerate()
        .map(|(t, r)| {
            total += r;
            total / (t + 1) as f64 / g_star
        })
        .collect()
}

pub fn normalized_metric(records: &[TrajectoryRecord], g_star: f64) -> Result<MetricSeries> {
    if g_star <= 0.0 || g_star.is_nan() {
        return Err(Error::InvalidArgument(format!("normalizing gain {g_star} must be positive")));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no trajectories to summarize".into()));
    }
    let len = records.iter().map(TrajectoryRecord::len).min().unwrap_or(0);
    let series: Vec<Vec<f64>> = records.iter().map(|r| normalized_series(r, g_star)).collect();
    let mut mean = Vec::with_capacity(len);
    let mut ci95 = Vec::with_capacity(len);
    let mut column = vec![0.0; series.len()];
    for t in 0..len {
        for (c, s) in column.iter_mut().zip(&series) {
            *c = s[t];
        }
        let (m, h) = mean_ci95(&column);
        mean.push(m);
        ci95.push(h);
    }
    let finals: Vec<f64> = series.iter().map(|s| s[len - 1]).collect();
    let (final_mean, final_ci95) = mean_ci95(&finals);
    Ok(MetricSeries { mean, ci95, finals, final_mean, final_ci95 })
}
