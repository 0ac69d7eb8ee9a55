//! Experiment grids: a TOML spec expands into cells (N, α, τ, policy), each
//! run for several replicates. Results go to a long-format CSV and a summary
//! JSON.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::solve_fixed_point;
use crate::model::{
    hong_instance, mixed_counterexample, random_instance_with, yan_instance, BudgetMode, Instance,
    RandomInstanceConfig,
};
use crate::policies::PolicyKind;
use crate::rounding::RoundingMode;
use crate::simulator::{mean_ci95, normalized_series, run_replicate};

/// Where arms come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstanceSource {
    Hong,
    Yan,
    Mixed,
    /// Random arms drawn from `seed`; each N gets its own draw.
    Random { seed: u64, max_states: usize },
    File(PathBuf),
}

impl InstanceSource {
    /// Parses `hong`, `yan`, `mixed`, `random:SEED` or a JSON path, each
    /// optionally followed by `:N`. Returns the source and the arm count if given.
    pub fn parse(spec: &str) -> Result<(InstanceSource, Option<usize>)> {
        let parts: Vec<&str> = spec.split(':').collect();
        let count = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::InvalidArgument(format!("bad arm count `{s}` in `{spec}`")))
        };
        match parts.as_slice() {
            ["hong"] => Ok((InstanceSource::Hong, None)),
            ["yan"] => Ok((InstanceSource::Yan, None)),
            ["mixed"] => Ok((InstanceSource::Mixed, None)),
            ["hong", n] => Ok((InstanceSource::Hong, Some(count(n)?))),
            ["yan", n] => Ok((InstanceSource::Yan, Some(count(n)?))),
            ["mixed", n] => Ok((InstanceSource::Mixed, Some(count(n)?))),
            ["random", seed, rest @ ..] if rest.len() <= 1 => {
                let seed = seed
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad seed in `{spec}`")))?;
                let n = rest.first().map(|n| count(n)).transpose()?;
                Ok((InstanceSource::Random { seed, max_states: 10 }, n))
            }
            _ => Ok((InstanceSource::File(PathBuf::from(spec)), None)),
        }
    }

    /// Builds the instance with `n` arms. File instances keep their own size
    /// unless `n` is a multiple of it, in which case the arm list is repeated.
    pub fn build(&self, n: Option<usize>) -> Result<Instance> {
        const DEFAULT_ARMS: usize = 30;
        let size = n.unwrap_or(DEFAULT_ARMS);
        Ok(match self {
            InstanceSource::Hong => hong_instance(size),
            InstanceSource::Yan => yan_instance(size),
            InstanceSource::Mixed => mixed_counterexample(size),
            InstanceSource::Random { seed, max_states } => random_instance_with(
                *seed,
                RandomInstanceConfig { max_states: *max_states, ..RandomInstanceConfig::new(size) },
            ),
            InstanceSource::File(path) => {
                let base = Instance::load(path)?;
                match n {
                    None => base,
                    Some(n) if n == base.num_arms() => base,
                    Some(n) if n % base.num_arms() == 0 => base.replicate(n / base.num_arms()),
                    Some(n) => {
                        return Err(Error::InvalidArgument(format!(
                            "{} has {} arms; {n} is not a multiple",
                            path.display(),
                            base.num_arms()
                        )))
                    }
                }
            }
        })
    }
}

/// Policy entry of a spec: `lp-update` expands over the τ list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PolicyEntry {
    LpUpdateSweep,
    Fixed(PolicyKind),
}

fn parse_policy(s: &str) -> Result<PolicyEntry> {
    if s == "lp-update" {
        Ok(PolicyEntry::LpUpdateSweep)
    } else {
        s.parse().map(PolicyEntry::Fixed)
    }
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: String,
    #[serde(default)]
    pub description: String,
    /// `hong`, `yan`, `mixed`, `random` or a path to an instance JSON.
    pub instance: String,
    /// Seed of the random arm generator.
    #[serde(default)]
    pub instance_seed: u64,
    #[serde(default = "default_max_states")]
    pub max_states: usize,
    #[serde(default)]
    pub num_arms: Vec<usize>,
    /// Empty keeps each instance's own α.
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub tau: Vec<usize>,
    pub policies: Vec<String>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget_mode")]
    pub budget_mode: BudgetMode,
    #[serde(default)]
    pub rounding: RoundingMode,
    /// Record every `stride`-th step, plus the last.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_max_states() -> usize {
    10
}
fn default_horizon() -> usize {
    1000
}
fn default_replicates() -> usize {
    20
}
fn default_budget_mode() -> BudgetMode {
    BudgetMode::Exactly
}
fn default_stride() -> usize {
    1
}

const BUILTIN: [(&str, &str); 9] = [
    ("fig1a", include_str!("../../../scenarios/fig1a.toml")),
    ("fig1b", include_str!("../../../scenarios/fig1b.toml")),
    ("fig1c", include_str!("../../../scenarios/fig1c.toml")),
    ("fig2a", include_str!("../../../scenarios/fig2a.toml")),
    ("fig2b", include_str!("../../../scenarios/fig2b.toml")),
    ("fig2c", include_str!("../../../scenarios/fig2c.toml")),
    ("fig3a", include_str!("../../../scenarios/fig3a.toml")),
    ("fig3b", include_str!("../../../scenarios/fig3b.toml")),
    ("fig3c", include_str!("../../../scenarios/fig3c.toml")),
];

/// Names of the scenarios shipped with the crate.
pub fn builtin_scenarios() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(s)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ExperimentSpec::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{name}`")))?;
        ExperimentSpec::from_toml_str(text)
    }

    /// A built-in name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILTIN.iter().any(|(n, _)| *n == name_or_path) {
            ExperimentSpec::builtin(name_or_path)
        } else {
            ExperimentSpec::load(name_or_path)
        }
    }

    fn source(&self) -> Result<InstanceSource> {
        Ok(match self.instance.as_str() {
            "random" => InstanceSource::Random { seed: self.instance_seed, max_states: self.max_states },
            other => InstanceSource::parse(other)?.0,
        })
    }

    fn check(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::InvalidArgument("spec lists no policies".into()));
        }
        let entries = self.policies.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?;
        if entries.contains(&PolicyEntry::LpUpdateSweep) && self.tau.is_empty() {
            return Err(Error::InvalidArgument("`lp-update` needs a τ list".into()));
        }
        if self.tau.contains(&0) {
            return Err(Error::InvalidArgument("τ must be at least 1".into()));
        }
        if self.horizon == 0 || self.replicates == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument("horizon, replicates and stride must be positive".into()));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidArgument("α must lie in (0, 1]".into()));
        }
        if self.max_states == 0 || self.num_arms.contains(&0) {
            return Err(Error::InvalidArgument("arm and state counts must be positive".into()));
        }
        self.source().map(|_| ())
    }

    /// Grid cells in output order: N, then α, then policy, then τ.
    pub fn cells(&self) -> Result<Vec<CellConfig>> {
        let entries = self.policies.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?;
        let ns: Vec<Option<usize>> =
            if self.num_arms.is_empty() { vec![None] } else { self.num_arms.iter().map(|&n| Some(n)).collect() };
        let alphas: Vec<Option<f64>> =
            if self.alpha.is_empty() { vec![None] } else { self.alpha.iter().map(|&a| Some(a)).collect() };
        let mut cells = Vec::new();
        for &n in &ns {
            for &alpha in &alphas {
                for e in &entries {
                    let kinds: Vec<PolicyKind> = match e {
                        PolicyEntry::LpUpdateSweep => self.tau.iter().map(|&tau| PolicyKind::LpUpdate { tau }).collect(),
                        PolicyEntry::Fixed(k) => vec![*k],
                    };
                    for policy in kinds {
                        cells.push(CellConfig { policy, num_arms: n, alpha });
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// One grid point. `None` fields take the instance's own value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub policy: PolicyKind,
    pub num_arms: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfigOut {
    pub policy: String,
    #[serde(rename = "N")]
    pub num_arms: usize,
    pub alpha: f64,
    pub tau: Option<usize>,
    pub replicates: usize,
    pub horizon: usize,
    pub g_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub config: CellConfigOut,
    /// Across-replicate mean of the normalized reward at the horizon.
    pub mean: f64,
    pub ci95: f64,
    pub runtime_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub scenario: String,
    pub cells: Vec<CellSummary>,
}

/// Results of one cell: the summary and its CSV rows.
struct CellResult {
    summary: CellSummary,
    csv: String,
}

fn run_cell(spec: &ExperimentSpec, source: &InstanceSource, cell: &CellConfig) -> CellResult {
    let start = Instant::now();
    let mut out = CellConfigOut {
        policy: cell.policy.to_string(),
        num_arms: cell.num_arms.unwrap_or(0),
        alpha: cell.alpha.unwrap_or(f64::NAN),
        tau: cell.policy.tau(),
        replicates: spec.replicates,
        horizon: spec.horizon,
        g_star: f64::NAN,
    };
    let attempt = (|| -> Result<(f64, f64, String)> {
        let mut instance = source.build(cell.num_arms)?.with_budget_mode(spec.budget_mode);
        if let Some(a) = cell.alpha {
            instance = instance.with_alpha(a);
        }
        out.num_arms = instance.num_arms();
        out.alpha = instance.alpha;
        let fp = solve_fixed_point(&instance)?;
        out.g_star = fp.gain;
        let mut policy = cell.policy.build(&instance, &fp, spec.rounding)?;
        let tau = cell.policy.tau().map(|t| t.to_string()).unwrap_or_default();
        let mut csv = String::new();
        let mut finals = Vec::with_capacity(spec.replicates);
        for rep in 0..spec.replicates as u64 {
            let record = run_replicate(&instance, policy.as_mut(), spec.horizon, spec.seed, rep, false, None)?;
            let series = normalized_series(&record, fp.gain);
            let mut total = 0.0;
            for (t, (r, z)) in record.rewards.iter().zip(&series).enumerate() {
                total += r;
                let step = t + 1;
                if step % spec.stride == 0 || step == spec.horizon {
                    writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{},{}",
                        spec.scenario,
                        out.policy,
                        out.num_arms,
                        out.alpha,
                        tau,
                        rep,
                        step,
                        total / step as f64,
                        z
                    )
                    .expect("writing to a String cannot fail");
                }
            }
            finals.push(*series.last().expect("horizon is positive"));
        }
        let (mean, ci95) = mean_ci95(&finals);
        Ok((mean, ci95, csv))
    })();
    let runtime_s = start.elapsed().as_secs_f64();
    match attempt {
        Ok((mean, ci95, csv)) => CellResult { summary: CellSummary { config: out, mean, ci95, runtime_s, error: None }, csv },
        Err(e) => {
            log::warn!("cell {} failed: {e}", out.policy);
            CellResult {
                summary: CellSummary { config: out, mean: f64::NAN, ci95: f64::NAN, runtime_s, error: Some(e.to_string()) },
                csv: String::new(),
            }
        }
    }
}

pub const CSV_HEADER: &str = "scenario,policy,N,alpha,tau,seed,t,avg_reward,normalized_reward";

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub csv: PathBuf,
    pub summary_json: PathBuf,
    pub summary: ExperimentSummary,
}

/// Runs every cell on `threads` workers and writes `<scenario>.csv` and
/// `<scenario>_summary.json` into `out_dir`. Failed cells are recorded in
/// the summary and the run continues. The CSV depends only on the spec.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path, threads: usize) -> Result<ExperimentOutput> {
    spec.check()?;
    let source = spec.source()?;
    let cells = spec.cells()?;
    std::fs::create_dir_all(out_dir)?;
    let results: Vec<Mutex<Option<CellResult>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(spec, &source, cell);
                log::info!("{} {}: {:.4} ± {:.4}", spec.scenario, r.summary.config.policy, r.summary.mean, r.summary.ci95);
                *results[i].lock().expect("no worker panics while holding the lock") = Some(r);
            });
        }
    });
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut summaries = Vec::with_capacity(cells.len());
    for slot in results {
        let r = slot.into_inner().expect("lock not poisoned").expect("every cell ran");
        csv.push_str(&r.csv);
        summaries.push(r.summary);
    }
    let summary = ExperimentSummary { scenario: spec.scenario.clone(), cells: summaries };
    let csv_path = out_dir.join(format!("{}.csv", spec.scenario));
    let json_path = out_dir.join(format!("{}_summary.json", spec.scenario));
    std::fs::write(&csv_path, csv)?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(ExperimentOutput { csv: csv_path, summary_json: json_path, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_parse() {
        for name in builtin_scenarios() {
            let spec = ExperimentSpec::builtin(name).unwrap();
            assert_eq!(spec.scenario, name);
            assert!(!spec.cells().unwrap().is_empty());
        }
    }

    #[test]
    fn source_strings() {
        assert_eq!(InstanceSource::parse("mixed:12").unwrap(), (InstanceSource::Mixed, Some(12)));
        assert_eq!(
            InstanceSource::parse("random:7:5").unwrap(),
            (InstanceSource::Random { seed: 7, max_states: 10 }, Some(5))
        );
        assert!(InstanceSource::parse("hong:0").is_err());
        assert!(matches!(InstanceSource::parse("a.json").unwrap().0, InstanceSource::File(_)));
    }

    #[test]
    fn sweep_expands_over_tau() {
        let spec = ExperimentSpec::from_toml_str(
            r#"scenario = "t"
               instance = "yan"
               num_arms = [10, 20]
               tau = [1, 2, 3]
               policies = ["lp-update", "lp-priority"]"#,
        )
        .unwrap();
        assert_eq!(spec.cells().unwrap().len(), 2 * (3 + 1));
        assert!(ExperimentSpec::from_toml_str("scenario = \"t\"\ninstance = \"yan\"\npolicies = [\"lp-update\"]").is_err());
    }
}
