use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rmab::analysis::{self, brute_force_optimal, ergodicity_report, jensen_gap, theorem_bound};
use rmab::experiment::{builtin_scenarios, run_experiment, ExperimentSpec, InstanceSource, CSV_HEADER};
use rmab::fixed_point::{solve_fixed_point, solve_fixed_point_decomposed};
use rmab::horizon::{plan_with, PlanMethod, PlanOptions};
use rmab::model::{one_hot, BudgetMode, Instance, ProductDistribution};
use rmab::policies::PolicyKind;
use rmab::rounding::RoundingMode;
use rmab::simulator::{normalized_metric, normalized_series, run_replicate};
use rmab::wmdp::{self, WmdpInstance};
use serde_json::json;

#[derive(Parser)]
#[command(name = "rmab", version, about = "Plan, simulate and analyze heterogeneous restless bandits")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed for simulations and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Independent replicates per configuration.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    #[arg(long, global = true, value_enum)]
    rounding: Option<Rounding>,
    #[arg(long, global = true, value_enum)]
    budget_mode: Option<Budget>,
    /// Output file, or directory for `experiment` and `simulate`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rounding {
    Randomized,
    WaterFilling,
}

impl From<Rounding> for RoundingMode {
    fn from(r: Rounding) -> Self {
        match r {
            Rounding::Randomized => RoundingMode::Randomized,
            Rounding::WaterFilling => RoundingMode::WaterFilling,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Budget {
    AtMost,
    Exactly,
}

impl From<Budget> for BudgetMode {
    fn from(b: Budget) -> Self {
        match b {
            Budget::AtMost => BudgetMode::AtMost,
            Budget::Exactly => BudgetMode::Exactly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Flat,
    Cg,
    Auto,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the stationary relaxation.
    SolveFixedPoint {
        /// `hong[:N]`, `yan[:N]`, `mixed[:N]`, `random:SEED[:N]` or a JSON path.
        instance: String,
        /// Use the λ-bisection solver instead of the direct LP.
        #[arg(long)]
        decomposed: bool,
        /// Read the instance as a weakly coupled MDP.
        #[arg(long)]
        wmdp: bool,
    },
    /// Solve the τ-horizon LP from a joint state or the uniform distribution.
    Plan {
        instance: String,
        #[arg(long)]
        tau: usize,
        /// Comma-separated joint state; uniform per arm if omitted.
        #[arg(long)]
        state: Option<String>,
        #[arg(long, value_enum, default_value = "auto")]
        method: Method,
        #[arg(long)]
        zero_terminal: bool,
    },
    /// Roll out a policy and write per-step metrics.
    Simulate {
        instance: String,
        /// `lp-update-<τ>`, `lp-priority`, `id-reassign` or `random`.
        #[arg(long, default_value = "lp-update-4")]
        policy: String,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Simulate a weakly coupled MDP file with LP-update at this τ.
        #[arg(long)]
        wmdp_tau: Option<usize>,
        /// Shrinkage for the weakly coupled rounding; defaults to √(log(Nτ²)/(2N)).
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Ergodicity coefficients, bounds, Jensen gaps and brute-force optima.
    Analyze {
        instance: String,
        /// Scan ρ_1..ρ_K.
        #[arg(long)]
        rho_k: Option<usize>,
        /// Allow K above the default cap.
        #[arg(long)]
        force: bool,
        /// Jensen gap at this horizon from the uniform distribution.
        #[arg(long)]
        jensen: Option<usize>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Theorem bound at this τ, using the first positive ρ_k up to 8.
        #[arg(long)]
        theorem_bound: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long)]
        brute_force: bool,
    },
    /// Run a built-in scenario or a TOML spec.
    Experiment {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// List the built-in scenarios.
    ListScenarios,
}

fn load_instance(spec: &str, global: &Global) -> Result<Instance> {
    let (source, n) = InstanceSource::parse(spec)?;
    let mut instance = source.build(n).with_context(|| format!("loading instance `{spec}`"))?;
    if let Some(b) = global.budget_mode {
        instance = instance.with_budget_mode(b.into());
    }
    Ok(instance)
}

fn emit(global: &Global, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match &global.out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => print_stdout(&text)?,
    }
    Ok(())
}

/// Prints a line, treating a closed pipe as success.
fn print_stdout(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn parse_state(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad state entry `{t}`")))
        .collect()
}

fn solve(global: &Global, instance: &str, decomposed: bool, as_wmdp: bool) -> Result<()> {
    if as_wmdp {
        let inst = WmdpInstance::load_file(instance)?;
        let fp = wmdp::wmdp_fixed_point(&inst)?;
        return emit(
            global,
            &json!({
                "g_star": fp.gain,
                "mu_sup_norm": fp.mu_sup_norm(),
                "feasible_action": wmdp::find_feasible_action(&inst),
                "fixed_point": fp,
            }),
        );
    }
    let inst = load_instance(instance, global)?;
    let fp = if decomposed { solve_fixed_point_decomposed(&inst, 1e-10)? } else { solve_fixed_point(&inst)? };
    emit(
        global,
        &json!({
            "g_star": fp.gain,
            "g_star_raw": inst.reward_scale.to_raw(fp.gain),
            "lambda": fp.lambda_rel,
            "mu_sup_norm": fp.mu_sup_norm(),
            "fixed_point": fp,
        }),
    )
}

fn plan_cmd(global: &Global, instance: &str, tau: usize, state: Option<&str>, method: Method, zero_terminal: bool) -> Result<()> {
    let inst = load_instance(instance, global)?;
    let fp = solve_fixed_point(&inst)?;
    let x = match state {
        Some(s) => one_hot(&parse_state(s)?, &inst)?,
        None => ProductDistribution::uniform(&inst),
    };
    let method = match method {
        Method::Flat => PlanMethod::Flat,
        Method::Cg => PlanMethod::ColumnGeneration,
        Method::Auto => PlanMethod::Auto,
    };
    let plan = plan_with(&inst, &x, tau, &fp.mu, PlanOptions { method, zero_terminal })?;
    emit(global, &json!({ "value": plan.value, "g_star": fp.gain, "plan": plan }))
}

fn write_csv(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "{CSV_HEADER}")?;
    f.write_all(body.as_bytes())?;
    Ok(path)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    global: &Global,
    instance: &str,
    policy: &str,
    horizon: usize,
    stride: usize,
    wmdp_tau: Option<usize>,
    epsilon: Option<f64>,
) -> Result<()> {
    if stride == 0 {
        bail!("stride must be positive");
    }
    let seed = global.seed.unwrap_or(0);
    let replicates = global.replicates.unwrap_or(20);
    if let Some(tau) = wmdp_tau {
        let inst = WmdpInstance::load_file(instance)?;
        let fp = wmdp::wmdp_fixed_point(&inst)?;
        let mut pol = wmdp::lp_update_policy_wmdp(&inst, tau, epsilon)?;
        let records = (0..replicates as u64)
            .map(|r| wmdp::run_wmdp(&inst, &mut pol, horizon, seed, r))
            .collect::<rmab::Result<Vec<_>>>()?;
        let m = normalized_metric(&records, fp.gain)?;
        return emit(
            global,
            &json!({ "policy": pol.label(), "epsilon": pol.epsilon(), "g_star": fp.gain, "mean": m.final_mean, "ci95": m.final_ci95 }),
        );
    }
    let kind: PolicyKind = policy.parse()?;
    let inst = load_instance(instance, global)?;
    let fp = solve_fixed_point(&inst)?;
    let rounding = global.rounding.map(RoundingMode::from).unwrap_or_default();
    let mut pol = kind.build(&inst, &fp, rounding)?;
    let mut records = Vec::with_capacity(replicates);
    let mut csv = String::new();
    let tau = kind.tau().map(|t| t.to_string()).unwrap_or_default();
    for r in 0..replicates as u64 {
        let rec = run_replicate(&inst, pol.as_mut(), horizon, seed, r, false, None)?;
        let series = normalized_series(&rec, fp.gain);
        let mut total = 0.0;
        for (t, (rw, z)) in rec.rewards.iter().zip(&series).enumerate() {
            total += rw;
            if (t + 1) % stride == 0 || t + 1 == horizon {
                csv.push_str(&format!(
                    "simulate,{kind},{},{},{tau},{r},{},{},{z}\n",
                    inst.num_arms(),
                    inst.alpha,
                    t + 1,
                    total / (t + 1) as f64
                ));
            }
        }
        records.push(rec);
    }
    let m = normalized_metric(&records, fp.gain)?;
    let summary = json!({
        "policy": kind.to_string(),
        "N": inst.num_arms(),
        "alpha": inst.alpha,
        "g_star": fp.gain,
        "mean": m.final_mean,
        "ci95": m.final_ci95,
    });
    match &global.out {
        Some(dir) => {
            let path = write_csv(dir, "simulate.csv", &csv)?;
            std::fs::write(dir.join("simulate_summary.json"), serde_json::to_string_pretty(&summary)?)?;
            eprintln!("wrote {}", path.display());
        }
        None => print_stdout(&serde_json::to_string_pretty(&summary)?)?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    global: &Global,
    instance: &str,
    rho_k: Option<usize>,
    force: bool,
    jensen: Option<usize>,
    samples: usize,
    bound_tau: Option<usize>,
    epsilon: f64,
    brute_force: bool,
) -> Result<()> {
    let inst = load_instance(instance, global)?;
    let fp = solve_fixed_point(&inst)?;
    let mut out = serde_json::Map::new();
    out.insert("g_star".into(), json!(fp.gain));
    out.insert("mu_sup_norm".into(), json!(fp.mu_sup_norm()));
    if let Some(k) = rho_k {
        let report = ergodicity_report(&inst, k, force)?;
        if let Some((k, rho)) = report.positive() {
            out.insert("mu_bound".into(), json!(analysis::mu_bound(k, rho, inst.alpha)?));
        }
        out.insert("ergodicity".into(), serde_json::to_value(&report)?);
    }
    if let Some(tau) = bound_tau {
        let report = ergodicity_report(&inst, analysis::DEFAULT_K_CAP, false)?;
        match report.positive() {
            Some((k, rho)) => {
                let b = theorem_bound(epsilon, tau, k, rho, fp.mu_sup_norm(), inst.num_arms(), inst.alpha)?;
                out.insert("vacuous".into(), json!(b.is_vacuous(fp.gain)));
                out.insert("theorem_bound".into(), serde_json::to_value(&b)?);
            }
            None => {
                out.insert("theorem_bound".into(), json!(null));
                log::warn!("no positive ρ_k up to k = {}", analysis::DEFAULT_K_CAP);
            }
        }
    }
    if let Some(t) = jensen {
        let x = ProductDistribution::uniform(&inst);
        let est = jensen_gap(&inst, &fp, &x, t, samples, global.seed.unwrap_or(0))?;
        out.insert("jensen".into(), serde_json::to_value(&est)?);
    }
    if brute_force {
        let r = brute_force_optimal(&inst, 1e-9, 1_000_000)?;
        out.insert("brute_force".into(), serde_json::to_value(&r)?);
    }
    emit(global, &serde_json::Value::Object(out))
}

fn experiment(global: &Global, scenario: &str, threads: Option<usize>, stride: Option<usize>, horizon: Option<usize>) -> Result<()> {
    let mut spec = ExperimentSpec::resolve(scenario)?;
    if let Some(s) = global.seed {
        spec.seed = s;
    }
    if let Some(r) = global.replicates {
        spec.replicates = r;
    }
    if let Some(r) = global.rounding {
        spec.rounding = r.into();
    }
    if let Some(b) = global.budget_mode {
        spec.budget_mode = b.into();
    }
    if let Some(s) = stride {
        spec.stride = s;
    }
    if let Some(h) = horizon {
        spec.horizon = h;
    }
    let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let dir = global.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let out = run_experiment(&spec, &dir, threads)?;
    for cell in &out.summary.cells {
        match &cell.error {
            None => eprintln!(
                "{:<14} N={:<4} alpha={:<5} {:.4} ± {:.4}  ({:.1}s)",
                cell.config.policy, cell.config.num_arms, cell.config.alpha, cell.mean, cell.ci95, cell.runtime_s
            ),
            Some(e) => eprintln!("{:<14} N={:<4} failed: {e}", cell.config.policy, cell.config.num_arms),
        }
    }
    eprintln!("wrote {} and {}", out.csv.display(), out.summary_json.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    match cli.command {
        Command::SolveFixedPoint { instance, decomposed, wmdp } => solve(g, &instance, decomposed, wmdp),
        Command::Plan { instance, tau, state, method, zero_terminal } => {
            plan_cmd(g, &instance, tau, state.as_deref(), method, zero_terminal)
        }
        Command::Simulate { instance, policy, horizon, stride, wmdp_tau, epsilon } => {
            simulate(g, &instance, &policy, horizon, stride, wmdp_tau, epsilon)
        }
        Command::Analyze { instance, rho_k, force, jensen, samples, theorem_bound, epsilon, brute_force } => {
            analyze(g, &instance, rho_k, force, jensen, samples, theorem_bound, epsilon, brute_force)
        }
        Command::Experiment { scenario, threads, stride, horizon } => experiment(g, &scenario, threads, stride, horizon),
        Command::ListScenarios => {
            for name in builtin_scenarios() {
                let spec = ExperimentSpec::builtin(name)?;
                print_stdout(&format!("{name:<6} {}", spec.description))?;
            }
            Ok(())
        }
    }
}
