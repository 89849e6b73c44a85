// SPDX-License-Identifier: Apache-2.0

//! `carshare`: command-line front end for the simulator, the master
//! equation, the equilibrium solver and the verification suites.
//!
//! Exit codes: 0 success, 1 threshold or numerical failure, 2 configuration
//! error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;

use carshare_core::equilibrium::solve_equilibrium_with;
use carshare_core::harness::{
    all_available_measure, attraction_experiment, chaos_experiment, convergence_experiment,
    equilibrium_grid_experiment, identity_experiment, monotonicity_scan, stationarity_experiment, AttractionConfig,
    ChaosConfig, ConvergenceConfig, EquilibriumGridConfig, ExperimentReport, FillCase, IdentityConfig,
    MonotonicityConfig, StationarityConfig,
};
use carshare_core::meanfield::{integrate_strided, summarize, trajectory_csv};
use carshare_core::sim::{self, SimConfig};
use carshare_core::{Error, Measure, ModelParams};

use config::{ConfigError, InitialMeasure, RunConfig, Suite};

#[derive(Parser)]
#[command(name = "carshare", version, about = "Car-sharing network with double reservation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.nu=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite network and write trajectories.
    Simulate(Common),
    /// Integrate the master equation.
    Meanfield(Common),
    /// Solve for the product-form equilibrium at a given fill.
    Equilibrium(Common),
    /// Run the verification suites listed under `[verify]`.
    Verify(Common),
}

enum Failure {
    Config(String),
    Threshold(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(format!("configuration error: {}", e.0))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) | Error::MultipleRoots { .. } => Failure::Threshold(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(format!("configuration error: {e:#}"))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig, &Path) -> Outcome) = match &cli.command {
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Meanfield(c) => (c, cmd_meanfield),
        Command::Equilibrium(c) => (c, cmd_equilibrium),
        Command::Verify(c) => (c, cmd_verify),
    };
    let result =
        config::load(common.config.as_deref(), &common.overrides).map_err(Failure::from).and_then(|mut cfg| {
            if let Some(out) = &common.out {
                cfg.output.dir.clone_from(out);
            }
            let dir = cfg.output.dir.clone();
            fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            run(&cfg, &dir)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold(msg)) => {
            eprintln!("carshare: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("carshare: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<String> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(name.to_string())
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> anyhow::Result<()> {
    let mut manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": cfg.hash(),
        "config": cfg,
    });
    if let (Some(m), serde_json::Value::Object(e)) = (manifest.as_object_mut(), extra) {
        m.extend(e);
    }
    write(dir, "manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, dir: &Path) -> Outcome {
    let params = cfg.model()?;
    let sec = cfg.section("simulate", &cfg.simulate)?;
    if sec.replicas == 0 {
        return Err(Failure::Config("simulate.replicas must be >= 1".into()));
    }
    let mut files = Vec::new();
    let mut runs = Vec::new();
    let mut violations = 0u64;
    for r in 0..sec.replicas {
        let seed = sec.seed.wrapping_add(r as u64);
        let sim_cfg = SimConfig {
            params,
            n: sec.n,
            m: sec.m,
            horizon: sec.horizon,
            sample_times: sec.sample_times.clone(),
            seed,
            audit: sec.audit,
        };
        let traj = sim::run(&sim_cfg)?;
        // A parked car counts as y or z and a car on the road as x at its
        // destination, so the fleet is the total of x + y + z.
        let conserved =
            traj.samples.iter().all(|(_, snap)| snap.iter().map(|s| u64::from(s.fill())).sum::<u64>() == sec.m);
        violations += traj.stats.violations + u64::from(!conserved);
        if !sec.sample_times.is_empty() {
            let suffix = if sec.replicas == 1 { String::new() } else { format!("_{r}") };
            files.push(write(dir, &format!("trajectory{suffix}.csv"), &traj.to_csv())?);
            files.push(write(dir, &format!("empirical{suffix}.csv"), &traj.empirical_csv()?)?);
        }
        runs.push(json!({
            "replica": r,
            "seed": seed,
            "stats": traj.stats,
            "audit": { "cars": sec.m, "conserved_at_samples": conserved, "samples": traj.samples.len() },
        }));
    }
    write_manifest(dir, "simulate", cfg, json!({ "files": files, "runs": runs, "violations": violations }))
        .map_err(Failure::from)?;
    println!("simulate: {} replica(s), {violations} invariant violation(s)", sec.replicas);
    if violations > 0 {
        return Err(Failure::Threshold(format!("{violations} invariant violation(s)")));
    }
    Ok(())
}

fn initial_measure(init: &InitialMeasure, p: &ModelParams) -> Result<Measure, Failure> {
    Ok(match init {
        InitialMeasure::AllAvailable { s } => all_available_measure(*s, p.k)?,
        InitialMeasure::Equilibrium { s } => carshare_core::equilibrium::solve_equilibrium(p, *s)?.equilibrium()?,
        InitialMeasure::Point { state } => Measure::point_mass(config::point_state(*state), p.k)?,
        InitialMeasure::File { path } => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            let m = if path.extension().is_some_and(|e| e == "json") {
                Measure::from_json(&text)?
            } else {
                Measure::from_csv(&text)?
            };
            if m.k() != p.k {
                return Err(Failure::Config(format!("initial measure has K = {}, model has K = {}", m.k(), p.k)));
            }
            m
        }
    })
}

fn cmd_meanfield(cfg: &RunConfig, dir: &Path) -> Outcome {
    let params = cfg.model()?;
    let sec = cfg.section("meanfield", &cfg.meanfield)?;
    let m0 = initial_measure(&sec.initial, &params)?;
    let traj = integrate_strided(&m0, &params, sec.horizon, sec.dt, sec.stride)?;
    let summaries = traj
        .iter()
        .map(|(t, m)| Ok(json!({ "t": t, "summary": summarize(m, &params)? })))
        .collect::<Result<Vec<_>, Error>>()?;
    let files = vec![
        write(dir, "meanfield.csv", &trajectory_csv(&traj))?,
        write(dir, "summary.json", &serde_json::to_string_pretty(&summaries).map_err(anyhow::Error::from)?)?,
    ];
    let (t_end, m_end) = traj.last().expect("trajectory is never empty");
    write_manifest(dir, "meanfield", cfg, json!({ "files": files, "points": traj.len() }))?;
    println!(
        "meanfield: {} point(s), mean fill at t={t_end}: {}",
        traj.len(),
        carshare_core::measure::mean_fill(m_end)
    );
    Ok(())
}

fn cmd_equilibrium(cfg: &RunConfig, dir: &Path) -> Outcome {
    let params = cfg.model()?;
    let sec = cfg.section("equilibrium", &cfg.equilibrium)?;
    let report = solve_equilibrium_with(&params, sec.s, &sec.options)?;
    let pi = report.equilibrium()?;
    let files = vec![
        write(dir, "report.json", &serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)?,
        write(dir, "pi.csv", &pi.to_csv())?,
    ];
    write_manifest(dir, "equilibrium", cfg, json!({ "files": files }))?;
    println!(
        "equilibrium: rho1 = {}, rho2 = {}, max residual {:e}",
        report.rho.rho1,
        report.rho.rho2,
        report.residuals.max()
    );
    Ok(())
}

fn desk_params() -> ModelParams {
    ModelParams { lambda: 1.0, mu: 1.0, nu: 2.0, k: 3 }
}

fn default_convergence() -> ConvergenceConfig {
    ConvergenceConfig {
        params: desk_params(),
        s: 1.5,
        n_list: vec![10, 50, 250],
        replicas: 32,
        horizon: 5.0,
        sample_times: vec![],
        seed0: 1_000,
        dt: 0.01,
        slope_range: (-0.7, -0.3),
    }
}

fn default_suite(suite: Suite, v: &config::VerifySection) -> anyhow::Result<serde_json::Value> {
    let val = |x: serde_json::Result<serde_json::Value>| x.map_err(anyhow::Error::from);
    match suite {
        Suite::Identities => val(serde_json::to_value(v.identities.clone().unwrap_or_default())),
        Suite::EquilibriumGrid => {
            val(serde_json::to_value(v.equilibrium_grid.clone().unwrap_or(EquilibriumGridConfig {
                lambdas: vec![0.5, 1.0, 2.0],
                mus: vec![1.0],
                nus: vec![1.0, 10.0, 100.0],
                ks: vec![2, 3, 5],
                fill_fractions: vec![0.2, 0.5, 0.8],
                residual_tol: 1e-10,
            })))
        }
        Suite::Stationarity => val(serde_json::to_value(v.stationarity.clone().unwrap_or(StationarityConfig {
            params: ModelParams { nu: 10.0, ..desk_params() },
            s: 1.5,
            horizon: 10.0,
            dt: 0.01,
            tv_tol: 1e-6,
            order_horizon: 2.0,
            min_order: 3.5,
        }))),
        Suite::Convergence => val(serde_json::to_value(v.convergence.clone().unwrap_or_else(default_convergence))),
        Suite::Chaos => {
            let c = default_convergence();
            val(serde_json::to_value(v.chaos.clone().unwrap_or(ChaosConfig {
                params: c.params,
                s: c.s,
                n_list: c.n_list,
                replicas: c.replicas,
                horizon: c.horizon,
                seed0: 2_000,
                dt: c.dt,
            })))
        }
        Suite::Attraction => val(serde_json::to_value(v.attraction.clone().unwrap_or(AttractionConfig {
            params: ModelParams { nu: 10.0, ..desk_params() },
            s: 1.5,
            perturbation: 0.1,
            horizon: 50.0,
            dt: 0.01,
            final_tv_tol: 1e-4,
            report_every: 1.0,
        }))),
        Suite::Monotonicity => {
            let fill_cases = [0.1, 1.0, 10.0, 100.0]
                .into_iter()
                .flat_map(|nu| [1, 3, 6].map(|k| FillCase { lambda: 1.0, mu: 1.0, nu, k }))
                .collect();
            val(serde_json::to_value(v.monotonicity.clone().unwrap_or(MonotonicityConfig {
                a_list: vec![0.5, 1.0, 2.0, 5.0],
                k_list: (1..=6).collect(),
                grid_step: 0.1,
                grid_max: 5.0,
                curve_points: 200,
                fill_cases,
                enforce_ratio: 10.0,
            })))
        }
    }
}

fn run_suite(suite: Suite, v: &config::VerifySection) -> Result<ExperimentReport, Failure> {
    let value = default_suite(suite, v)?;
    let exec = v.execution;
    let parse = |e: serde_json::Error| Failure::Config(format!("verify.{}: {e}", suite.name()));
    Ok(match suite {
        Suite::Identities => identity_experiment(&serde_json::from_value::<IdentityConfig>(value).map_err(parse)?)?,
        Suite::EquilibriumGrid => {
            equilibrium_grid_experiment(&serde_json::from_value::<EquilibriumGridConfig>(value).map_err(parse)?, exec)?
        }
        Suite::Stationarity => {
            stationarity_experiment(&serde_json::from_value::<StationarityConfig>(value).map_err(parse)?)?
        }
        Suite::Convergence => {
            convergence_experiment(&serde_json::from_value::<ConvergenceConfig>(value).map_err(parse)?, exec)?
        }
        Suite::Chaos => chaos_experiment(&serde_json::from_value::<ChaosConfig>(value).map_err(parse)?, exec)?,
        Suite::Attraction => attraction_experiment(&serde_json::from_value::<AttractionConfig>(value).map_err(parse)?)?,
        Suite::Monotonicity => {
            monotonicity_scan(&serde_json::from_value::<MonotonicityConfig>(value).map_err(parse)?, exec)?
        }
    })
}

fn cmd_verify(cfg: &RunConfig, dir: &Path) -> Outcome {
    let empty = config::VerifySection::default();
    let v = cfg.verify.as_ref().unwrap_or(&empty);
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for &suite in &v.suites {
        let report = run_suite(suite, v)?;
        println!("{} {}", if report.passed { "PASS" } else { "FAIL" }, suite.name());
        files.push(write(dir, &format!("{}.csv", suite.name()), &report.to_csv())?);
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed);
    let summary = json!({ "passed": passed, "suites": reports });
    files.push(write(dir, "verify.json", &serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?)?);
    write_manifest(dir, "verify", cfg, json!({ "files": files, "passed": passed }))?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(Failure::Threshold(format!("failed suites: {}", failed.join(", "))))
    }
}
