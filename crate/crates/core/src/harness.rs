// SPDX-License-Identifier: Apache-2.0

//! Numerical experiments tying the simulator, the master equation and the
//! equilibrium solver together.
//!
//! Every experiment is a pure function of its configuration. Work units
//! (replicas, grid points) run through [`Execution`] and are reduced in
//! input order, so the reports do not depend on the execution mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    f_simple, fill_coefficient, fill_on_curve, g_mean, product_form, scaled_load, solve_equilibrium, solve_phi,
    RateRatios, TwoQueueForm,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::meanfield::{integrate_final, max_stable_dt, MasterEquation};
use crate::measure::{self, mean_fill, tv_distance, Measure, PairMeasure};
use crate::model::{enumerate_states, index_of, ModelParams, StationState};
use crate::sim::{self, SimConfig};

/// One line of a metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    /// Seeds of the runs aggregated into this row (empty for deterministic rows).
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricRow {
    fn new(label: impl Into<String>) -> Self {
        MetricRow { label: label.into(), seeds: Vec::new(), metrics: BTreeMap::new() }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }
}

/// Ordinary least squares fit of `ln y` against `ln x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residual sum of squares in log space.
    pub rss: f64,
    pub points: usize,
}

pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("log-log fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Numerical("log-log fit needs positive finite data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(SlopeFit { slope, intercept, rss, points: lx.len() })
}

/// A pass/fail check against a declared threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub passed: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, limit: format!("< {bound:e}"), passed: value < bound }
    }

    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, limit: format!("> {bound:e}"), passed: value > bound }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Check { name: name.into(), value, limit: format!("in [{lo}, {hi}]"), passed: (lo..=hi).contains(&value) }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Check { name: name.into(), value: f64::from(u8::from(ok)), limit: "= 1".into(), passed: ok }
    }
}

/// Outcome of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: serde_json::Value,
    pub rows: Vec<MetricRow>,
    pub fit: Option<SlopeFit>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub passed: bool,
}

impl ExperimentReport {
    fn new(name: &str, config: &impl Serialize) -> Self {
        ExperimentReport {
            name: name.to_string(),
            config: serde_json::to_value(config).expect("configs serialize"),
            rows: Vec::new(),
            fit: None,
            checks: Vec::new(),
            notes: Vec::new(),
            passed: false,
        }
    }

    fn finish(mut self) -> Self {
        self.passed = self.checks.iter().all(|c| c.passed);
        self
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Metric table as CSV: `label,seeds,<metric...>` with the union of
    /// metric names as columns.
    pub fn to_csv(&self) -> String {
        let mut keys: Vec<&str> = self.rows.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
        keys.sort_unstable();
        keys.dedup();
        let mut out = String::from("label,seeds");
        for k in &keys {
            let _ = write!(out, ",{k}");
        }
        out.push('\n');
        for row in &self.rows {
            let seeds: Vec<String> = row.seeds.iter().map(u64::to_string).collect();
            let _ = write!(out, "{},{}", row.label, seeds.join(";"));
            for k in &keys {
                match row.metrics.get(*k) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Seed of replica `r` at network size `n`.
pub fn replica_seed(seed0: u64, n: usize, r: usize) -> u64 {
    seed0.wrapping_add((n as u64) << 24).wrapping_add(r as u64)
}

/// Evolves `m0` through the increasing `times` (starting at 0) with steps no
/// larger than `dt`, returning the measure at each time.
pub fn evolve_to_times(m0: &Measure, p: &ModelParams, times: &[f64], dt: f64) -> Result<Vec<Measure>> {
    let mut out = Vec::with_capacity(times.len());
    let mut cur = m0.clone();
    let mut t_cur = 0.0;
    for &t in times {
        let gap = t - t_cur;
        if gap < 0.0 {
            return Err(Error::Config("evaluation times must be nondecreasing from 0".into()));
        }
        if gap > 0.0 {
            let steps = (gap / dt).ceil().max(1.0);
            cur = integrate_final(&cur, p, gap, gap / steps)?;
        }
        out.push(cur.clone());
        t_cur = t;
    }
    Ok(out)
}

/// Measure of an all-available network with mean fill `s`: stations hold
/// `floor(s)` or `ceil(s)` cars.
pub fn all_available_measure(s: f64, k: u32) -> Result<Measure> {
    if !(0.0..=k as f64).contains(&s) {
        return Err(Error::Domain(format!("fill {s} outside [0, {k}]")));
    }
    let lo = s.floor() as u32;
    let frac = s - lo as f64;
    let mut probs = vec![0.0; crate::model::state_count(k)];
    probs[index_of(StationState::new(0, 0, lo, 0), k)?] += 1.0 - frac;
    if frac > 0.0 {
        probs[index_of(StationState::new(0, 0, lo + 1, 0), k)?] += frac;
    }
    Measure::new(k, probs)
}

fn fleet_size(n: usize, s: f64, k: u32) -> Result<u64> {
    let m = (n as f64 * s).round();
    if m < 0.0 || m > (n as u64 * k as u64) as f64 {
        return Err(Error::Config(format!("fleet round({n}·{s}) does not fit {n} stations of capacity {k}")));
    }
    Ok(m as u64)
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

// ---------------------------------------------------------------------------
// Mean-field convergence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub params: ModelParams,
    pub s: f64,
    pub n_list: Vec<usize>,
    pub replicas: usize,
    pub horizon: f64,
    /// Times at which TV is reported; 0 and `horizon` are always added.
    #[serde(default)]
    pub sample_times: Vec<f64>,
    pub seed0: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_slope_range")]
    pub slope_range: (f64, f64),
}

fn default_dt() -> f64 {
    0.01
}

fn default_slope_range() -> (f64, f64) {
    (-0.7, -0.3)
}

struct ReplicaOutcome {
    seed: u64,
    /// Per sample time: (empirical, limit).
    pairs: Vec<(Measure, Measure)>,
    pair_at_horizon: Option<PairMeasure>,
    stats: sim::RunStats,
}

/// Shared settings of a batch of replicas.
struct ReplicaPlan<'a> {
    params: ModelParams,
    s: f64,
    n_list: &'a [usize],
    replicas: usize,
    horizon: f64,
    times: Vec<f64>,
    seed0: u64,
    dt: f64,
    with_pairs: bool,
}

impl ReplicaPlan<'_> {
    fn run_one(&self, n: usize, m: u64, seed: u64) -> Result<ReplicaOutcome> {
        let p = &self.params;
        let cfg =
            SimConfig { params: *p, n, m, horizon: self.horizon, sample_times: self.times.clone(), seed, audit: true };
        let traj = sim::run(&cfg)?;
        let empirical: Vec<Measure> =
            traj.samples.iter().map(|(_, snap)| sim::empirical_measure(snap, p.k)).collect::<Result<_>>()?;
        let limit = evolve_to_times(&empirical[0], p, &self.times, self.dt)?;
        let pair_at_horizon = if self.with_pairs {
            Some(sim::pair_empirical(&traj.samples.last().expect("horizon sampled").1, p.k)?)
        } else {
            None
        };
        Ok(ReplicaOutcome {
            seed,
            pairs: empirical.into_iter().zip(limit).collect(),
            pair_at_horizon,
            stats: traj.stats,
        })
    }

    /// Outcomes grouped by network size, replicas in seed order.
    fn run(&self, exec: Execution) -> Result<Vec<Vec<ReplicaOutcome>>> {
        let p = &self.params;
        p.validate()?;
        if self.replicas == 0 || self.n_list.is_empty() {
            return Err(Error::Config("need at least one replica and one network size".into()));
        }
        if self.dt > max_stable_dt(p) {
            return Err(Error::Config(format!(
                "dt = {} violates the stability guard (max {})",
                self.dt,
                max_stable_dt(p)
            )));
        }
        let replicas = self.replicas;
        let seed0 = self.seed0;
        let units: Vec<(usize, u64, u64)> = self
            .n_list
            .iter()
            .map(|&n| fleet_size(n, self.s, p.k).map(|m| (n, m)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flat_map(|(n, m)| (0..replicas).map(move |r| (n, m, replica_seed(seed0, n, r))))
            .collect();
        let results = exec.map(&units, |&(n, m, seed)| self.run_one(n, m, seed));
        let mut flat = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
        Ok(self.n_list.iter().map(|_| flat.by_ref().take(replicas).collect()).collect())
    }
}

fn grid_with_ends(sample_times: &[f64], horizon: f64) -> Result<Vec<f64>> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Config(format!("horizon must be > 0, got {horizon}")));
    }
    let mut times: Vec<f64> = sample_times.to_vec();
    times.push(0.0);
    times.push(horizon);
    if times.iter().any(|t| !(0.0..=horizon).contains(t)) {
        return Err(Error::Config("sample_times must lie in [0, horizon]".into()));
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    Ok(times)
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Distance between the empirical measure of the finite network and the
/// solution of the master equation started from the same initial measure.
///
/// The headline metric `tv_T` is the replica mean of the per-replica TV at the
/// horizon. `tv_pooled_T` is the TV between the replica averages.
pub fn convergence_experiment(cfg: &ConvergenceConfig, exec: Execution) -> Result<ExperimentReport> {
    let times = grid_with_ends(&cfg.sample_times, cfg.horizon)?;
    let plan = ReplicaPlan {
        params: cfg.params,
        s: cfg.s,
        n_list: &cfg.n_list,
        replicas: cfg.replicas,
        horizon: cfg.horizon,
        times: times.clone(),
        seed0: cfg.seed0,
        dt: cfg.dt,
        with_pairs: false,
    };
    let outcomes = plan.run(exec)?;
    let mut report = ExperimentReport::new("convergence", cfg);
    let mut tv_at_horizon = Vec::new();
    let mut violations = 0u64;
    for (&n, runs) in cfg.n_list.iter().zip(&outcomes) {
        let mut row = MetricRow::new(format!("N={n}"));
        row.seeds = runs.iter().map(|r| r.seed).collect();
        row.metrics.insert("N".into(), n as f64);
        for (ti, t) in times.iter().enumerate() {
            let tvs: Vec<f64> =
                runs.iter().map(|r| tv_distance(&r.pairs[ti].0, &r.pairs[ti].1)).collect::<Result<_>>()?;
            let mean = tvs.iter().sum::<f64>() / tvs.len() as f64;
            let emp = measure::average(&runs.iter().map(|r| r.pairs[ti].0.clone()).collect::<Vec<_>>())?;
            let lim = measure::average(&runs.iter().map(|r| r.pairs[ti].1.clone()).collect::<Vec<_>>())?;
            let pooled = tv_distance(&emp, &lim)?;
            row.metrics.insert(format!("tv@{t}"), mean);
            if ti == times.len() - 1 {
                row.metrics.insert("tv_T".into(), mean);
                row.metrics.insert("tv_T_sd".into(), std_dev(&tvs));
                row.metrics.insert("tv_pooled_T".into(), pooled);
                tv_at_horizon.push(mean);
            }
            if ti == 0 {
                row.metrics.insert("tv_0".into(), mean);
            }
        }
        let v: u64 = runs.iter().map(|r| r.stats.violations).sum();
        violations += v;
        row.metrics.insert("events".into(), runs.iter().map(|r| r.stats.events).sum::<u64>() as f64);
        row.metrics.insert("blocked".into(), runs.iter().map(|r| r.stats.blocked).sum::<u64>() as f64);
        row.metrics.insert("violations".into(), v as f64);
        report.rows.push(row);
    }
    let tv0 = report.rows.iter().map(|r| r.metrics["tv_0"]).fold(0.0, f64::max);
    report.checks.push(Check::below("tv_at_zero", tv0, 1e-12));
    report.checks.push(Check::holds("tv_T_strictly_decreasing", strictly_decreasing(&tv_at_horizon)));
    if cfg.n_list.len() >= 3 {
        let ns: Vec<f64> = cfg.n_list.iter().map(|&n| n as f64).collect();
        let fit = loglog_fit(&ns, &tv_at_horizon)?;
        report.checks.push(Check::within("loglog_slope", fit.slope, cfg.slope_range.0, cfg.slope_range.1));
        report.fit = Some(fit);
    } else {
        report.notes.push("fewer than 3 network sizes: slope not fitted".into());
    }
    report.checks.push(Check::below("invariant_violations", violations as f64, 0.5));
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// Propagation of chaos
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    pub params: ModelParams,
    pub s: f64,
    pub n_list: Vec<usize>,
    pub replicas: usize,
    pub horizon: f64,
    pub seed0: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

/// Distance between the law of two distinct stations and the product of
/// the one-station limit laws at the horizon.
///
/// `tv_pair_T` compares the replica-averaged pair measure with the
/// replica-averaged products `Λ(T) ⊗ Λ(T)`.
pub fn chaos_experiment(cfg: &ChaosConfig, exec: Execution) -> Result<ExperimentReport> {
    if let Some(&n) = cfg.n_list.iter().find(|&&n| n < 2) {
        return Err(Error::Config(format!("pair measures need N >= 2, got {n}")));
    }
    let times = grid_with_ends(&[], cfg.horizon)?;
    let plan = ReplicaPlan {
        params: cfg.params,
        s: cfg.s,
        n_list: &cfg.n_list,
        replicas: cfg.replicas,
        horizon: cfg.horizon,
        times,
        seed0: cfg.seed0,
        dt: cfg.dt,
        with_pairs: true,
    };
    let outcomes = plan.run(exec)?;
    let mut report = ExperimentReport::new("chaos", cfg);
    let mut tvs_at_horizon = Vec::new();
    let mut worst_marginal: f64 = 0.0;
    let mut violations = 0u64;
    for (&n, runs) in cfg.n_list.iter().zip(&outcomes) {
        let mut pairs = Vec::with_capacity(runs.len());
        let mut products = Vec::with_capacity(runs.len());
        let mut per_replica = Vec::with_capacity(runs.len());
        for r in runs {
            let pair = r.pair_at_horizon.clone().expect("pairs requested");
            let (emp, lim) = r.pairs.last().expect("horizon sampled");
            for (a, b) in pair.first_marginal().iter().zip(emp.probs()) {
                worst_marginal = worst_marginal.max((a - b).abs());
            }
            for (a, b) in pair.second_marginal().iter().zip(emp.probs()) {
                worst_marginal = worst_marginal.max((a - b).abs());
            }
            let prod = PairMeasure::product(lim, lim)?;
            per_replica.push(pair.tv_distance(&prod)?);
            pairs.push(pair);
            products.push(prod);
            violations += r.stats.violations;
        }
        let tv = PairMeasure::average(&pairs)?.tv_distance(&PairMeasure::average(&products)?)?;
        tvs_at_horizon.push(tv);
        let mut row = MetricRow::new(format!("N={n}"))
            .with("N", n as f64)
            .with("tv_pair_T", tv)
            .with("tv_pair_T_per_replica", per_replica.iter().sum::<f64>() / per_replica.len() as f64);
        row.seeds = runs.iter().map(|r| r.seed).collect();
        report.rows.push(row);
    }
    report.checks.push(Check::holds("tv_pair_T_strictly_decreasing", strictly_decreasing(&tvs_at_horizon)));
    report.checks.push(Check::below("marginal_consistency", worst_marginal, 1e-12));
    report.checks.push(Check::below("invariant_violations", violations as f64, 0.5));
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// Attraction of the equilibrium
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttractionConfig {
    pub params: ModelParams,
    pub s: f64,
    /// TV distance between the perturbed start and the equilibrium.
    pub perturbation: f64,
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_attraction_tol")]
    pub final_tv_tol: f64,
    /// Report TV every this many time units.
    #[serde(default = "default_report_every")]
    pub report_every: f64,
}

fn default_attraction_tol() -> f64 {
    1e-4
}

fn default_report_every() -> f64 {
    1.0
}

/// `π` pushed forward by `(w, x, y, z) ↦ (0, 0, x + y + z, 0)`: every
/// station's mass moved to the all-available state of equal fill.
pub fn fill_preserving_perturber(pi: &Measure) -> Result<Measure> {
    let k = pi.k();
    let mut probs = vec![0.0; pi.len()];
    for (s, p) in enumerate_states(k).into_iter().zip(pi.probs()) {
        probs[index_of(StationState::new(0, 0, s.fill(), 0), k)?] += p;
    }
    Measure::new(k, probs)
}

/// Perturbs the equilibrium by `size` in TV without changing the mean fill
/// or the balance `E w = E z`, then integrates back.
pub fn attraction_experiment(cfg: &AttractionConfig) -> Result<ExperimentReport> {
    let p = cfg.params;
    let eq = solve_equilibrium(&p, cfg.s)?;
    let pi = eq.equilibrium()?;
    let perturber = fill_preserving_perturber(&pi)?;
    let gap = tv_distance(&pi, &perturber)?;
    if !(0.0..=gap).contains(&cfg.perturbation) {
        return Err(Error::Config(format!(
            "perturbation {} is outside the reachable range [0, {gap}]",
            cfg.perturbation
        )));
    }
    let weight = if cfg.perturbation == 0.0 { 0.0 } else { cfg.perturbation / gap };
    let m0 = pi.mix(&perturber, weight)?;
    let target = mean_fill(&pi);
    let fill0 = mean_fill(&m0);
    if (fill0 - target).abs() > 1e-12 {
        return Err(Error::Numerical(format!("perturbed start has fill {fill0}, equilibrium has {target}")));
    }

    let stride_steps = (cfg.report_every / cfg.dt).round().max(1.0);
    let mut times = Vec::new();
    let mut t = 0.0;
    let mut i = 0.0;
    while t < cfg.horizon {
        times.push(t);
        i += 1.0;
        t = (i * stride_steps * cfg.dt).min(cfg.horizon);
    }
    times.push(cfg.horizon);
    let traj = evolve_to_times(&m0, &p, &times, cfg.dt)?;

    let mut report = ExperimentReport::new("attraction", cfg);
    let mut tvs = Vec::with_capacity(traj.len());
    let mut fill_dev: f64 = 0.0;
    for (t, m) in times.iter().zip(&traj) {
        let tv = tv_distance(m, &pi)?;
        fill_dev = fill_dev.max((mean_fill(m) - target).abs());
        tvs.push(tv);
        report.rows.push(MetricRow::new(format!("t={t}")).with("t", *t).with("tv", tv).with("mean_fill", mean_fill(m)));
    }
    let tail = &tvs[tvs.len() / 2..];
    let tail_monotone = tail.windows(2).all(|w| w[1] <= w[0]);
    report.notes.push(format!("equilibrium rho = {:?}, perturber weight {weight}", eq.rho));
    if !tail_monotone {
        report.notes.push("TV is not monotone over the second half of the run".into());
    }
    report.checks.push(Check::below("initial_tv_error", (tvs[0] - cfg.perturbation).abs(), 1e-12));
    report.checks.push(Check::below("final_tv", *tvs.last().expect("nonempty"), cfg.final_tv_tol));
    report.checks.push(Check::below("mean_fill_drift", fill_dev, 1e-9));
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// Monotonicity scans
// ---------------------------------------------------------------------------

/// One parameter set for the fill-along-curve scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FillCase {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub k: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicityConfig {
    pub a_list: Vec<f64>,
    pub k_list: Vec<u32>,
    /// Spacing of the `(x, y)` grid for `g_K`, which spans `[step, grid_max]²`.
    pub grid_step: f64,
    #[serde(default = "default_grid_max")]
    pub grid_max: f64,
    /// Points on each curve scan.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
    #[serde(default)]
    pub fill_cases: Vec<FillCase>,
    /// Fill cases with `nu >= enforce_ratio · mu` must be monotone; the
    /// others are only reported.
    #[serde(default = "default_enforce_ratio")]
    pub enforce_ratio: f64,
}

fn default_grid_max() -> f64 {
    5.0
}

fn default_curve_points() -> usize {
    200
}

fn default_enforce_ratio() -> f64 {
    10.0
}

/// Central difference with a step scaled to the argument.
fn central_diff(f: impl Fn(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let h = 1e-5 * x.abs().max(1e-3);
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn interior_grid(a: f64, points: usize) -> Vec<f64> {
    (1..=points).map(|i| a * i as f64 / (points + 1) as f64).collect()
}

/// Finite-difference checks of the monotonicity claims the solver relies on.
pub fn monotonicity_scan(cfg: &MonotonicityConfig, exec: Execution) -> Result<ExperimentReport> {
    if !(cfg.grid_step > 0.0 && cfg.grid_max >= cfg.grid_step) {
        return Err(Error::Config("grid_step must be > 0 and <= grid_max".into()));
    }
    let steps = (cfg.grid_max / cfg.grid_step).round() as usize;
    let grid: Vec<f64> = (1..=steps).map(|i| i as f64 * cfg.grid_step).collect();
    let mut report = ExperimentReport::new("monotonicity", cfg);

    // g_K increasing in both arguments.
    let g_units: Vec<u32> = cfg.k_list.clone();
    let g_rows = exec.map(&g_units, |&k| -> Result<MetricRow> {
        let mut min_dx = (f64::INFINITY, 0.0, 0.0);
        let mut min_dy = (f64::INFINITY, 0.0, 0.0);
        for &x in &grid {
            for &y in &grid {
                let dx = central_diff(|v| g_mean(v, y, k), x)?;
                let dy = central_diff(|v| g_mean(x, v, k), y)?;
                if dx < min_dx.0 {
                    min_dx = (dx, x, y);
                }
                if dy < min_dy.0 {
                    min_dy = (dy, x, y);
                }
            }
        }
        Ok(MetricRow::new(format!("g K={k}"))
            .with("K", k as f64)
            .with("min_dg_dx", min_dx.0)
            .with("min_dg_dx_at_x", min_dx.1)
            .with("min_dg_dx_at_y", min_dx.2)
            .with("min_dg_dy", min_dy.0)
            .with("min_dg_dy_at_x", min_dy.1)
            .with("min_dg_dy_at_y", min_dy.2))
    });
    let g_rows = g_rows.into_iter().collect::<Result<Vec<_>>>()?;
    let min_g = g_rows.iter().map(|r| r.metrics["min_dg_dx"].min(r.metrics["min_dg_dy"])).fold(f64::INFINITY, f64::min);
    report.rows.extend(g_rows);
    report.checks.push(Check::above("min_g_derivative", min_g, 0.0));

    // φ increasing, and ∂f/∂x < 0 on the curve.
    let curve_units: Vec<(u32, f64)> =
        cfg.k_list.iter().flat_map(|&k| cfg.a_list.iter().map(move |&a| (k, a))).collect();
    let curve_rows = exec.map(&curve_units, |&(k, a)| -> Result<MetricRow> {
        let xs = interior_grid(a, cfg.curve_points);
        let ys: Vec<f64> = xs.iter().map(|&x| solve_phi(x, a, k)).collect::<Result<_>>()?;
        let min_increment = ys.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let mut max_dfdx = f64::NEG_INFINITY;
        for (&x, &y) in xs.iter().zip(&ys) {
            let h = 1e-6 * a;
            let lo = (x - h).max(0.0);
            let hi = (x + h).min(a * (1.0 - 1e-12));
            let d = (f_simple(hi, y, a, k)? - f_simple(lo, y, a, k)?) / (hi - lo);
            // Scale by Z so the sign test is not swamped by its magnitude.
            let z = TwoQueueForm::new(x, y, k)?.normalizer();
            max_dfdx = max_dfdx.max(d / z);
        }
        Ok(MetricRow::new(format!("phi K={k} a={a}"))
            .with("K", k as f64)
            .with("a", a)
            .with("min_phi_increment", min_increment)
            .with("max_df_dx_over_z", max_dfdx))
    });
    let curve_rows = curve_rows.into_iter().collect::<Result<Vec<_>>>()?;
    let min_phi_inc = curve_rows.iter().map(|r| r.metrics["min_phi_increment"]).fold(f64::INFINITY, f64::min);
    let max_df = curve_rows.iter().map(|r| r.metrics["max_df_dx_over_z"]).fold(f64::NEG_INFINITY, f64::max);
    report.rows.extend(curve_rows);
    if !curve_units.is_empty() {
        report.checks.push(Check::above("min_phi_increment", min_phi_inc, 0.0));
        report.checks.push(Check::below("max_df_dx_on_curve", max_df, 0.0));
    }

    // Fill increasing along (t, φ(t)).
    let fill_rows = exec.map(&cfg.fill_cases, |fc| -> Result<MetricRow> {
        let a = scaled_load(fc.lambda, fc.mu, fc.nu);
        let c = fill_coefficient(fc.mu, fc.nu);
        let ts = interior_grid(a, cfg.curve_points);
        let fills: Vec<f64> = ts.iter().map(|&t| fill_on_curve(t, a, c, fc.k)).collect::<Result<_>>()?;
        let min_inc = fills.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        Ok(MetricRow::new(format!("fill lambda={} mu={} nu={} K={}", fc.lambda, fc.mu, fc.nu, fc.k))
            .with("lambda", fc.lambda)
            .with("mu", fc.mu)
            .with("nu", fc.nu)
            .with("K", fc.k as f64)
            .with("min_fill_increment", min_inc))
    });
    let fill_rows = fill_rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut enforced_min = f64::INFINITY;
    for (fc, row) in cfg.fill_cases.iter().zip(&fill_rows) {
        let inc = row.metrics["min_fill_increment"];
        if fc.nu >= cfg.enforce_ratio * fc.mu {
            enforced_min = enforced_min.min(inc);
        } else if inc <= 0.0 {
            report.notes.push(format!("non-monotone fill observed (reported only): {}", row.label));
        }
    }
    report.rows.extend(fill_rows);
    if enforced_min.is_finite() {
        report.checks.push(Check::above("min_fill_increment_large_nu", enforced_min, 0.0));
    }
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// Algebraic identities of the product form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityConfig {
    pub seed: u64,
    #[serde(default = "default_identity_points")]
    pub points: usize,
    #[serde(default = "default_identity_kmax")]
    pub k_max: u32,
    #[serde(default = "default_identity_tol")]
    pub tol: f64,
    #[serde(default = "default_generator_tol")]
    pub generator_tol: f64,
}

fn default_identity_points() -> usize {
    100
}

fn default_identity_kmax() -> u32 {
    6
}

fn default_identity_tol() -> f64 {
    1e-13
}

fn default_generator_tol() -> f64 {
    1e-10
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig {
            seed: 1,
            points: default_identity_points(),
            k_max: default_identity_kmax(),
            tol: default_identity_tol(),
            generator_tol: default_generator_tol(),
        }
    }
}

/// Aggregation of the four-queue form onto `(w + x + z, y)`.
pub fn aggregate_to_two_queue(pi: &Measure) -> Vec<(u32, u32, f64)> {
    let k = pi.k();
    let mut cells: Vec<(u32, u32, f64)> = Vec::new();
    for i in 0..=k {
        for j in 0..=(k - i) {
            cells.push((i, j, 0.0));
        }
    }
    for (s, p) in enumerate_states(k).into_iter().zip(pi.probs()) {
        let (i, j) = (s.w + s.x + s.z, s.y);
        let cell = cells.iter_mut().find(|c| c.0 == i && c.1 == j).expect("cell exists");
        cell.2 += p;
    }
    cells
}

/// Balance, aggregation and fill identities at random points, and the
/// stationarity of the product form under the frozen tandem generator.
pub fn identity_experiment(cfg: &IdentityConfig) -> Result<ExperimentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut balance: f64 = 0.0;
    let mut aggregation: f64 = 0.0;
    let mut fill: f64 = 0.0;
    let mut stationarity: f64 = 0.0;
    for _ in 0..cfg.points {
        let k = rng.random_range(1..=cfg.k_max);
        let x: f64 = rng.random_range(0.0..3.0);
        let y: f64 = rng.random_range(0.0..3.0);
        let two = TwoQueueForm::new(x, y, k)?;
        balance = balance.max((y * (1.0 - two.pi_saturated()) - (1.0 - two.pi_dot0())).abs());

        let mu: f64 = rng.random_range(0.2..3.0);
        let nu: f64 = rng.random_range(0.2..30.0);
        let lambda: f64 = rng.random_range(0.2..3.0);
        let rho1: f64 = rng.random_range(0.01..3.0);
        let rho2: f64 = rng.random_range(0.01..3.0);
        let rho = RateRatios::consistent(rho1, rho2, mu, nu)?;
        let pi = product_form(&rho, k)?;
        let two = TwoQueueForm::new(rho.rho1_tilde(), rho2, k)?;
        for (a, b) in aggregate_to_two_queue(&pi).iter().zip(two.cells()) {
            aggregation = aggregation.max((a.2 - b.2).abs());
        }
        fill = fill.max((mean_fill(&pi) - two.weighted_fill(fill_coefficient(mu, nu))).abs());

        // Frozen coefficients that make rho the tandem's own ratios.
        let p_car = nu * rho.eta1 / lambda;
        let p_free = p_car / rho2;
        let eq = MasterEquation::new(ModelParams::new(lambda, mu, nu, k)?)?;
        let q = eq.frozen_generator(p_car, p_free);
        let n = eq.len();
        for j in 0..n {
            let r: f64 = (0..n).map(|i| pi.probs()[i] * q[i * n + j]).sum();
            stationarity = stationarity.max(r.abs());
        }
    }
    let mut report = ExperimentReport::new("identities", cfg);
    report.rows.push(
        MetricRow::new("max_abs_error")
            .with("balance", balance)
            .with("aggregation", aggregation)
            .with("fill", fill)
            .with("generator_residual", stationarity),
    );
    report.checks.push(Check::below("balance_identity", balance, cfg.tol));
    report.checks.push(Check::below("aggregation_identity", aggregation, cfg.tol));
    report.checks.push(Check::below("fill_identity", fill, cfg.tol));
    report.checks.push(Check::below("product_form_stationarity", stationarity, cfg.generator_tol));
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// Fixed point over a parameter grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumGridConfig {
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
    pub nus: Vec<f64>,
    pub ks: Vec<u32>,
    /// Fill targets as fractions of `K`.
    pub fill_fractions: Vec<f64>,
    #[serde(default = "default_generator_tol")]
    pub residual_tol: f64,
}

pub fn equilibrium_grid_experiment(cfg: &EquilibriumGridConfig, exec: Execution) -> Result<ExperimentReport> {
    let mut units = Vec::new();
    for &lambda in &cfg.lambdas {
        for &mu in &cfg.mus {
            for &nu in &cfg.nus {
                for &k in &cfg.ks {
                    for &frac in &cfg.fill_fractions {
                        units.push((ModelParams::new(lambda, mu, nu, k)?, frac * k as f64));
                    }
                }
            }
        }
    }
    let solved = exec.map(&units, |(p, s)| solve_equilibrium(p, *s));
    let mut report = ExperimentReport::new("equilibrium_grid", cfg);
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for ((p, s), res) in units.iter().zip(solved) {
        let label = format!("lambda={} mu={} nu={} K={} s={s}", p.lambda, p.mu, p.nu, p.k);
        match res {
            Ok(r) => {
                worst = worst.max(r.residuals.max());
                report.rows.push(
                    MetricRow::new(label)
                        .with("rho1", r.rho.rho1)
                        .with("rho2", r.rho.rho2)
                        .with("max_residual", r.residuals.max())
                        .with("outer_iterations", r.iterations.outer as f64)
                        .with("monotone_ok", f64::from(u8::from(r.monotone_ok))),
                );
            }
            Err(e) => {
                failures += 1;
                report.notes.push(format!("{label}: {e}"));
            }
        }
    }
    report.checks.push(Check::below("solver_failures", failures as f64, 0.5));
    report.checks.push(Check::below("max_residual", worst, cfg.residual_tol));
    Ok(report.finish())
}

// ---------------------------------------------------------------------------
// Stationarity of the solved equilibrium and RK4 order
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarityConfig {
    pub params: ModelParams,
    pub s: f64,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "default_stationary_tol")]
    pub tv_tol: f64,
    /// Horizon of the step-halving order check.
    #[serde(default = "default_order_horizon")]
    pub order_horizon: f64,
    #[serde(default = "default_min_order")]
    pub min_order: f64,
}

fn default_stationary_tol() -> f64 {
    1e-6
}

fn default_order_horizon() -> f64 {
    2.0
}

fn default_min_order() -> f64 {
    3.5
}

/// Errors `TV(Λ_h(T), Λ_{h/2}(T))` for `h = h0, h0/2, h0/4` and the fitted order.
pub fn rk4_order(m0: &Measure, p: &ModelParams, horizon: f64) -> Result<(Vec<f64>, Vec<f64>, SlopeFit)> {
    let base_steps = (horizon / max_stable_dt(p)).ceil();
    let h0 = horizon / base_steps;
    let hs: Vec<f64> = (0..4).map(|i| h0 / 2f64.powi(i)).collect();
    let finals: Vec<Measure> = hs.iter().map(|&h| integrate_final(m0, p, horizon, h)).collect::<Result<_>>()?;
    let errs: Vec<f64> = finals.windows(2).map(|w| tv_distance(&w[0], &w[1])).collect::<Result<_>>()?;
    let fit = loglog_fit(&hs[..3], &errs)?;
    Ok((hs[..3].to_vec(), errs, fit))
}

pub fn stationarity_experiment(cfg: &StationarityConfig) -> Result<ExperimentReport> {
    let p = cfg.params;
    let eq = solve_equilibrium(&p, cfg.s)?;
    let pi = eq.equilibrium()?;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let traj = crate::meanfield::integrate_strided(&pi, &p, cfg.horizon, cfg.dt, (steps / 100).max(1))?;
    let max_tv =
        traj.iter().map(|(_, m)| tv_distance(m, &pi)).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    let start = all_available_measure(cfg.s, p.k)?;
    let (hs, errs, fit) = rk4_order(&start, &p, cfg.order_horizon)?;

    let mut report = ExperimentReport::new("stationarity", cfg);
    report.rows.push(
        MetricRow::new("equilibrium")
            .with("max_tv_drift", max_tv)
            .with("stationarity_residual", crate::meanfield::stationarity_residual(&pi, &p)?),
    );
    for (h, e) in hs.iter().zip(&errs) {
        report.rows.push(MetricRow::new(format!("dt={h}")).with("dt", *h).with("tv_vs_half_step", *e));
    }
    report.rows.push(MetricRow::new("order").with("observed_order", fit.slope));
    report.fit = Some(fit);
    report.checks.push(Check::below("max_tv_drift", max_tv, cfg.tv_tol));
    report.checks.push(Check::above("rk4_order", fit.slope, cfg.min_order));
    Ok(report.finish())
}
