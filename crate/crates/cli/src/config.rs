// SPDX-License-Identifier: Apache-2.0

//! Run configuration: one TOML file per run, optionally patched with
//! `--set section.key=value` overrides before it is deserialized.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use carshare_core::equilibrium::SolveOptions;
use carshare_core::harness::{
    AttractionConfig, ChaosConfig, ConvergenceConfig, EquilibriumGridConfig, IdentityConfig, MonotonicityConfig,
    StationarityConfig,
};
use carshare_core::{Execution, ModelParams, StationState};

/// Errors that map to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub k: u32,
}

impl ModelSection {
    pub fn params(&self) -> Result<ModelParams, ConfigError> {
        ModelParams::new(self.lambda, self.mu, self.nu, self.k).map_err(|e| ConfigError(format!("model: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Number of stations.
    pub n: usize,
    /// Number of cars.
    pub m: u64,
    pub horizon: f64,
    #[serde(default)]
    pub sample_times: Vec<f64>,
    pub seed: u64,
    /// Replica `r` runs with seed `seed + r`.
    #[serde(default = "one")]
    pub replicas: usize,
    /// Check invariants after every event.
    #[serde(default = "yes")]
    pub audit: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Where the master equation starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialMeasure {
    /// Every station holds `floor(s)` or `ceil(s)` available cars.
    AllAvailable { s: f64 },
    /// The product-form equilibrium at fill `s`.
    Equilibrium { s: f64 },
    /// A point mass at `[w, x, y, z]`.
    Point { state: [u32; 4] },
    /// A measure stored as CSV (`w,x,y,z,prob`) or JSON.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanfieldSection {
    pub initial: InitialMeasure,
    pub horizon: f64,
    pub dt: f64,
    /// Keep every `stride`-th step in the output.
    #[serde(default = "one")]
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumSection {
    pub s: f64,
    #[serde(default)]
    pub options: SolveOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Identities,
    EquilibriumGrid,
    Stationarity,
    Convergence,
    Chaos,
    Attraction,
    Monotonicity,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Identities => "identities",
            Suite::EquilibriumGrid => "equilibrium_grid",
            Suite::Stationarity => "stationarity",
            Suite::Convergence => "convergence",
            Suite::Chaos => "chaos",
            Suite::Attraction => "attraction",
            Suite::Monotonicity => "monotonicity",
        }
    }
}

/// Suites to run, each with an optional table replacing its built-in
/// default configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default)]
    pub suites: Vec<Suite>,
    #[serde(default)]
    pub execution: Execution,
    pub identities: Option<IdentityConfig>,
    pub equilibrium_grid: Option<EquilibriumGridConfig>,
    pub stationarity: Option<StationarityConfig>,
    pub convergence: Option<ConvergenceConfig>,
    pub chaos: Option<ChaosConfig>,
    pub attraction: Option<AttractionConfig>,
    pub monotonicity: Option<MonotonicityConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSection>,
    pub simulate: Option<SimulateSection>,
    pub meanfield: Option<MeanfieldSection>,
    pub equilibrium: Option<EquilibriumSection>,
    pub verify: Option<VerifySection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError(format!("override `{assignment}` has an empty key")));
    }
    let mut cur = table;
    for (depth, key) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = cur.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            ConfigError(format!("override `{assignment}`: `{}` is not a table", keys[..=depth].join(".")))
        })?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the config file (if any), applies the overrides and deserializes.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| ConfigError(format!("invalid config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for assignment in overrides {
        apply_override(&mut table, assignment)?;
    }
    RunConfig::deserialize(table).map_err(|e| ConfigError(format!("invalid config: {e}")))
}

impl RunConfig {
    /// SHA-256 of the effective configuration in canonical TOML form. The
    /// output directory is left out so that relocated runs hash alike.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { output: OutputSection::default(), ..self.clone() };
        let text = toml::to_string(&canonical).expect("configs serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model(&self) -> Result<ModelParams, ConfigError> {
        self.model.as_ref().ok_or_else(|| ConfigError("missing [model] section".into()))?.params()
    }

    pub fn section<'a, T>(&self, name: &str, s: &'a Option<T>) -> Result<&'a T, ConfigError> {
        s.as_ref().ok_or_else(|| ConfigError(format!("missing [{name}] section")))
    }
}

pub fn point_state(state: [u32; 4]) -> StationState {
    StationState::new(state[0], state[1], state[2], state[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_and_replace_keys() {
        let mut t: toml::Table = "[model]\nlambda = 1.0\n".parse().unwrap();
        apply_override(&mut t, "model.lambda=2.5").unwrap();
        apply_override(&mut t, "simulate.sample_times=[0.0, 1.0]").unwrap();
        apply_override(&mut t, "output.dir=results/a").unwrap();
        assert_eq!(t["model"]["lambda"].as_float(), Some(2.5));
        assert_eq!(t["simulate"]["sample_times"].as_array().unwrap().len(), 2);
        assert_eq!(t["output"]["dir"].as_str(), Some("results/a"));
        assert!(apply_override(&mut t, "model.lambda.x=1").is_err());
        assert!(apply_override(&mut t, "nokey").is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = load(None, &["model.lamda=1".into()]).unwrap_err();
        assert!(err.0.contains("lamda"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = load(None, &["equilibrium.s=0.5".into()]).unwrap();
        let b = load(None, &["equilibrium.s=0.5".into()]).unwrap();
        let c = load(None, &["equilibrium.s=0.6".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
