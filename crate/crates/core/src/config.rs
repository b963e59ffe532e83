//! Experiment configuration: TOML schema, validation, presets and sweeps.
//!
//! A config file is flat `key = value` pairs followed by a few sections:
//!
//! ```toml
//! scenario = "my_run"
//! per_cluster = 20
//! eps_het = 0.01
//! sigma_w2 = 0.01
//! tau1 = 15
//! k_fin = 9
//! x_b = 25.0
//! k_b = 15.0
//! eta = 0.5
//! seeds = [1, 2, 3]
//! out_dir = "out/my_run"
//!
//! [[clusters]]
//! v0 = 1.0
//! theta0_deg = 0.0
//! dt = 0.1
//!
//! [aggregator]
//! rule = "cwtm"
//!
//! [attack]
//! rho_byz = 0.15
//!
//! [exploration]
//! mode = "theorem_adversarial"
//!
//! [sweep]
//! param = "attack.rho_byz"
//! values = [0.0, 0.15, 0.35]
//! ```
//!
//! Unknown keys are rejected. See the README for every key and its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{AttackConfig, TargetMode};
use crate::aggregate::{GEOMEDIAN_MAX_ITER, GEOMEDIAN_TOL};
use crate::identify::{default_iterations, AggregatorSpec, RcsiConfig, DEFAULT_RIDGE};
use crate::orchestrator::{EpochSampleMode, EpochSchedule, Exploration, InitMode};
use crate::plant::{separation, unicycle_cluster, AbortBounds, ClusterSpec, CostInputMode};

/// Environment variable that overrides `out_dir`.
pub const OUT_ENV: &str = "RMLQR_OUT";

pub const PRESETS: [&str; 6] = [
    "panel1_homogeneous",
    "panel2_heterogeneous",
    "panel3_misclassification",
    "panel4_adversarial",
    "panel5_aggregators",
    "panel6_no_shared_rep",
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("parse error{}: {message}", location(*.line, *.column))]
    Parse { message: String, line: Option<usize>, column: Option<usize> },
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("unknown preset `{0}` (run `presets` for the list)")]
    UnknownPreset(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn location(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l}, column {c}"),
        (Some(l), None) => format!(" at line {l}"),
        _ => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub v0: f64,
    pub theta0_deg: f64,
    pub dt: f64,
    /// Systems in this cluster; `per_cluster` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Mean,
    Cwtm,
    Cwmed,
    Geomedian,
    Meamed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub rule: RuleName,
    /// CWTM trim fraction per side; `rho_byz + 0.05` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_trim: Option<f64>,
    /// MeaMed discard fraction; `rho_byz` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meamed_fraction: Option<f64>,
    #[serde(default = "default_gm_tol")]
    pub tol: f64,
    #[serde(default = "default_gm_iters")]
    pub max_iter: usize,
    /// Fall back to plain averaging when there is no attack.
    #[serde(default = "default_true")]
    pub mean_when_no_attack: bool,
}

fn default_gm_tol() -> f64 {
    GEOMEDIAN_TOL
}

fn default_gm_iters() -> usize {
    GEOMEDIAN_MAX_ITER
}

fn default_true() -> bool {
    true
}

impl AggregatorConfig {
    pub fn new(rule: RuleName) -> Self {
        Self {
            rule,
            alpha_trim: None,
            meamed_fraction: None,
            tol: GEOMEDIAN_TOL,
            max_iter: GEOMEDIAN_MAX_ITER,
            mean_when_no_attack: true,
        }
    }

    pub fn spec(&self, rho_byz: f64) -> AggregatorSpec {
        if self.mean_when_no_attack && rho_byz == 0.0 {
            return AggregatorSpec::Mean;
        }
        match self.rule {
            RuleName::Mean => AggregatorSpec::Mean,
            RuleName::Cwtm => AggregatorSpec::Cwtm { trim_fraction: self.alpha_trim.unwrap_or(rho_byz + 0.05) },
            RuleName::Cwmed => AggregatorSpec::CwMed,
            RuleName::Geomedian => AggregatorSpec::GeoMedian { tol: self.tol, max_iter: self.max_iter },
            RuleName::Meamed => AggregatorSpec::MeaMed { f_fraction: self.meamed_fraction.unwrap_or(rho_byz) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationMode {
    TheoremHomogeneous,
    TheoremAdversarial,
    ExplicitList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationConfig {
    pub mode: ExplorationMode,
    /// Input noise standard deviations per epoch (`explicit_list` only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigmas: Vec<f64>,
    /// Resilience coefficient for `theorem_adversarial`; `f_j / m_j` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_nominal: Option<f64>,
}

impl ExplorationConfig {
    pub fn exploration(&self) -> Exploration {
        match self.mode {
            ExplorationMode::TheoremHomogeneous => Exploration::TheoremHomogeneous,
            ExplorationMode::TheoremAdversarial => Exploration::TheoremAdversarial,
            ExplorationMode::ExplicitList => Exploration::ExplicitList(self.sigmas.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Dotted key, e.g. `per_cluster`, `attack.rho_byz`, `clusters.1.count`.
    pub param: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub per_cluster: usize,
    /// Standard deviation of the entrywise perturbation of each system
    /// around its cluster's nominal model.
    pub eps_het: f64,
    /// Process noise variance σ_w².
    pub sigma_w2: f64,
    pub tau1: usize,
    pub k_fin: usize,
    pub x_b: f64,
    pub k_b: f64,
    pub eta: f64,
    /// RCSI iterations per epoch; derived from the cluster separation when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rcsi_iters: Option<usize>,
    #[serde(default)]
    pub init_mode: InitMode,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cost_input_mode: CostInputMode,
    #[serde(default)]
    pub epoch_sample_mode: EpochSampleMode,
    #[serde(default)]
    pub reset_state_each_epoch: bool,
    /// Feed RCSI all statistics collected so far instead of only this epoch's.
    #[serde(default)]
    pub cumulative_stats: bool,
    /// Write every n-th step to trials.csv (epoch ends are always written).
    #[serde(default = "default_stride")]
    pub trace_stride: usize,
    pub clusters: Vec<ClusterConfig>,
    pub aggregator: AggregatorConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    pub exploration: ExplorationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_stride() -> usize {
    1
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scenario.trim().is_empty() {
            return Err(invalid("scenario must not be empty"));
        }
        if self.clusters.is_empty() {
            return Err(invalid("at least one [[clusters]] entry is required"));
        }
        for (j, c) in self.clusters.iter().enumerate() {
            if !(c.dt > 0.0 && c.dt.is_finite()) || !c.v0.is_finite() || !c.theta0_deg.is_finite() {
                return Err(invalid(format!("clusters[{j}]: v0, theta0_deg must be finite and dt > 0")));
            }
        }
        if self.cluster_counts().iter().sum::<usize>() == 0 {
            return Err(invalid("the fleet has no systems (per_cluster and every count are 0)"));
        }
        if !(self.eps_het >= 0.0 && self.eps_het.is_finite()) {
            return Err(invalid(format!("eps_het must be nonnegative, got {}", self.eps_het)));
        }
        if !(self.sigma_w2 >= 0.0 && self.sigma_w2.is_finite()) {
            return Err(invalid(format!("sigma_w2 must be nonnegative, got {}", self.sigma_w2)));
        }
        if self.tau1 == 0 {
            return Err(invalid("tau1 must be at least 1"));
        }
        if self.k_fin == 0 || self.k_fin > 30 {
            return Err(invalid(format!("k_fin must lie in [1, 30], got {}", self.k_fin)));
        }
        if self.tau1.checked_shl(self.k_fin as u32 - 1).is_none_or(|t| t > 1 << 30) {
            return Err(invalid("horizon tau1 * 2^(k_fin - 1) is too large"));
        }
        if !(self.x_b > 0.0) || !(self.k_b > 0.0) {
            return Err(invalid("x_b and k_b must be positive"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if self.rcsi_iters == Some(0) {
            return Err(invalid("rcsi_iters must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must list at least one seed"));
        }
        if self.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(invalid("seeds must fit in a signed 64-bit integer"));
        }
        if self.trace_stride == 0 {
            return Err(invalid("trace_stride must be at least 1"));
        }
        self.attack.validate().map_err(invalid)?;
        let agg = &self.aggregator;
        if let Some(a) = agg.alpha_trim {
            if !(0.0..0.5).contains(&a) {
                return Err(invalid(format!("aggregator.alpha_trim must lie in [0, 0.5), got {a}")));
            }
        }
        if let Some(f) = agg.meamed_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(invalid(format!("aggregator.meamed_fraction must lie in [0, 1), got {f}")));
            }
        }
        if !(agg.tol > 0.0) || agg.max_iter == 0 {
            return Err(invalid("aggregator.tol must be positive and max_iter at least 1"));
        }
        let ex = &self.exploration;
        if ex.mode == ExplorationMode::ExplicitList && ex.sigmas.is_empty() {
            return Err(invalid("exploration.sigmas must be non-empty for explicit_list"));
        }
        if ex.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("exploration.sigmas must be nonnegative"));
        }
        if ex.lambda_nominal.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
            return Err(invalid("exploration.lambda_nominal must be nonnegative"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(invalid("sweep.values must be non-empty"));
            }
            for v in &sweep.values {
                let mut applied = self.with_param(&sweep.param, v)?;
                applied.sweep = None;
                applied.validate().map_err(|e| invalid(format!("sweep {} = {}: {e}", sweep.param, value_label(v))))?;
            }
        }
        Ok(())
    }

    pub fn cluster_specs(&self) -> Vec<ClusterSpec> {
        self.clusters
            .iter()
            .enumerate()
            .map(|(j, c)| unicycle_cluster(c.v0, c.theta0_deg.to_radians(), c.dt, j))
            .collect()
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.count.unwrap_or(self.per_cluster)).collect()
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w2.sqrt()
    }

    pub fn schedule(&self) -> EpochSchedule {
        EpochSchedule { tau1: self.tau1, k_fin: self.k_fin, sample_mode: self.epoch_sample_mode }
    }

    pub fn abort_bounds(&self) -> AbortBounds {
        AbortBounds { x_b: self.x_b, k_b: self.k_b, horizon: self.schedule().horizon() }
    }

    pub fn aggregator_spec(&self) -> AggregatorSpec {
        self.aggregator.spec(self.attack.rho_byz)
    }

    pub fn rcsi_config(&self) -> RcsiConfig {
        let specs = self.cluster_specs();
        let iterations = self.rcsi_iters.unwrap_or_else(|| {
            let (delta_min, _) = separation(&specs);
            default_iterations(delta_min, self.tau1, self.eta)
        });
        RcsiConfig {
            n_clusters: specs.len(),
            iterations,
            step: self.eta,
            aggregator: self.aggregator_spec(),
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A copy with one dotted key replaced. Integer values are widened when
    /// the key currently holds a float.
    pub fn with_param(&self, key: &str, value: &toml::Value) -> Result<Self, ConfigError> {
        let mut root = toml::Value::try_from(self).map_err(|e| invalid(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().ok_or_else(|| invalid("empty sweep parameter"))?;
        let mut node = &mut root;
        for part in path {
            node = match node {
                toml::Value::Table(t) => t.get_mut(*part),
                toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| invalid(format!("unknown parameter `{key}`")))?;
        }
        let slot = match node {
            toml::Value::Table(t) => t,
            _ => return Err(invalid(format!("unknown parameter `{key}`"))),
        };
        let value = match (slot.get(*last), value) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
            _ => value.clone(),
        };
        slot.insert(last.to_string(), value);
        root.try_into().map_err(|e: toml::de::Error| invalid(format!("cannot set `{key}`: {}", e.message())))
    }

    /// One config per sweep value (tagged with its label), or just this one.
    pub fn expand_sweep(&self) -> Result<Vec<(Option<String>, ExperimentConfig)>, ConfigError> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![(None, self.clone())]);
        };
        sweep
            .values
            .iter()
            .map(|v| {
                let mut cfg = self.with_param(&sweep.param, v)?;
                cfg.sweep = None;
                Ok((Some(value_label(v)), cfg))
            })
            .collect()
    }

    pub fn apply_out_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_ENV) {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
    }
}

/// Short text form of a sweep value, used for directory names and CSVs.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parse a command-line value as a TOML scalar, falling back to a string.
pub fn parse_value(text: &str) -> toml::Value {
    let text = text.trim();
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.to_string())),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            (Some(line), Some(column))
        }
        None => (None, None),
    };
    ConfigError::Parse { message: e.message().to_string(), line, column }
}

/// A preset by name, or a TOML file by path.
pub fn load_config(source: &str) -> Result<ExperimentConfig, ConfigError> {
    if let Some(cfg) = preset(source) {
        cfg.validate()?;
        return Ok(cfg);
    }
    let path = Path::new(source);
    if !path.exists() && !source.ends_with(".toml") && !source.contains(std::path::MAIN_SEPARATOR) {
        return Err(ConfigError::UnknownPreset(source.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: source.to_string(), source: e })?;
    ExperimentConfig::from_toml(&text)
}

pub fn appendix_clusters() -> Vec<ClusterConfig> {
    [(1.0, 0.0), (1.0, 45.0), (0.8, 90.0)]
        .iter()
        .map(|&(v0, theta0_deg)| ClusterConfig { v0, theta0_deg, dt: 0.1, count: None })
        .collect()
}

/// σ_u per epoch used for the shared-representation comparison.
pub const GEOMETRIC_SIGMAS: [f64; 8] = [0.663, 0.411, 0.124, 0.037, 0.011, 0.0034, 0.0010, 0.0010];

fn base(scenario: &str) -> ExperimentConfig {
    ExperimentConfig {
        scenario: scenario.to_string(),
        per_cluster: 20,
        eps_het: 0.01,
        sigma_w2: 0.01,
        tau1: 15,
        k_fin: 9,
        x_b: 25.0,
        k_b: 15.0,
        eta: 0.5,
        rcsi_iters: None,
        init_mode: InitMode::OraclePerturbed,
        seeds: (1..=20).collect(),
        out_dir: PathBuf::from("out").join(scenario),
        cost_input_mode: CostInputMode::Applied,
        epoch_sample_mode: EpochSampleMode::Incremental,
        reset_state_each_epoch: false,
        cumulative_stats: false,
        trace_stride: 10,
        clusters: appendix_clusters(),
        aggregator: AggregatorConfig::new(RuleName::Cwtm),
        attack: AttackConfig { rho_byz: 0.0, beta: 0.6, epsilon_std: 1e-6, target_mode: TargetMode::WrongClusterFixed },
        exploration: ExplorationConfig { mode: ExplorationMode::TheoremHomogeneous, sigmas: Vec::new(), lambda_nominal: None },
        sweep: None,
    }
}

fn sweep(param: &str, values: Vec<toml::Value>) -> Option<SweepConfig> {
    Some(SweepConfig { param: param.to_string(), values })
}

fn ints(v: &[i64]) -> Vec<toml::Value> {
    v.iter().map(|&i| toml::Value::Integer(i)).collect()
}

fn floats(v: &[f64]) -> Vec<toml::Value> {
    v.iter().map(|&x| toml::Value::Float(x)).collect()
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let cfg = match name {
        "panel1_homogeneous" => ExperimentConfig {
            eps_het: 0.0,
            per_cluster: 5,
            aggregator: AggregatorConfig::new(RuleName::Mean),
            sweep: sweep("per_cluster", ints(&[5, 25])),
            ..base(name)
        },
        "panel2_heterogeneous" => ExperimentConfig {
            per_cluster: 5,
            aggregator: AggregatorConfig::new(RuleName::Mean),
            sweep: sweep("per_cluster", ints(&[5, 25])),
            ..base(name)
        },
        "panel3_misclassification" => ExperimentConfig {
            eps_het: 0.0,
            per_cluster: 5,
            aggregator: AggregatorConfig::new(RuleName::Mean),
            sweep: sweep("per_cluster", ints(&[5, 25])),
            ..base(name)
        },
        "panel4_adversarial" => ExperimentConfig {
            attack: AttackConfig { rho_byz: 0.15, ..base(name).attack },
            exploration: ExplorationConfig { mode: ExplorationMode::TheoremAdversarial, ..base(name).exploration },
            sweep: sweep("attack.rho_byz", floats(&[0.0, 0.15, 0.35])),
            ..base(name)
        },
        "panel5_aggregators" => ExperimentConfig {
            per_cluster: 50,
            attack: AttackConfig { rho_byz: 0.15, ..base(name).attack },
            aggregator: AggregatorConfig { alpha_trim: Some(0.20), ..AggregatorConfig::new(RuleName::Cwtm) },
            exploration: ExplorationConfig { mode: ExplorationMode::TheoremAdversarial, ..base(name).exploration },
            sweep: sweep(
                "aggregator.rule",
                vec![toml::Value::String("cwtm".into()), toml::Value::String("geomedian".into())],
            ),
            ..base(name)
        },
        "panel6_no_shared_rep" => ExperimentConfig {
            per_cluster: 25,
            eps_het: 0.004,
            clusters: vec![
                ClusterConfig { v0: 1.0, theta0_deg: 0.0, dt: 0.1, count: Some(25) },
                ClusterConfig { v0: 0.8, theta0_deg: 90.0, dt: 0.1, count: Some(1) },
            ],
            aggregator: AggregatorConfig::new(RuleName::Mean),
            exploration: ExplorationConfig {
                mode: ExplorationMode::ExplicitList,
                sigmas: GEOMETRIC_SIGMAS.to_vec(),
                lambda_nominal: None,
            },
            sweep: sweep("clusters.1.count", ints(&[0, 1])),
            ..base(name)
        },
        _ => return None,
    };
    Some(cfg)
}
