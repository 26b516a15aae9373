//! Run configuration: JSON schema, defaults materialization and hashing.
//!
//! Configs are read from a JSON file. Every field that has a default may be
//! omitted; the effective (fully materialized) configuration is echoed into
//! the run summary so runs are self-describing, and its hash is embedded in
//! every artifact filename.
//!
//! Schema (version 1), by block:
//!
//! ```json
//! {
//!   "model": {
//!     "kind": "deconv" | "repmeas" | "factor",
//!     "data": { "y": "y.csv", "eps": "eps.csv",
//!                "y1": "...", "y2": "...", "loadings": "A.csv" },
//!     "scenario": { "kind": "...", "latent": {"type": "bimodal"},
//!                    "errors": [{"dist": "laplace", "scale": 0.5}],
//!                    "n": 500, "seed": 1 },
//!     "target": 0 | "joint"
//!   },
//!   "prior": { "k": 30, "beta": 1.0, "base_mean": [0.0],
//!              "base_cov": [[4.0]],
//!              "cov_prior": {"type": "inverse_gamma", "shape": 2.0, "scale": 1.0},
//!              "empirical_bayes": false },
//!   "likelihood": { "t_radius": 2.0, "box_nodes": 128, "sphere_nodes": 64,
//!                   "line_nodes": 16, "boundary": null, "symmetrized": false },
//!   "sampler": { "warmup": 500, "draws": 1000, "target_accept": 0.8,
//!                "max_depth": 10, "divergence_threshold": 1000.0,
//!                "adapt_mass": true, "seed": 1, "chains": 2, "init": null },
//!   "output": { "dir": "out", "grid_points": 512, "band_level": 0.9,
//!               "demean": null, "rhat_threshold": 1.05, "rhat_gate": "warn" },
//!   "sweep": { "n_grid": [250, 2000], "seeds": [1, 2, 3, 4, 5] }
//! }
//! ```
//!
//! Exactly one of `model.data` and `model.scenario` must be present. A
//! `model.data` block names CSV files (one observation per row, no header
//! unless `--header` is passed); `model.scenario` generates synthetic data.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use quasibayes::pipeline::FitPlan;
use quasibayes::prior::{CovariancePrior, PriorSpec};
use quasibayes::sampler::HmcConfig;
use quasibayes::simulate::{ScenarioKind, ScenarioSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Deconv,
    RepMeas,
    Factor,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y1: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y2: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loadings: Option<PathBuf>,
}

/// Factor target: an index, or the joint posterior over all factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetConfig {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetConfig>,
}

/// A scenario plus its generation seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(flatten)]
    pub spec: ScenarioSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_cov: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_prior: Option<CovariancePrior>,
    #[serde(default)]
    pub empirical_bayes: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sphere_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<bool>,
    #[serde(default)]
    pub symmetrized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub hmc: HmcConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { hmc: HmcConfig::default(), init: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhatGate {
    Warn,
    Fail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub grid_points: usize,
    pub band_level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demean: Option<bool>,
    pub rhat_threshold: f64,
    pub rhat_gate: RhatGate,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            grid_points: 512,
            band_level: 0.9,
            demean: None,
            rhat_threshold: 1.05,
            rhat_gate: RhatGate::Warn,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Optional sensitivity sweep over the CF-matching radius T.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub likelihood: LikelihoodConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let bytes = std::fs::read(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut deserializer = serde_json::Deserializer::from_slice(&bytes);
        let config: RunConfig = serde_path_to_error::deserialize(&mut deserializer)
            .map_err(|e| format!("config {}: at `{}`: {}", path.display(), e.path(), e.inner()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        match (&self.model.data, &self.model.scenario) {
            (Some(_), Some(_)) => {
                return Err("model: exactly one of `data` and `scenario` may be present".into())
            }
            (None, None) => {
                return Err("model: one of `data` and `scenario` is required".into())
            }
            _ => {}
        }
        if let Some(scenario) = &self.model.scenario {
            let expected = match self.model.kind {
                ModelKind::Deconv => ScenarioKind::Deconv,
                ModelKind::RepMeas => ScenarioKind::RepMeas,
                ModelKind::Factor => ScenarioKind::Factor,
            };
            if scenario.spec.kind != expected {
                return Err("model.scenario: scenario kind must match model.kind".into());
            }
            scenario.spec.validate().map_err(|e| format!("model.scenario: {e}"))?;
        }
        if let Some(data) = &self.model.data {
            let required: &[(&str, &Option<PathBuf>)] = match self.model.kind {
                ModelKind::Deconv => &[("model.data.y", &data.y), ("model.data.eps", &data.eps)],
                ModelKind::RepMeas => {
                    &[("model.data.y1", &data.y1), ("model.data.y2", &data.y2)]
                }
                ModelKind::Factor => {
                    &[("model.data.y", &data.y), ("model.data.loadings", &data.loadings)]
                }
            };
            for (name, path) in required {
                if path.is_none() {
                    return Err(format!("{name}: required for kind {:?}", self.model.kind));
                }
            }
        }
        if let Some(TargetConfig::Name(name)) = &self.model.target {
            if name != "joint" {
                return Err(format!(
                    "model.target: expected a factor index or \"joint\", got {name:?}"
                ));
            }
        }
        if self.model.target.is_some() && self.model.kind != ModelKind::Factor {
            return Err("model.target: only applies to factor models".into());
        }
        self.sampler.hmc.validate().map_err(|e| format!("sampler: {e}"))?;
        if !(self.output.band_level > 0.0 && self.output.band_level < 1.0) {
            return Err("output.band_level: must lie in (0, 1)".into());
        }
        if let Some(sweep) = &self.sweep {
            if sweep.n_grid.is_empty() || sweep.seeds.is_empty() {
                return Err("sweep: n_grid and seeds must be nonempty".into());
            }
        }
        Ok(())
    }

    /// Materialize every default into a concrete fit plan. `latent_dim` is
    /// known once data or scenario is resolved.
    pub fn fit_plan(&self, latent_dim: usize) -> Result<FitPlan, String> {
        let kind = self.model.kind;
        let prior_dim = if kind == ModelKind::Factor { 1 } else { latent_dim };
        let quad_dim = latent_dim;
        let mut plan = FitPlan::default_for_dim(prior_dim, self.prior.k.unwrap_or(30));
        // Quadrature node defaults follow the observation dimension.
        plan.box_nodes = self.likelihood.box_nodes.unwrap_or(match quad_dim {
            1 => 128,
            2 => 48,
            _ => 24,
        });
        plan.sphere_nodes = self
            .likelihood
            .sphere_nodes
            .unwrap_or(if quad_dim == 3 { 256 } else { 64 });
        plan.line_nodes = self.likelihood.line_nodes.unwrap_or(16);
        plan.t_radius = self.likelihood.t_radius.unwrap_or(2.0);
        plan.boundary = self.likelihood.boundary;
        plan.symmetrized = self.likelihood.symmetrized;
        plan.joint = matches!(&self.model.target, Some(TargetConfig::Name(_)));
        plan.factor_target = match &self.model.target {
            Some(TargetConfig::Index(k)) => Some(*k),
            _ => None,
        };
        plan.hmc = self.sampler.hmc.clone();
        plan.grid_points = self.output.grid_points;
        plan.band_level = self.output.band_level;
        plan.demean = self.output.demean;
        plan.empirical_bayes = self.prior.empirical_bayes;

        let mut prior = PriorSpec::default_for_dim(prior_dim, self.prior.k.unwrap_or(30));
        if let Some(beta) = self.prior.beta {
            prior.beta = beta;
        }
        if let Some(mean) = &self.prior.base_mean {
            prior.base_mean = mean.clone();
        }
        if let Some(cov) = &self.prior.base_cov {
            let d = cov.len();
            let flat: Vec<f64> = cov.iter().flatten().copied().collect();
            if flat.len() != d * d {
                return Err("prior.base_cov: rows must all have length d".into());
            }
            prior.base_cov = nalgebra::DMatrix::from_row_slice(d, d, &flat);
        }
        if let Some(cp) = &self.prior.cov_prior {
            prior.cov_prior = cp.clone();
        }
        prior.validate().map_err(|e| format!("prior: {e}"))?;
        plan.prior = prior;
        Ok(plan)
    }

    /// The cell configuration a sweep materializes for one cell: the sweep
    /// block dropped, the scenario (and optionally the radius) pinned.
    pub fn cell_config(&self, n: usize, seed: u64, t_radius: Option<f64>) -> RunConfig {
        let mut cell = self.clone();
        cell.sweep = None;
        if let Some(scenario) = cell.model.scenario.as_mut() {
            scenario.spec.n = n;
            scenario.seed = seed;
        }
        if t_radius.is_some() {
            cell.likelihood.t_radius = t_radius;
        }
        cell
    }
}

/// The fully materialized configuration echoed into summaries and hashed
/// into artifact filenames. Output-location fields are echoed but excluded
/// from the hash so identical science in different directories shares a
/// hash.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub plan: FitPlan,
    pub init: Option<Vec<f64>>,
    pub output: OutputConfig,
}

impl EffectiveConfig {
    pub fn new(config: &RunConfig, plan: FitPlan) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: config.model.clone(),
            plan,
            init: config.sampler.init.clone(),
            output: config.output.clone(),
        }
    }

    /// 12-hex-digit hash over the science-relevant part of the effective
    /// configuration.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            schema_version: u32,
            model: &'a ModelConfig,
            plan: &'a FitPlan,
            init: &'a Option<Vec<f64>>,
        }
        let payload = serde_json::to_vec(&Hashed {
            schema_version: self.schema_version,
            model: &self.model,
            plan: &self.plan,
            init: &self.init,
        })
        .expect("effective config serializes");
        let digest = Sha256::digest(&payload);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
