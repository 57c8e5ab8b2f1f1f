//! The global TOML configuration. Every section is optional in the file;
//! missing keys take the defaults below, unknown keys are rejected.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::constraint::{ConstraintFamily, FeasibilityConfig, SamplerConfig};
use crate::demos::{DemoConfig, Oracle};
use crate::embedding::{EmbeddingProvider, FixtureEmbedder, HttpEmbedder, MockEmbedder};
use crate::error::{Error, Result};
use crate::features::{FeatureLibrary, OracleWeights};
use crate::irl::IrlConfig;
use crate::ocp::SolverConfig;
use crate::sim::{DynamicsModel, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub weights: OracleWeights,
    pub obstacle_clearance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            weights: OracleWeights::default(),
            obstacle_clearance: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Mock,
    Fixture,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingKind,
    /// Number of retained principal components.
    pub z: usize,
    pub endpoint: String,
    /// Expected dimension of the HTTP provider.
    pub dim: usize,
    pub timeout_secs: f64,
    pub retries: usize,
    /// JSONL fixture for the `fixture` provider.
    pub fixture: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingKind::Mock,
            z: 20,
            endpoint: "http://127.0.0.1:8081".into(),
            dim: 768,
            timeout_secs: 30.0,
            retries: 2,
            fixture: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self.provider {
            EmbeddingKind::Mock => Box::new(MockEmbedder),
            EmbeddingKind::Fixture => {
                let path = self
                    .fixture
                    .as_ref()
                    .ok_or_else(|| Error::Config("embedding.fixture is required for the fixture provider".into()))?;
                Box::new(FixtureEmbedder::load(path)?)
            }
            EmbeddingKind::Http => Box::new(HttpEmbedder::new(
                &format!("http:{}", self.endpoint),
                &self.endpoint,
                self.dim,
                Duration::from_secs_f64(self.timeout_secs),
                self.retries,
            )),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    pub family: ConstraintFamily,
    pub sampler: SamplerConfig,
    pub feasibility: FeasibilityConfig,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            family: ConstraintFamily::AxisBox,
            sampler: SamplerConfig::default(),
            feasibility: FeasibilityConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    /// Coverage threshold `t`.
    pub threshold: f64,
    /// Maximum relative residual of the projection onto the example span.
    pub residual: f64,
    pub max_replans: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            residual: 0.5,
            max_replans: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Control steps applied between re-solves.
    pub replan_period: usize,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self { replan_period: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Scripted,
    LlmHttp,
}

impl std::str::FromStr for PlannerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "llm" | "llm_http" => Ok(Self::LlmHttp),
            other => Err(Error::InvalidArgument(format!("unknown planner {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub kind: PlannerKind,
    /// Base URL of an OpenAI-compatible chat completions service.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: f64,
    /// Environment variable holding the API key (optional).
    pub api_key_env: String,
    /// Environment variables overriding `endpoint` and `model` when set.
    pub endpoint_env: String,
    pub model_env: String,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            kind: PlannerKind::Scripted,
            endpoint: "http://127.0.0.1:8000".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            timeout_secs: 60.0,
            api_key_env: "DEMONSTRATE_LLM_API_KEY".into(),
            endpoint_env: "DEMONSTRATE_LLM_ENDPOINT".into(),
            model_env: "DEMONSTRATE_LLM_MODEL".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { runs: 50, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// State frames per page of `GET /api/episodes/{id}`.
    pub frame_page: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            frame_page: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dynamics: DynamicsModel,
    pub sim: SimConfig,
    pub oracle: OracleConfig,
    pub solver: SolverConfig,
    pub demos: DemoConfig,
    pub embedding: EmbeddingConfig,
    pub irl: IrlConfig,
    pub constraint: ConstraintConfig,
    pub validation: ValidationConfig,
    pub execution: ExecutionConfig,
    pub planner: PlannerConfig,
    pub benchmark: BenchmarkConfig,
    pub server: ServerConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    /// `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.irl.validate()?;
        if self.embedding.z == 0 {
            return Err(Error::Config("embedding.z must be >= 1".into()));
        }
        if !(self.validation.threshold > 0.0) || !(self.validation.residual >= 0.0) {
            return Err(Error::Config("validation thresholds must be positive".into()));
        }
        if self.validation.max_replans == 0 {
            return Err(Error::Config("validation.max_replans must be >= 1".into()));
        }
        if self.execution.replan_period == 0 {
            return Err(Error::Config("execution.replan_period must be >= 1".into()));
        }
        if self.server.frame_page == 0 {
            return Err(Error::Config("server.frame_page must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (model provenance).
    pub fn hash(&self) -> String {
        crate::model::sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn oracle(&self) -> Oracle {
        Oracle {
            library: FeatureLibrary::default(),
            weights: self.oracle.weights,
            dynamics: self.dynamics,
            sim: self.sim.clone(),
            solver: self.solver.clone(),
            obstacle_clearance: self.oracle.obstacle_clearance,
        }
    }
}
