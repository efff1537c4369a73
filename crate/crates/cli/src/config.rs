//! Run configuration: the shipped defaults, an optional JSON file merged over
//! them, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pmtkg::eval::BenchmarkConfig;
use pmtkg::graph::GraphVariant;
use pmtkg::impute::{ForestConfig, IpwConfig, MiceConfig};
use pmtkg::missing::{Mechanism, MechanismParams};
use pmtkg::{Error, Result};
use pmtkg_assistant::service::ServiceConfig;

pub const DEFAULT_CONFIG: &str = include_str!("../resources/default-config.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
    Replay,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Replay cache read by `replay` and written by `live`.
    pub replay_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Generator config file; the built-in milton-like config when null.
    pub generator: Option<PathBuf>,
    /// Overrides of the generator's own `n` and `seed`.
    pub n: Option<usize>,
    pub seed: Option<u64>,
    /// Merged over the generator's `vulnerable_shift`.
    pub vulnerable_shift: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub variant: GraphVariant,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub params: MechanismParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMethod {
    Mean,
    Mice,
    Missforest,
    Ipwmi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeConfig {
    pub method: ImputeMethod,
    pub seed: u64,
    pub mice: MiceConfig,
    pub forest: ForestConfig,
    pub ipw: IpwConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub methods: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub mechanisms: Vec<Mechanism>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub divergence_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Run directories are created under this path.
    pub output_dir: PathBuf,
    /// Codebook file; the built-in codebook when null.
    pub codebook: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub synth: SynthConfig,
    pub graph: GraphConfig,
    pub simulate: SimulateConfig,
    pub impute: ImputeConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub benchmark: BenchmarkConfig,
    pub ablation: AblationConfig,
    pub coverage: CoverageConfig,
    pub serve: ServiceConfig,
}

/// Objects merge key by key; anything else in `over` replaces `base`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl CliConfig {
    pub fn defaults() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("default config resource")
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut v: Value = serde_json::from_str(DEFAULT_CONFIG)?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let over: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut v, over);
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("configuration: {e}")))
    }
}
