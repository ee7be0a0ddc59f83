//! Run configurations. Each subcommand reads one JSON document; a file
//! previously written by ddspec also works, in which case the embedded
//! configuration is used.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ddspec_core::evaluate::RegimeSplit;
use ddspec_core::model::{EnvironmentModel, Manifold, Nsd, NuclearCoupling, SequenceFamily};
use ddspec_core::oracle::RandomBath;
use ddspec_core::sequences::SequenceSpec;

use crate::output::CONFIG_COMMENT;

/// Input problem the user has to fix; maps to exit code 1.
#[derive(Debug)]
pub struct SchemaError(pub String);

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SchemaError {}

pub fn schema(msg: impl Into<String>) -> anyhow::Error {
    SchemaError(msg.into()).into()
}

/// Reads a configuration document, or the configuration embedded in a
/// ddspec output file.
pub fn load_value(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('#') {
        let line = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .find_map(|l| {
                l.trim_start_matches('#')
                    .trim_start()
                    .strip_prefix(CONFIG_COMMENT)
            })
            .ok_or_else(|| {
                schema(format!(
                    "{}: no embedded configuration found",
                    path.display()
                ))
            })?;
        return serde_json::from_str(line)
            .map_err(|e| schema(format!("{}: embedded configuration: {e}", path.display())));
    }
    let value: Value =
        serde_json::from_str(&text).map_err(|e| schema(format!("{}: {e}", path.display())))?;
    match value.get("provenance").and_then(|p| p.get("config")) {
        Some(embedded) => Ok(embedded.clone()),
        None => Ok(value),
    }
}

/// Deserializes with the JSON path of the offending field in the message.
pub fn parse<T: DeserializeOwned>(value: &Value, origin: &Path) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." {
            String::new()
        } else {
            format!(" at `{path}`")
        };
        schema(format!("{}{at}: {}", origin.display(), e.into_inner()))
    })
}

/// Replaces a top-level field, for command-line overrides.
pub fn set_field(value: &mut Value, key: &str, v: impl Serialize) -> Result<()> {
    let obj = value
        .as_object_mut()
        .ok_or_else(|| schema("configuration must be a JSON object"))?;
    obj.insert(key.to_string(), serde_json::to_value(v)?);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Experiment {
    /// Coherence versus pulse count at one spacing.
    Decay {
        family: SequenceFamily,
        t1_us: f64,
        n: Vec<usize>,
    },
    /// Coherence versus spacing at one pulse count.
    Sweep {
        family: SequenceFamily,
        n: usize,
        t1_us: Vec<f64>,
    },
    /// Explicit sequences of one family.
    Sequences { specs: Vec<SequenceSpec> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shot_sigma: Option<f64>,
    pub model: EnvironmentModel,
    pub experiments: Vec<Experiment>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub sequence: SequenceSpec,
    pub f_min_khz: f64,
    pub f_max_khz: f64,
    pub points: usize,
    #[serde(default)]
    pub nsd: Option<Nsd>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub omega0_khz: f64,
    pub bath: BathSource,
    #[serde(default)]
    pub ms: Manifold,
    pub n_cycles: usize,
    /// Cycle times (µs) for the exact and Magnus comparison.
    pub cycle_times_us: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BathSource {
    Random(RandomBath),
    Spins(Vec<NuclearCoupling>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPlanConfig {
    pub nu_l_khz: f64,
    pub harmonics: Vec<u32>,
    pub window_khz: f64,
    pub points: usize,
}

fn default_l_max() -> usize {
    2
}

fn default_n_min() -> usize {
    ddspec_core::spectroscopy::DEFAULT_N_MIN
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    /// Rough ν_L used to assign each spacing to a filter harmonic.
    pub nu_l_khz_guess: f64,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default)]
    pub fixed_nu_l_khz: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    #[default]
    Phi,
    PhiPrime,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleiConfig {
    /// Field, manifold and bath spectrum; its nuclei are ignored.
    pub model: EnvironmentModel,
    #[serde(default)]
    pub initial_par_khz: Option<f64>,
    #[serde(default)]
    pub initial_perp_khz: Option<f64>,
    #[serde(default)]
    pub convention: Convention,
    #[serde(default)]
    pub par_span_khz: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDirectConfig {
    /// Field, nuclei, manifold and a Gaussian starting spectrum.
    pub template: EnvironmentModel,
    #[serde(default)]
    pub fixed_nu_l_khz: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub model: EnvironmentModel,
    /// Second model for the regime report; `model` then covers low n.
    #[serde(default)]
    pub high_n_model: Option<EnvironmentModel>,
    #[serde(default)]
    pub split: RegimeSplit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanDesign {
    pub harmonics: Vec<u32>,
    pub window_khz: f64,
    pub points: usize,
    pub family: SequenceFamily,
    pub n: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleGroup {
    /// Spacings as multiples of the resonant spacing π/(2ω0).
    pub t1_factors: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongCouplingConfig {
    pub omega0_khz: f64,
    pub bath: RandomBath,
    pub shot_sigma: f64,
    pub low: OracleGroup,
    pub high: OracleGroup,
    #[serde(default)]
    pub split: RegimeSplit,
    /// Starting Gaussian for both direct fits, centered on ω0.
    pub seed_nsd: Nsd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Generating environment; its spectrum must be Gaussian.
    pub truth: EnvironmentModel,
    pub scan: ScanDesign,
    #[serde(default)]
    pub shot_sigma: Option<f64>,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default)]
    pub strong_coupling: Option<StrongCouplingConfig>,
}

/// Comma-separated list for `--harmonics`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| anyhow!("cannot parse `{x}`"))
        })
        .collect()
}

pub fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        bail!(SchemaError(format!("`{name}` must be positive, got {v}")));
    }
    Ok(())
}
