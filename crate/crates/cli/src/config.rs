//! Experiment configuration files.
//!
//! An experiment is a JSON document with a `federation` block holding every
//! [`FederationConfig`] field except the sweep axes: `theta` and `seed` come
//! from the top-level `thetas` and `seeds` lists, and the evaluation period
//! from `eval_every`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use deltafl::data::{
    gen_gaussian_mixture, gen_hetero_logistic, load_devices_jsonl, split_devices,
    HeteroLogisticSpec, Population,
};
use deltafl::fed::{FederationConfig, InexactnessSchedule, WStepSolver};
use deltafl::superquantile::ConformityLevel;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Keys of the federation block that are set per run.
const SWEEP_KEYS: [&str; 3] = ["theta", "seed", "eval_every"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmChoice {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "deltafl")]
    DeltaFl,
    AmMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    HeteroLogistic(HeteroLogisticSpec),
    GaussianMixture {
        means: Vec<Vec<f64>>,
        n_per_device: usize,
        #[serde(default)]
        seed: u64,
    },
    /// JSON-lines device file; a relative path is taken relative to the
    /// config file.
    File {
        path: PathBuf,
    },
}

/// Random device-level train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Without a split every device is used for training and no test
    /// metrics are reported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmSettings {
    #[serde(default)]
    pub inexactness: InexactnessSchedule,
    #[serde(default)]
    pub w_step: WStepSolver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: u32,
    data: DataConfig,
    algorithm: AlgorithmChoice,
    federation: Map<String, Value>,
    thetas: Vec<f64>,
    seeds: Vec<u64>,
    #[serde(default = "default_eval_every")]
    eval_every: usize,
    output_dir: PathBuf,
    #[serde(default)]
    am: AmSettings,
}

fn default_eval_every() -> usize {
    10
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub algorithm: AlgorithmChoice,
    /// Federation settings with `theta`, `seed` and `eval_every` filled from
    /// the first cell; see [`ExperimentConfig::cell`].
    pub federation: FederationConfig,
    pub thetas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub output_dir: PathBuf,
    pub am: AmSettings,
    /// Directory that relative data paths are resolved against.
    pub base_dir: PathBuf,
}

/// Command-line replacements for config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub thetas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rounds: Option<usize>,
    pub algorithm: Option<AlgorithmChoice>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, overrides)
    }

    pub fn parse(text: &str, base_dir: PathBuf, overrides: &Overrides) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut raw: RawConfig = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| anyhow!("invalid config at `{}`: {}", e.path(), e.inner()))?;
        if raw.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version: unsupported version {} (expected {SCHEMA_VERSION})",
                raw.schema_version
            );
        }
        if let Some(dir) = &overrides.output_dir {
            raw.output_dir = dir.clone();
        }
        if !overrides.thetas.is_empty() {
            raw.thetas = overrides.thetas.clone();
        }
        if !overrides.seeds.is_empty() {
            raw.seeds = overrides.seeds.clone();
        }
        if let Some(a) = overrides.algorithm {
            raw.algorithm = a;
        }
        if let Some(r) = overrides.rounds {
            raw.federation.insert("rounds".into(), r.into());
        }

        if raw.thetas.is_empty() {
            bail!("thetas: must list at least one value");
        }
        for (i, &t) in raw.thetas.iter().enumerate() {
            ConformityLevel::new(t).map_err(|e| anyhow!("thetas[{i}]: {e}"))?;
        }
        if raw.seeds.is_empty() {
            bail!("seeds: must list at least one value");
        }
        if raw.eval_every == 0 {
            bail!("eval_every: must be at least 1");
        }
        if let Some(key) = SWEEP_KEYS.iter().find(|k| raw.federation.contains_key(**k)) {
            bail!("federation.{key}: set at the top level (`thetas`, `seeds`, `eval_every`), not in the federation block");
        }
        let mut fed = raw.federation.clone();
        fed.insert("theta".into(), raw.thetas[0].into());
        fed.insert("seed".into(), raw.seeds[0].into());
        fed.insert("eval_every".into(), raw.eval_every.into());
        let federation: FederationConfig = serde_path_to_error::deserialize(Value::Object(fed))
            .map_err(|e| anyhow!("invalid config at `federation.{}`: {}", e.path(), e.inner()))?;
        federation.validate().context("federation")?;
        raw.am.inexactness.validate().context("am.inexactness")?;
        raw.am.w_step.validate().context("am.w_step")?;
        validate_data(&raw.data)?;

        Ok(Self {
            data: raw.data,
            algorithm: raw.algorithm,
            federation,
            thetas: raw.thetas,
            seeds: raw.seeds,
            eval_every: raw.eval_every,
            output_dir: raw.output_dir,
            am: raw.am,
            base_dir,
        })
    }

    /// Federation settings of one `(theta, seed)` cell.
    pub fn cell(&self, theta: f64, seed: u64) -> FederationConfig {
        FederationConfig {
            theta,
            seed,
            ..self.federation.clone()
        }
    }

    /// The effective configuration with all defaults filled in.
    pub fn normalized(&self) -> Value {
        let mut fed = match serde_json::to_value(&self.federation) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("federation config serializes to an object"),
        };
        for key in SWEEP_KEYS {
            fed.remove(key);
        }
        let raw = RawConfig {
            schema_version: SCHEMA_VERSION,
            data: self.data.clone(),
            algorithm: self.algorithm,
            federation: fed,
            thetas: self.thetas.clone(),
            seeds: self.seeds.clone(),
            eval_every: self.eval_every,
            output_dir: self.output_dir.clone(),
            am: self.am,
        };
        serde_json::to_value(raw).expect("config serializes")
    }

    /// Builds the training population and, when a split is configured, the
    /// test population.
    pub fn populations(&self) -> Result<(Population, Option<Population>)> {
        let pop = match &self.data.source {
            DataSource::HeteroLogistic(spec) => gen_hetero_logistic(spec)?,
            DataSource::GaussianMixture {
                means,
                n_per_device,
                seed,
            } => gen_gaussian_mixture(means, *n_per_device, *seed)?,
            DataSource::File { path } => load_devices_jsonl(self.base_dir.join(path))?,
        };
        match self.data.split {
            None => Ok((pop, None)),
            Some(s) => {
                let (train, test) = split_devices(&pop, s.train_fraction, s.seed)?;
                Ok((train, Some(test)))
            }
        }
    }
}

fn validate_data(data: &DataConfig) -> Result<()> {
    match &data.source {
        DataSource::HeteroLogistic(spec) => spec.validate().context("data.source")?,
        DataSource::GaussianMixture {
            means,
            n_per_device,
            ..
        } => {
            if means.len() < 2 {
                bail!("data.source.means: need at least two components");
            }
            if means
                .iter()
                .any(|m| m.len() != means[0].len() || m.is_empty())
            {
                bail!("data.source.means: every mean needs the same non-zero dimension");
            }
            if *n_per_device == 0 {
                bail!("data.source.n_per_device: must be at least 1");
            }
        }
        DataSource::File { .. } => {}
    }
    if let Some(s) = data.split {
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            bail!(
                "data.split.train_fraction: {} is not in (0, 1)",
                s.train_fraction
            );
        }
    }
    Ok(())
}
