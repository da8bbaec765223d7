//! Experiment configuration files.
//!
//! One JSON file per experiment, schema-validated with field paths on
//! error. A config may name a base file through `extends`; its own fields
//! override the base object key-by-key (deep merge).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tscopula::copula::CopulaConfig;
use tscopula::data::{CsvSchema, SineSpec, TaskKind, TaskSpec};
use tscopula::encoder::EncoderConfig;
use tscopula::estimator::{ModelConfig, TrainConfig};
use tscopula::flow::FlowConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Curriculum,
    Joint,
}

/// Where windows come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Sinusoids with additive noise; one window per seed offset.
    NoisySines {
        spec: SineSpec,
        n_train_windows: usize,
        n_val_windows: usize,
        /// "none", "uneven", or "unaligned"
        #[serde(default = "default_corruption")]
        corruption: String,
    },
    /// Bivariate ground-truth samples as degenerate two-token windows.
    Oracle { n_train: usize, n_val: usize },
    /// Long-format CSV.
    Csv { path: PathBuf, schema: CsvSchema },
}

fn default_corruption() -> String {
    "none".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub source: DataSource,
    /// Task mask applied to each window (ignored for oracle data, which is
    /// all-missing by construction).
    #[serde(default)]
    pub task: Option<TaskSpec>,
}

/// Model hyperparameters in flat, human-editable form; series and
/// covariate counts come from the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub marginal_width: usize,
    pub marginal_layers: usize,
    pub marginal_heads: usize,
    pub marginal_ff_hidden: usize,
    pub copula_width: usize,
    pub copula_layers: usize,
    pub copula_heads: usize,
    pub copula_ff_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub hypernet_hidden: usize,
    pub bins: usize,
    pub u_embed_dim: usize,
    pub copula_attn_heads: usize,
    pub copula_head_dim: usize,
    pub copula_mlp_hidden: usize,
    pub standardize: bool,
    pub max_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            marginal_width: 64,
            marginal_layers: 2,
            marginal_heads: 4,
            marginal_ff_hidden: 64,
            copula_width: 64,
            copula_layers: 2,
            copula_heads: 4,
            copula_ff_hidden: 64,
            flow_layers: 2,
            flow_hidden: 8,
            hypernet_hidden: 32,
            bins: 50,
            u_embed_dim: 8,
            copula_attn_heads: 2,
            copula_head_dim: 8,
            copula_mlp_hidden: 32,
            standardize: true,
            max_tokens: 4096,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, n_series: usize, n_covariates: usize) -> ModelConfig {
        let enc = |width: usize, layers: usize, heads: usize, ff: usize| EncoderConfig {
            width,
            layers,
            heads,
            ff_hidden: ff,
            n_series,
            n_covariates,
            max_tokens: self.max_tokens,
            positional_base: 10_000.0,
        };
        ModelConfig {
            n_series,
            n_covariates,
            marginal_encoder: enc(
                self.marginal_width,
                self.marginal_layers,
                self.marginal_heads,
                self.marginal_ff_hidden,
            ),
            copula_encoder: enc(
                self.copula_width,
                self.copula_layers,
                self.copula_heads,
                self.copula_ff_hidden,
            ),
            flow: FlowConfig { layers: self.flow_layers, hidden: self.flow_hidden },
            hypernet_hidden: self.hypernet_hidden,
            copula: CopulaConfig {
                bins: self.bins,
                u_embed_dim: self.u_embed_dim,
                heads: self.copula_attn_heads,
                head_dim: self.copula_head_dim,
                mlp_hidden: self.copula_mlp_hidden,
                z_width: self.copula_width,
            },
            standardize: self.standardize,
        }
    }
}

/// Backtest schedule for `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub cutoffs: Vec<f64>,
    pub retrain_cadence: usize,
    pub prediction_length: usize,
    pub history_length: usize,
    pub n_samples: usize,
    pub validation_reservation: usize,
    /// "forecast" or "interpolation"
    pub task: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            cutoffs: Vec::new(),
            retrain_cadence: 1,
            prediction_length: 4,
            history_length: 12,
            n_samples: 100,
            validation_reservation: 28,
            task: "forecast".into(),
        }
    }
}

/// Copula-demo settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_heldout: usize,
    pub n_copula_samples: usize,
    pub grid: usize,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection { n_train: 100_000, n_val: 2000, n_heldout: 10_000, n_copula_samples: 10_000, grid: 120 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub demo: DemoSection,
}

fn default_mode() -> TrainMode {
    TrainMode::Curriculum
}

/// Deep-merges `child` over `base` (objects merge key-wise; everything else
/// replaces).
fn merge(base: Value, child: Value) -> Value {
    match (base, child) {
        (Value::Object(mut b), Value::Object(c)) => {
            for (k, v) in c {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, c) => c,
    }
}

fn load_value(path: &Path, depth: usize) -> Result<Value> {
    if depth > 8 {
        bail!("extends chain deeper than 8 levels at {}", path.display());
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let extends = value
        .as_object_mut()
        .ok_or_else(|| anyhow!("config root must be an object"))?
        .remove("extends");
    if let Some(Value::String(base_rel)) = extends {
        let base_path = path.parent().unwrap_or(Path::new(".")).join(base_rel);
        let base = load_value(&base_path, depth + 1)?;
        return Ok(merge(base, value));
    }
    Ok(value)
}

/// Loads, merges (`extends`), and validates a config file. Errors carry the
/// offending field path.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let value = load_value(path, 0)?;
    let text = value.to_string();
    let deserializer = &mut serde_json::Deserializer::from_str(&text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(deserializer)
        .map_err(|e| anyhow!("config field `{}`: {}", e.path(), e.inner()))?;
    validate(&config)?;
    Ok(config)
}

fn validate(config: &ExperimentConfig) -> Result<()> {
    let fail = |path: &str, msg: &str| -> Result<()> { bail!("config field `{path}`: {msg}") };
    match &config.data.source {
        DataSource::NoisySines { spec, n_train_windows, n_val_windows, corruption } => {
            if *n_train_windows == 0 || *n_val_windows == 0 {
                return fail("data.source.n_train_windows", "must be positive");
            }
            if spec.n_series == 0 || spec.length == 0 {
                return fail("data.source.spec", "n_series and length must be positive");
            }
            if !["none", "uneven", "unaligned"].contains(&corruption.as_str()) {
                return fail("data.source.corruption", "must be none|uneven|unaligned");
            }
            if config.data.task.is_none() {
                return fail("data.task", "required for noisy-sines data");
            }
        }
        DataSource::Oracle { n_train, n_val } => {
            if *n_train == 0 || *n_val == 0 {
                return fail("data.source.n_train", "must be positive");
            }
        }
        DataSource::Csv { schema, .. } => {
            if schema.prediction_length == 0 {
                return fail("data.source.schema.prediction_length", "must be positive");
            }
            if config.data.task.is_none() {
                return fail("data.task", "required for csv data");
            }
        }
    }
    if let Some(task) = &config.data.task {
        match task.kind {
            TaskKind::Forecast if task.horizon == 0 => {
                return fail("data.task.horizon", "must be positive for forecast");
            }
            TaskKind::Interpolation if task.inner_range.0 == 0 || task.inner_range.1 < task.inner_range.0 => {
                return fail("data.task.inner_range", "must be a valid 1-based inclusive range");
            }
            _ => {}
        }
    }
    if config.model.bins < 2 {
        return fail("model.bins", "need at least 2 histogram bins");
    }
    if config.model.marginal_width % config.model.marginal_heads != 0 {
        return fail("model.marginal_width", "must be divisible by marginal_heads");
    }
    if config.model.copula_width % config.model.copula_heads != 0 {
        return fail("model.copula_width", "must be divisible by copula_heads");
    }
    config
        .train
        .validate()
        .map_err(|e| anyhow!("config field `train`: {e}"))?;
    if !["forecast", "interpolation"].contains(&config.eval.task.as_str()) {
        return fail("eval.task", "must be forecast|interpolation");
    }
    if config.eval.retrain_cadence == 0 {
        return fail("eval.retrain_cadence", "must be >= 1");
    }
    Ok(())
}
