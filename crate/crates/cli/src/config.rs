use std::path::Path;

use orojar_core::discovery::DiscoveryConfig;
use orojar_core::metrics::MetricsConfig;
use orojar_core::models::{DiscriminatorConfig, GeneratorConfig};
use orojar_core::regularizers::PenaltyConfig;
use orojar_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 20_000,
            resolution: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
    /// Generator layers exposed to the penalty.
    pub tap_count: usize,
    pub disc_base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            latent_dim: g.latent_dim,
            base_channels: g.base_channels,
            tap_count: g.tap_count,
            disc_base_channels: DiscriminatorConfig::default().base_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraverseConfig {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Base latents; one grid or strip row each.
    pub samples: usize,
}

impl Default for TraverseConfig {
    fn default() -> Self {
        Self {
            lo: -2.0,
            hi: 2.0,
            steps: 9,
            samples: 1,
        }
    }
}

/// Everything a command needs. Paths left empty resolve inside the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub dataset: String,
    pub checkpoint: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub penalty: PenaltyConfig,
    pub metrics: MetricsConfig,
    pub discovery: DiscoveryConfig,
    pub traverse: TraverseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs".into(),
            dataset: String::new(),
            checkpoint: String::new(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            penalty: PenaltyConfig::default(),
            metrics: MetricsConfig::default(),
            discovery: DiscoveryConfig::default(),
            traverse: TraverseConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.model.latent_dim,
            base_channels: self.model.base_channels,
            resolution: self.data.resolution,
            tap_count: self.model.tap_count,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.model.disc_base_channels,
            resolution: self.data.resolution,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.metrics.seed = self.seed;
        self.discovery.seed = self.seed;
    }
}

fn schema() -> Table {
    match Value::try_from(ExperimentConfig::default()).expect("config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn check_keys(input: &Table, schema: &Table, prefix: &str) -> Result<(), Failure> {
    for (k, v) in input {
        let path = join(prefix, k);
        match (schema.get(k), v) {
            (None, _) => return Err(Failure::Config(format!("unknown config key `{path}`"))),
            (Some(Value::Table(s)), Value::Table(t)) => check_keys(t, s, &path)?,
            (Some(Value::Table(_)), _) => return Err(Failure::Config(format!("config key `{path}` must be a table"))),
            _ => {}
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut Table, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::Config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(Failure::Config(format!("`{}` is not a table", parts[..=i].join(".")))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn read_file(path: &Path) -> Result<Table, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::MissingInput(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if is_json {
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Value::try_from(json).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
    } else {
        Value::Table(text.parse::<Table>().map_err(|e| Failure::Config(format!("{}: {}", path.display(), e.message())))?)
    };
    match value {
        Value::Table(t) => Ok(t),
        _ => Err(Failure::Config(format!("{}: top level must be a table", path.display()))),
    }
}

/// Reads the optional config file, applies dotted overrides and validates
/// every key against the schema.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut table = match path {
        Some(p) => read_file(p)?,
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    check_keys(&table, &schema(), "")?;
    let mut cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Config(e.message().to_string()))?;
    cfg.propagate_seed();
    Ok(cfg)
}

fn flatten(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = join(prefix, k);
        match v {
            Value::Table(t) => flatten(t, &path, out),
            other => out.push(format!("  {path} = {other}")),
        }
    }
}

/// Every config key with its default, one per line.
pub fn key_reference() -> String {
    let mut lines = Vec::new();
    flatten(&schema(), "", &mut lines);
    format!(
        "Config keys (TOML or JSON file via --config, or --set KEY=VALUE):\n{}\n\nThe output root is --out, else $OROJAR_OUT, else out_dir.",
        lines.join("\n")
    )
}
