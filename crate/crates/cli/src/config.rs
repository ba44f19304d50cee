//! Run configuration: defaults, then the TOML file, then `PROTOGNN_*`
//! environment variables, then `--set` flags, then the dedicated flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use protognn::synth::{BaShapesConfig, MotifDatasetConfig};
use protognn::task::Mode;
use protognn::trainer::TrainConfig;
use protognn::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "PROTOGNN_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of training and dataset generation.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Expected task kind; a dataset of the other kind is rejected.
    pub mode: Option<Mode>,
    /// Dataset file; when absent the dataset is generated from `dataset`.
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: PathBuf::from("out"),
            mode: None,
            data: None,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// One of `ba-shapes`, `cyclic`, `motif`.
    pub name: Option<String>,
    pub ba_shapes: BaShapesConfig,
    pub cyclic: CyclicConfig,
    pub motif: MotifDatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CyclicConfig {
    pub graphs: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
}

impl Default for CyclicConfig {
    fn default() -> Self {
        Self {
            graphs: 400,
            min_size: 3,
            max_size: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub confidence: bool,
    pub silhouette: bool,
    pub gt_distance: bool,
    /// Epochs of the evaluation autoencoder; defaults to `train.pretrain_epochs`.
    pub autoencoder_epochs: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            confidence: true,
            silhouette: true,
            gt_distance: true,
            autoencoder_epochs: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Training-config key to the values it takes; the grid is the product.
    pub grid: BTreeMap<String, Vec<Value>>,
}

impl RunConfig {
    /// Applies the top-level seed everywhere a seed is used.
    fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.dataset.ba_shapes.seed = s;
            self.dataset.cyclic.seed = s;
            self.dataset.motif.seed = s;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// `key=value` with a dotted key; the value is read as a TOML literal and
/// falls back to a plain string.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("expected KEY=VALUE, got `{text}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Usage(format!("invalid key `{key}`")));
    }
    Ok((key.to_string(), parse_value(raw.trim())))
}

pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `PROTOGNN_TRAIN__PRETRAIN_EPOCHS=5` sets `train.pretrain_epochs`.
pub fn env_assignments(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| toml_error(path, &text, e))
}

fn toml_error(path: &Path, text: &str, e: toml::de::Error) -> Error {
    let context = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {column}")
        }
        None => "document".into(),
    };
    Error::Parse {
        path: path.to_path_buf(),
        context,
        message: e.message().to_string(),
    }
}

pub fn from_table(table: Table) -> Result<RunConfig> {
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().trim().replace('\n', " ")))?;
    cfg.propagate_seed();
    Ok(cfg)
}

/// Later layers win.
pub fn resolve(file: Option<&Path>, layers: &[(String, Value)]) -> Result<RunConfig> {
    let mut table = match file {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    for (k, v) in layers {
        set_path(&mut table, k, v.clone())?;
    }
    from_table(table)
}

/// Training config with `overrides` applied to the `train` section.
pub fn train_with(base: &TrainConfig, overrides: &[(String, Value)]) -> Result<TrainConfig> {
    let mut table = Table::try_from(base).expect("train config serializes");
    for (k, v) in overrides {
        set_path(&mut table, k, v.clone())?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().trim().replace('\n', " ")))
}
