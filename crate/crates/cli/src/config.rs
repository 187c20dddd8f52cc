//! Layered configuration: flags over environment over config file over
//! built-in defaults. Layers are merged as JSON trees before one typed
//! deserialization, so every layer can set any field.

use std::collections::BTreeMap;
use std::path::PathBuf;

use agenet::dataset::Ratios;
use agenet::hpo::{SearchSpace, DEFAULT_BUDGET, DEFAULT_EPOCH_CAP, DEFAULT_FINAL_EPOCHS};
use agenet::seed::{derive_seed, tag};
use agenet::training::TrainSpec;
use agenet::ModelSpec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_DATA_ROOT: &str = "AGENET_DATA_ROOT";
pub const ENV_DEVICE: &str = "AGENET_DEVICE";
pub const SUPPORTED_DEVICES: [&str; 1] = ["cpu"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data_root: Option<PathBuf>,
    pub runs_dir: PathBuf,
    pub device: String,
    /// Every other seed is derived from this one.
    pub seed: u64,
    /// Backbone weights file; random initialization when absent.
    pub pretrained: Option<PathBuf>,
    pub split: SplitSection,
    pub train: TrainSpec,
    pub model: ModelSpec,
    pub hpo: HpoSection,
    pub eval: EvalSection,
    pub parity: ParitySection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: Ratios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpoSection {
    pub budget: usize,
    pub epoch_cap: usize,
    pub final_epochs: usize,
    pub space: SearchSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParitySection {
    /// Random subset size; the whole split when absent.
    pub limit: Option<usize>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub runs: usize,
    pub warmup: usize,
    pub budget_ms: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_root: None,
            runs_dir: PathBuf::from("runs"),
            device: "cpu".into(),
            seed: 42,
            pretrained: None,
            split: SplitSection {
                ratios: Ratios::default(),
            },
            train: TrainSpec::default(),
            model: ModelSpec::default(),
            hpo: HpoSection {
                budget: DEFAULT_BUDGET,
                epoch_cap: DEFAULT_EPOCH_CAP,
                final_epochs: DEFAULT_FINAL_EPOCHS,
                space: SearchSpace::default(),
            },
            eval: EvalSection { batch_size: 64 },
            parity: ParitySection {
                limit: None,
                batch_size: 16,
            },
            bench: BenchSection {
                runs: agenet::bench::DEFAULT_RUNS,
                warmup: agenet::bench::DEFAULT_WARMUP,
                budget_ms: agenet::bench::DEFAULT_BUDGET_MS,
            },
        }
    }
}

/// A rejected configuration, naming the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl ToString) -> Self {
        ConfigError {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

/// One `--flag` translated to a dotted config path.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: Value,
}

impl Override {
    pub fn new(path: &str, value: impl Serialize) -> Self {
        Override {
            path: path.to_string(),
            value: serde_json::to_value(value).expect("override value"),
        }
    }
}

/// The layers in increasing precedence. `base` replaces the defaults when
/// replaying a manifest.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    pub base: Option<Value>,
    pub file: Option<String>,
    pub env: BTreeMap<String, String>,
    pub flags: Vec<Override>,
}

impl Layers {
    pub fn from_process_env() -> BTreeMap<String, String> {
        [ENV_DATA_ROOT, ENV_DEVICE]
            .into_iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
            .collect()
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = Value::Object(Map::new());
        }
        cur = cur.get_mut(*p).expect("just inserted");
    }
    cur[parts[parts.len() - 1]] = value;
}

/// Merges the layers, types the result section by section and validates it.
pub fn resolve(layers: &Layers) -> Result<Config, ConfigError> {
    let mut tree = match &layers.base {
        Some(b) => b.clone(),
        None => serde_json::to_value(Config::default()).expect("defaults serialize"),
    };
    if let Some(text) = &layers.file {
        let parsed: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new("config file", e.message()))?;
        let value = serde_json::to_value(parsed).map_err(|e| ConfigError::new("config file", e))?;
        merge(&mut tree, value);
    }
    if let Some(v) = layers.env.get(ENV_DATA_ROOT) {
        set_path(&mut tree, "data_root", Value::String(v.clone()));
    }
    if let Some(v) = layers.env.get(ENV_DEVICE) {
        set_path(&mut tree, "device", Value::String(v.clone()));
    }
    for o in &layers.flags {
        set_path(&mut tree, &o.path, o.value.clone());
    }
    let config = typed(tree)?;
    config.validate()?;
    Ok(config)
}

fn typed(tree: Value) -> Result<Config, ConfigError> {
    let Value::Object(map) = &tree else {
        return Err(ConfigError::new("config", "top level must be a table"));
    };
    let known = serde_json::to_value(Config::default()).expect("defaults");
    for (k, v) in map {
        if known.get(k).is_none() {
            return Err(ConfigError::new(k, "unknown field"));
        }
        if let (Value::Object(sub), Some(Value::Object(ksub))) = (v, known.get(k)) {
            for sk in sub.keys() {
                if !ksub.contains_key(sk) {
                    return Err(ConfigError::new(format!("{k}.{sk}"), "unknown field"));
                }
            }
            let probe = |e: serde_json::Error| ConfigError::new(k, e);
            match k.as_str() {
                "split" => {
                    serde_json::from_value::<SplitSection>(v.clone()).map_err(probe)?;
                }
                "train" => {
                    serde_json::from_value::<TrainSpec>(v.clone()).map_err(probe)?;
                }
                "model" => {
                    serde_json::from_value::<ModelSpec>(v.clone()).map_err(probe)?;
                }
                "hpo" => {
                    serde_json::from_value::<HpoSection>(v.clone()).map_err(probe)?;
                }
                "eval" => {
                    serde_json::from_value::<EvalSection>(v.clone()).map_err(probe)?;
                }
                "parity" => {
                    serde_json::from_value::<ParitySection>(v.clone()).map_err(probe)?;
                }
                "bench" => {
                    serde_json::from_value::<BenchSection>(v.clone()).map_err(probe)?;
                }
                _ => {}
            }
        }
    }
    serde_json::from_value(tree).map_err(|e| ConfigError::new("config", e))
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !SUPPORTED_DEVICES.contains(&self.device.as_str()) {
            return Err(ConfigError::new(
                "device",
                format!("{:?} is not available; supported: {SUPPORTED_DEVICES:?}", self.device),
            ));
        }
        self.split.ratios.validate().map_err(|e| ConfigError::new("split.ratios", e))?;
        self.train.validate().map_err(|e| ConfigError::new("train", e))?;
        self.model.validate().map_err(|e| ConfigError::new("model", e))?;
        self.hpo.space.validate().map_err(|e| ConfigError::new("hpo.space", e))?;
        if self.hpo.budget == 0 {
            return Err(ConfigError::new("hpo.budget", "must be at least 1"));
        }
        if self.hpo.epoch_cap == 0 || self.hpo.final_epochs == 0 {
            return Err(ConfigError::new("hpo", "epoch_cap and final_epochs must be at least 1"));
        }
        if self.eval.batch_size == 0 || self.parity.batch_size == 0 {
            return Err(ConfigError::new("eval.batch_size", "must be at least 1"));
        }
        if self.parity.limit == Some(0) {
            return Err(ConfigError::new("parity.limit", "must be at least 1"));
        }
        if self.bench.runs == 0 {
            return Err(ConfigError::new("bench.runs", "must be at least 1"));
        }
        if !(self.bench.budget_ms > 0.0) {
            return Err(ConfigError::new("bench.budget_ms", "must be positive"));
        }
        Ok(())
    }

    /// Seeds of each stage, derived from the top-level seed.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [
            ("top", self.seed),
            ("split", self.seed),
            ("train", derive_seed(self.seed, &[tag("train")])),
            ("model_init", derive_seed(self.seed, &[tag("model")])),
            ("backbone_init", derive_seed(self.seed, &[tag("backbone")])),
            ("hpo", derive_seed(self.seed, &[tag("hpo")])),
            ("parity_subset", derive_seed(self.seed, &[tag("parity")])),
            ("bench_input", derive_seed(self.seed, &[tag("bench")])),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// The training spec with its seed derived from the top-level seed.
    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            seed: self.seeds()["train"],
            ..self.train.clone()
        }
    }
}
