//! Experiment configuration: a flat JSON file of dotted keys, overridden by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ltadapt::data::{FoundationSpec, LongTailSpec, SyntheticTaskSpec};
use ltadapt::trainer::TrainConfig;
use ltadapt::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// The downstream long-tailed task; the training draw is reseeded per run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub world_seed: u64,
    pub classes: usize,
    pub n1: u64,
    pub beta: f64,
    pub noise: f64,
    pub test_per_class: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { world_seed: 5, classes: 10, n1: 500, beta: 100.0, noise: 1.0, test_per_class: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub foundation: FoundationSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Foundation bundle cache; `<out>/foundation` when unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            foundation: FoundationSpec::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("out"),
            cache_dir: None,
        }
    }
}

/// Short names accepted both as flags and as file keys.
pub const ALIASES: &[(&str, &str)] = &[
    ("beta", "task.beta"),
    ("classes", "task.classes"),
    ("n1", "task.n1"),
    ("epochs", "train.epochs"),
    ("batch-size", "train.batch_size"),
    ("lr", "train.lr"),
    ("momentum", "train.momentum"),
    ("alpha", "train.alpha"),
    ("mu", "train.loss.mu"),
    ("gamma", "train.loss.gamma"),
    ("lambda1", "train.loss.lambda1"),
    ("lambda2", "train.loss.lambda2"),
    ("lambda3", "train.loss.lambda3"),
    ("seed", "seeds"),
];

const UNHASHED: &[&str] = &["out", "cache_dir"];

pub fn resolve_key(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, p)| p)
}

fn flatten(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(x, &key, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn same_kind(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (Value::Number(a), Value::Number(b)) => !a.is_u64() || b.is_u64(),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) | (Value::Array(_), Value::Array(_)) => {
            true
        }
        _ => false,
    }
}

impl ExperimentConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }

    /// Applies `(key, value)` overrides in order; keys are dotted paths or aliases.
    /// `ablate` takes a comma list (or array) of flags to switch off.
    pub fn apply(&mut self, overrides: &[(String, Value)]) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (key, value) in overrides {
            if key == "ablate" {
                for flag in ablate_list(value)? {
                    set_leaf(&mut tree, &format!("train.ablation.{flag}"), Value::Bool(false), key)?;
                }
                continue;
            }
            let path = resolve_key(key);
            let value = match (path, value) {
                ("seeds", Value::Number(_)) => Value::Array(vec![value.clone()]),
                ("seeds", Value::String(s)) => Value::Array(parse_u64_list(s, key)?.into_iter().map(Value::from).collect()),
                _ => value.clone(),
            };
            set_leaf(&mut tree, path, value, key)?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Reads a config file: top-level keys may be dotted paths, aliases or nested objects.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?;
        let Value::Object(map) = v else {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        };
        let mut overrides = Vec::new();
        for (k, x) in map {
            if k == "ablate" || !x.is_object() {
                overrides.push((k, x));
            } else {
                let mut flat = BTreeMap::new();
                flatten(&x, &k, &mut flat);
                overrides.extend(flat);
            }
        }
        let mut cfg = Self::default();
        cfg.apply(&overrides)?;
        Ok(cfg)
    }

    /// SHA-256 over the sorted flat config, excluding output locations.
    pub fn hash(&self) -> String {
        let mut flat = self.to_flat();
        UNHASHED.iter().for_each(|k| {
            flat.remove(*k);
        });
        flat.remove("train.seed");
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&flat).expect("flat config serializes"));
        format!("{:x}", h.finalize())
    }

    pub fn task_spec(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            grid: self.foundation.encoder.grid,
            patch: self.foundation.encoder.patch,
            world_seed: self.task.world_seed,
            noise: self.task.noise,
            train: LongTailSpec { classes: self.task.classes, n1: self.task.n1, beta: self.task.beta, seed },
            test_per_class: self.task.test_per_class,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out.join("foundation"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.task.test_per_class == 0 {
            return Err(Error::Config("task.test_per_class must be >= 1".into()));
        }
        self.foundation.encoder.validate()?;
        self.task_spec(self.seeds[0]).validate()?;
        self.train.validate()?;
        self.train_config(0).encoder_config(&self.foundation.encoder).validate()
    }
}

fn set_leaf(tree: &mut Value, path: &str, value: Value, key: &str) -> Result<()> {
    let mut node = tree;
    for part in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    if node.is_object() || !same_kind(node, &value) {
        return Err(Error::Config(format!("config key `{key}` expects a value like {node}, got {value}")));
    }
    *node = value;
    Ok(())
}

fn ablate_list(v: &Value) -> Result<Vec<String>> {
    let items: Vec<String> = match v {
        Value::String(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        Value::Array(a) => a.iter().map(|x| x.as_str().map(str::to_string)).collect::<Option<_>>().unwrap_or_default(),
        _ => return Err(Error::Config("`ablate` takes a list of sg, init, cf, fit".into())),
    };
    for f in &items {
        if !["sg", "init", "cf", "fit"].contains(&f.as_str()) {
            return Err(Error::Config(format!("`ablate` got unknown component `{f}`")));
        }
    }
    Ok(items)
}

pub fn parse_u64_list(s: &str, key: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("`{key}` expects integers, got `{x}`"))))
        .collect()
}

pub fn parse_f64_list(s: &str, key: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("`{key}` expects numbers, got `{x}`"))))
        .collect()
}
