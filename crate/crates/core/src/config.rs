//! Run configuration: every tunable of a run behind flat dotted keys.
//!
//! Files are flat JSON objects (`{"train.beta": 1.0, "sim.v_max": 2.0}`);
//! `--set key=value` overrides apply on top. Unknown keys are rejected, and
//! the fully resolved configuration is written next to every output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{Fusion, ModelConfig};
use crate::simulator::SimConfig;
use crate::training::{ElboVariant, TrainingConfig};

/// File name of the resolved configuration inside output directories.
pub const RESOLVED_CONFIG: &str = "config.json";

/// Key of the training seed, which is driven by the top-level `seed`.
const TRAIN_SEED: &str = "train.seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub held_out: usize,
    /// Steps per trajectory.
    pub length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_count: 200, held_out: 20, length: 200 }
    }
}

/// Network sizes; the modality list comes from the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub deter_dim: usize,
    pub stoch_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub conv_channels: [usize; 3],
}

impl Default for ModelDims {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            deter_dim: d.deter_dim,
            stoch_dim: d.stoch_dim,
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            conv_channels: d.conv_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<String>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream (data, init, batches, noise, subsets).
    pub seed: u64,
    pub data: DataConfig,
    pub sim: SimConfig,
    pub model: ModelDims,
    /// Reconstruction weight per modality name.
    pub lambda: BTreeMap<String, f64>,
    pub train: TrainingConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let lambda = sim.modality_specs().into_iter().map(|m| (m.name, m.lambda)).collect();
        Self {
            seed: 0,
            data: DataConfig::default(),
            sim,
            model: ModelDims::default(),
            lambda,
            train: TrainingConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn flatten_into(prefix: &str, value: Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf);
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flat keys never nest under a leaf");
            }
        }
    }
    Value::Object(root)
}

/// Parses the value of a `--set`: JSON when it parses, else a plain string.
fn parse_set_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

impl RunConfig {
    /// Every configurable key with its current value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten_into("", serde_json::to_value(self).expect("config serializes"), &mut flat);
        flat.remove(TRAIN_SEED);
        flat
    }

    fn from_flat(mut flat: BTreeMap<String, Value>) -> Result<Self> {
        let seed = flat.get("seed").cloned().unwrap_or(Value::from(0));
        flat.insert(TRAIN_SEED.into(), seed);
        let config: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("invalid value: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies `overrides` (already-parsed values) on top of `self`.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let mut flat = self.to_flat();
        for (key, value) in overrides {
            match flat.get_mut(key) {
                Some(slot) => *slot = value,
                None => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        Self::from_flat(flat)
    }

    /// Defaults, then the flat JSON file at `path` if any, then `sets` of
    /// the form `key=value`.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            let Value::Object(map) = value else {
                return Err(Error::format(path, "config must be a JSON object with dotted keys"));
            };
            config = config.with_overrides(map.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
        }
        let mut parsed = Vec::with_capacity(sets.len());
        for set in sets {
            let (key, value) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {set}` is not of the form key=value")))?;
            parsed.push((key.trim(), parse_set_value(value.trim())));
        }
        config.with_overrides(parsed)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.train_count == 0 || self.data.length < 2 {
            return Err(Error::Config("data: need at least one training trajectory of 2+ steps".into()));
        }
        let names: Vec<String> = self.sim.modality_specs().into_iter().map(|m| m.name).collect();
        for name in self.lambda.keys() {
            if !names.contains(name) {
                return Err(Error::Config(format!("lambda given for unknown modality `{name}`")));
            }
        }
        self.model_config(self.train.elbo).validate()
    }

    /// Model layout for the simulator's modalities; `offset`/`scale` are
    /// left at identity until fitted on training data.
    pub fn model_config(&self, elbo: ElboVariant) -> ModelConfig {
        let mut modalities = self.sim.modality_specs();
        for m in &mut modalities {
            if let Some(&l) = self.lambda.get(&m.name) {
                m.lambda = l;
            }
        }
        ModelConfig {
            modalities,
            deter_dim: self.model.deter_dim,
            stoch_dim: self.model.stoch_dim,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            conv_channels: self.model.conv_channels,
            fusion: if elbo == ElboVariant::Concat { Fusion::Concat } else { Fusion::Poe },
            ..ModelConfig::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// Writes the resolved configuration to `dir/config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }
}
