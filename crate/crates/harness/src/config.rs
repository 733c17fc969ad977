//! Suite configuration: one TOML document with a section per component.
//!
//! A user file only needs the keys it changes; everything else comes from
//! the defaults. Keys are checked against the defaults before anything is
//! deserialized so that a typo is reported by its dotted path.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use twinlab::control::llm::HttpBackendConfig;
use twinlab::control::{LlmControllerConfig, MpcConfig, RlConfig};
use twinlab::models::{ArxOptions, HamTraining, LstmTraining};
use twinlab::plant::PlantConfig;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Window length fed to every model and used to seed rollouts.
    pub lookback: usize,
    /// Share of each training set used for fitting; the rest validates.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            lookback: 10,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSuiteConfig {
    /// Any of `Linear`, `PBM`, `LSTM`, `HAM`.
    pub models: Vec<String>,
    /// Scenario names to run; empty runs all six.
    pub scenarios: Vec<String>,
}

impl Default for ModelSuiteConfig {
    fn default() -> Self {
        Self {
            models: ["Linear", "PBM", "LSTM", "HAM"].map(String::from).to_vec(),
            scenarios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub http: HttpBackendConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            http: HttpBackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSuiteConfig {
    /// Controller labels, run in this order. See [`crate::suite::CONTROLLERS`].
    pub controllers: Vec<String>,
    /// Reference profile presets.
    pub references: Vec<String>,
    /// Plant noise seeds; every controller runs once per seed and reference.
    pub episode_seeds: Vec<u64>,
    pub steps: usize,
    pub initial_temp: f64,
    /// Training set the linear model, the twin and the history store come from.
    pub train_set: String,
}

impl Default for ControllerSuiteConfig {
    fn default() -> Self {
        Self {
            controllers: [
                "MPC",
                "MPC-P",
                "RL-Off",
                "RL-Off-P",
                "RL-Plant-P",
                "LLM",
                "LLM-P",
                "LLM-History",
                "LLM-Predict",
            ]
            .map(String::from)
            .to_vec(),
            references: vec!["staircase".into()],
            episode_seeds: vec![11, 12],
            steps: 240,
            initial_temp: 26.0,
            train_set: "wide".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Added to every seed below, so one number moves the whole experiment.
    pub seed: u64,
    pub plant: PlantConfig,
    pub data: DataConfig,
    pub arx: ArxOptions,
    pub lstm: LstmTraining,
    pub ham: HamTraining,
    /// The unpenalized MPC.
    pub mpc: MpcConfig,
    /// The MPC with actuation penalty.
    pub mpc_p: MpcConfig,
    /// Shared DQN settings; the weights are those of the penalized agents.
    pub rl: RlConfig,
    pub llm: LlmControllerConfig,
    pub backend: BackendConfig,
    pub models: ModelSuiteConfig,
    pub controllers: ControllerSuiteConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plant: PlantConfig::default(),
            data: DataConfig::default(),
            arx: ArxOptions::default(),
            lstm: LstmTraining::default(),
            ham: HamTraining::default(),
            mpc: MpcConfig::no_penalty(),
            mpc_p: MpcConfig::penalty(),
            rl: RlConfig::default(),
            llm: LlmControllerConfig::default(),
            backend: BackendConfig::default(),
            models: ModelSuiteConfig::default(),
            controllers: ControllerSuiteConfig::default(),
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Overlays `user` on `base`, rejecting keys `base` does not have and scalars
/// of the wrong type. Integers are accepted where a float is expected.
/// Where either side is not a table (untagged values such as the ambient
/// profile) the user value replaces the default wholesale.
fn overlay(base: &mut Value, user: Value, path: &str) -> Result<(), HarnessError> {
    match (base, user) {
        (Value::Table(b), Value::Table(u)) => {
            for (k, v) in u {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v, &key)?,
                    None => return Err(bad(&key, "unknown key")),
                }
            }
            Ok(())
        }
        (slot @ Value::Float(_), Value::Integer(i)) => {
            *slot = Value::Float(i as f64);
            Ok(())
        }
        (slot, v) => {
            let same = std::mem::discriminant(slot) == std::mem::discriminant(&v);
            let untagged = matches!(slot, Value::Float(_)) && matches!(v, Value::Table(_));
            if !same && !untagged {
                return Err(bad(
                    path,
                    format!("expected {}, found {}", kind_name(slot), kind_name(&v)),
                ));
            }
            *slot = v;
            Ok(())
        }
    }
}

/// Parses a `section.key=value` override; the value is read as a TOML value,
/// falling back to a bare string.
fn parse_override(text: &str) -> Result<(Vec<String>, Value), HarnessError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| bad(text, "override must look like section.key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(bad(text, "override has an empty key"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |inner, k| {
        let mut t = toml::Table::new();
        t.insert(k.clone(), inner);
        Value::Table(t)
    })
}

impl SuiteConfig {
    /// Defaults, then the TOML document `text`, then each `key=value`
    /// override in order.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut merged = Value::try_from(SuiteConfig::default()).expect("defaults serialize");
        if let Some(text) = text {
            let user: toml::Table = toml::from_str(text).map_err(|e| {
                let key = e
                    .span()
                    .map(|s| text[s].trim().to_string())
                    .unwrap_or_default();
                bad(&key, e.message().to_string())
            })?;
            overlay(&mut merged, Value::Table(user), "")?;
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            overlay(&mut merged, nest(&path, value), "")?;
        }
        let table = match merged {
            Value::Table(t) => t,
            _ => unreachable!("config root is a table"),
        };
        // deserialize section by section so a failure names its section
        let mut cfg = SuiteConfig::default();
        for (section, value) in table {
            let err = |e: toml::de::Error| bad(&section, e.message().to_string());
            match section.as_str() {
                "seed" => cfg.seed = value.try_into().map_err(err)?,
                "plant" => cfg.plant = value.try_into().map_err(err)?,
                "data" => cfg.data = value.try_into().map_err(err)?,
                "arx" => cfg.arx = value.try_into().map_err(err)?,
                "lstm" => cfg.lstm = value.try_into().map_err(err)?,
                "ham" => cfg.ham = value.try_into().map_err(err)?,
                "mpc" => cfg.mpc = value.try_into().map_err(err)?,
                "mpc_p" => cfg.mpc_p = value.try_into().map_err(err)?,
                "rl" => cfg.rl = value.try_into().map_err(err)?,
                "llm" => cfg.llm = value.try_into().map_err(err)?,
                "backend" => cfg.backend = value.try_into().map_err(err)?,
                "models" => cfg.models = value.try_into().map_err(err)?,
                "controllers" => cfg.controllers = value.try_into().map_err(err)?,
                other => return Err(bad(other, "unknown key")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic checks; the error names the first offending key.
    pub fn validate(&self) -> Result<(), HarnessError> {
        // component validators lead their messages with the dotted key
        let keyed = |section: &str, msg: String| {
            let first = msg.split_whitespace().next().unwrap_or(section);
            let key = if first.starts_with(&format!("{section}.")) {
                first.to_string()
            } else {
                section.to_string()
            };
            bad(&key, msg)
        };
        self.plant
            .validate()
            .map_err(|e| keyed("plant", e.to_string()))?;
        self.mpc
            .validate()
            .map_err(|e| keyed("mpc", strip_prefix(&e.to_string())))?;
        self.mpc_p.validate().map_err(|e| {
            keyed(
                "mpc_p",
                strip_prefix(&e.to_string()).replacen("mpc.", "mpc_p.", 1),
            )
        })?;
        self.rl
            .validate()
            .map_err(|e| keyed("rl", strip_prefix(&e.to_string())))?;
        self.lstm
            .train
            .validate()
            .map_err(|e| keyed("lstm.train", e.to_string()))?;
        self.ham
            .train
            .validate()
            .map_err(|e| keyed("ham.train", e.to_string()))?;
        if self.data.lookback == 0 {
            return Err(bad("data.lookback", "must be >= 1"));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(bad("data.train_fraction", "must lie in (0, 1)"));
        }
        if self.arx.p == 0 || self.arx.q == 0 {
            return Err(bad("arx.p", "ARX lags must be >= 1"));
        }
        if self.arx.p.max(self.arx.q) > self.data.lookback {
            return Err(bad("arx.p", "ARX lags cannot exceed data.lookback"));
        }
        if !(self.arx.ridge >= 0.0) {
            return Err(bad("arx.ridge", "must be >= 0"));
        }
        for m in &self.models.models {
            if !crate::suite::MODELS.contains(&m.as_str()) {
                return Err(bad("models.models", format!("unknown model {m:?}")));
            }
        }
        for c in &self.controllers.controllers {
            if !crate::suite::CONTROLLERS.contains(&c.as_str()) {
                return Err(bad(
                    "controllers.controllers",
                    format!("unknown controller {c:?}"),
                ));
            }
        }
        for r in &self.controllers.references {
            twinlab::control::ReferenceProfile::preset(r)
                .map_err(|e| bad("controllers.references", strip_prefix(&e.to_string())))?;
        }
        if self.controllers.steps == 0 {
            return Err(bad("controllers.steps", "must be >= 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn offset(&self, seed: u64) -> u64 {
        seed.wrapping_add(self.seed)
    }
}

fn strip_prefix(msg: &str) -> String {
    msg.trim_start_matches("invalid controller config: ")
        .to_string()
}
