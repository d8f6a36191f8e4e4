//! `key=value` experiment files with dotted section keys.
//!
//! The profile named by `profile=` (or passed by the caller) supplies every default;
//! the file may only override keys that profile already has. Values are typed by the
//! default they replace, lists are comma separated and `none` clears an optional value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::curriculum::CurriculumSchedule;
use crate::error::{Error, Result};
use crate::fsio;
use crate::losses::LossConfig;
use crate::models::{AttentionNorm, ModelConfig};
use crate::synthdata::{DatasetConfig, DomainShiftSpec};
use crate::trainers::{EvalConfig, Regime, RegimeConfig, TrainConfig};

/// Default hyperparameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small budgets that finish in minutes on a laptop CPU.
    Desk,
    /// Published epoch budgets, batch sizes and learning rates.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::config("profile", format!("`{s}` is not desk or paper"))),
        }
    }
}

/// Whether the target domain contributes training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    /// Source training only; the target domain is evaluated zero-shot.
    #[serde(rename = "UDA")]
    Uda,
    /// Incremental pretraining and a final adaptation phase on the small target split.
    #[serde(rename = "FEW")]
    Few,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Uda, Protocol::Few];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Uda => "UDA",
            Protocol::Few => "FEW",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Synthetic data: generator settings and the size of each domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub sd_frames: usize,
    pub td_frames: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub n_tissue_classes: usize,
    pub n_instrument_classes: usize,
    pub n_interactions: usize,
    pub max_instruments: usize,
    pub max_caption_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            sd_frames: 64,
            td_frames: 32,
            image_height: d.image_height,
            image_width: d.image_width,
            n_tissue_classes: d.n_tissue_classes,
            n_instrument_classes: d.n_instrument_classes,
            n_interactions: d.n_interactions,
            max_instruments: d.max_instruments,
            max_caption_len: d.max_caption_len,
        }
    }
}

impl DataSection {
    pub fn generator(&self) -> DatasetConfig {
        DatasetConfig {
            n_frames: self.sd_frames + self.td_frames,
            image_height: self.image_height,
            image_width: self.image_width,
            n_tissue_classes: self.n_tissue_classes,
            n_instrument_classes: self.n_instrument_classes,
            n_interactions: self.n_interactions,
            max_instruments: self.max_instruments,
            max_caption_len: self.max_caption_len,
        }
    }
}

/// Architecture settings not implied by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub crop_size: usize,
    pub channels: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_memory: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub ffn_dim: usize,
    pub semantic_dim: usize,
    pub graph_hidden: usize,
    pub edge_hidden: usize,
    pub attention_norm: AttentionNorm,
    pub region_pos_enc: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::for_dataset(&DatasetConfig::default());
        Self {
            crop_size: m.crop_size,
            channels: m.channels,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_memory: m.n_memory,
            n_enc: m.n_enc,
            n_dec: m.n_dec,
            ffn_dim: m.ffn_dim,
            semantic_dim: m.semantic_dim,
            graph_hidden: m.graph_hidden,
            edge_hidden: m.edge_hidden,
            attention_norm: m.attention_norm,
            region_pos_enc: m.region_pos_enc,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, data: &DatasetConfig, k_cls: usize) -> ModelConfig {
        ModelConfig {
            k_cls,
            k_int: data.n_interactions,
            vocab_size: data.vocabulary().len(),
            max_caption_len: data.max_caption_len,
            crop_size: self.crop_size,
            channels: self.channels.clone(),
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_memory: self.n_memory,
            n_enc: self.n_enc,
            n_dec: self.n_dec,
            ffn_dim: self.ffn_dim,
            semantic_dim: self.semantic_dim,
            graph_hidden: self.graph_hidden,
            edge_hidden: self.edge_hidden,
            attention_norm: self.attention_norm,
            region_pos_enc: self.region_pos_enc,
        }
    }
}

/// Everything one run needs. `seed` drives data generation, initialisation and
/// batch order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub protocol: Protocol,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DataSection,
    pub shift: DomainShiftSpec,
    pub model: ModelSection,
    pub curriculum: CurriculumSchedule,
    pub loss: LossConfig,
    pub regime: RegimeConfig,
    pub eval: EvalConfig,
}

/// Keys that mirror another key and are not accepted on their own.
const DERIVED_KEYS: [&str; 1] = ["regime.seed"];

impl ExperimentConfig {
    pub fn new(profile: Profile, regime: Regime, protocol: Protocol) -> Self {
        let regime = match profile {
            Profile::Desk => RegimeConfig::desk(regime),
            Profile::Paper => RegimeConfig::paper(regime),
        };
        Self {
            profile,
            protocol,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DataSection::default(),
            shift: DomainShiftSpec::default(),
            model: ModelSection::default(),
            curriculum: CurriculumSchedule::default(),
            loss: LossConfig::default(),
            regime,
            eval: EvalConfig::default(),
        }
    }

    pub fn desk(regime: Regime, protocol: Protocol) -> Self {
        Self::new(Profile::Desk, regime, protocol)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut regime = self.regime.clone();
        regime.seed = self.seed;
        TrainConfig { regime, curriculum: self.curriculum.clone(), loss: self.loss.clone(), eval: self.eval.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let data = self.dataset.generator();
        data.validate()?;
        if self.dataset.sd_frames < 2 {
            return Err(Error::config("dataset.sd_frames", "need at least two source frames"));
        }
        if self.dataset.td_frames < 2 {
            return Err(Error::config("dataset.td_frames", "need at least two target frames"));
        }
        self.shift.validate(&data)?;
        self.model.model_config(&data, data.k_cls()).validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.train_config().validate()
    }

    /// Parses `text`; `profile` overrides the file's `profile=` line.
    pub fn parse(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key=value"))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(k, "given more than once"));
            }
        }
        let profile = match (profile, entries.remove("profile")) {
            (Some(p), _) => p,
            (None, Some(p)) => p.parse()?,
            (None, None) => Profile::Desk,
        };
        let regime = match entries.get("regime.regime") {
            Some(r) => Regime::parse(r).ok_or_else(|| Error::config("regime.regime", format!("unknown regime `{r}`")))?,
            None => Regime::MtlFt,
        };
        let base = Self::new(profile, regime, Protocol::Uda);
        let mut leaves = BTreeMap::new();
        flatten("", &serde_json::to_value(&base)?, &mut leaves);

        for (k, raw) in &entries {
            let default = match leaves.get(k.as_str()) {
                Some(d) if !DERIVED_KEYS.contains(&k.as_str()) => d,
                _ => return Err(Error::config(k.clone(), "unknown key")),
            };
            let v = match k.as_str() {
                "regime.regime" => Value::String(regime.as_str().to_string()),
                "protocol" => Value::String(
                    Protocol::parse(raw).ok_or_else(|| Error::config("protocol", format!("`{raw}` is not UDA or FEW")))?.as_str().to_string(),
                ),
                _ => typed(raw, default).map_err(|m| Error::config(k.clone(), m))?,
            };
            leaves.insert(k.clone(), v);
            // Deserialising after every key pins enum and type errors to their key.
            from_leaves(&leaves).map_err(|e| Error::config(k.clone(), e.to_string()))?;
        }
        let mut cfg = from_leaves(&leaves).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.regime.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        Self::parse(&fsio::read_string(path)?, profile)
    }

    /// Every key, grouped by section.
    pub fn to_text(&self) -> String {
        let mut leaves = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut leaves);
        let mut out = String::new();
        let top = leaves.iter().filter(|(k, _)| !k.contains('.'));
        let nested = leaves.iter().filter(|(k, _)| k.contains('.') && !DERIVED_KEYS.contains(&k.as_str()));
        let mut section = None;
        for (k, v) in top.chain(nested) {
            let s = k.split_once('.').map(|p| p.0);
            if s != section && !out.is_empty() {
                out.push('\n');
            }
            section = s;
            out.push_str(&format!("{k}={}\n", render(v)));
        }
        out
    }

    /// SHA-256 of [`ExperimentConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn from_leaves(leaves: &BTreeMap<String, Value>) -> serde_json::Result<ExperimentConfig> {
    let mut root = Map::new();
    for (k, v) in leaves {
        let mut node = &mut root;
        let parts: Vec<&str> = k.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    serde_json::from_value(Value::Object(root))
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".to_string(),
        Value::String(s) => s.clone(),
        Value::Array(xs) => xs.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn number(raw: &str, like: Option<&Number>) -> std::result::Result<Value, String> {
    let bad = || format!("`{raw}` is not a valid number");
    let integral = like.is_none_or(|n| n.is_u64() || n.is_i64());
    if integral {
        if let Ok(u) = raw.parse::<u64>() {
            return Ok(Value::Number(u.into()));
        }
        if like.is_some() {
            return Err(format!("`{raw}` is not a non-negative integer"));
        }
    }
    let f: f64 = raw.parse().map_err(|_| bad())?;
    Number::from_f64(f).map(Value::Number).ok_or_else(bad)
}

fn typed(raw: &str, default: &Value) -> std::result::Result<Value, String> {
    match default {
        Value::Bool(_) => raw.parse().map(Value::Bool).map_err(|_| format!("`{raw}` is not true or false")),
        Value::Number(n) => number(raw, Some(n)),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(xs) => {
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let like = xs.first().and_then(Value::as_number);
            raw.split(',').map(|t| number(t.trim(), like)).collect::<std::result::Result<_, _>>().map(Value::Array)
        }
        Value::Null => {
            if raw == "none" {
                Ok(Value::Null)
            } else {
                number(raw, None)
            }
        }
        Value::Object(_) => Err("expected a section, not a value".to_string()),
    }
}
