//! Run configuration: one flat set of keys with defaults, loadable from a
//! `key = value` file or JSON and overridable key by key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gcn::{Activation, Aggregation, GcnConfig, GcnSpec};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::policy::{Branch, GateMode, MixtureMode, ModelSpec, PolicyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateScore {
    /// Best cumulative log-probability among beams ending at the entity.
    Max,
    /// Log of the summed path probabilities.
    LogSumExp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: String,
    pub seed: u64,

    pub entity_dim: usize,
    pub relation_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub mlp_hidden: usize,

    /// Reasoning steps `L`.
    pub max_steps: usize,
    /// Background window `m` in ticks.
    pub window: u32,
    pub gcn_layers: usize,
    pub mix_weight: f64,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub action_cap: usize,

    pub beam: usize,
    pub valid_beam: usize,
    pub candidate_score: CandidateScore,

    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: f64,
    pub entropy_beta: f64,
    pub valid_every: usize,

    pub prior_alpha: f64,
    /// Largest time-gap bucket; `0` means four times the window.
    pub max_gap: u32,

    pub no_sc: bool,
    pub no_pp: bool,
    pub no_cp: bool,
    pub no_fp: bool,
    pub uniform_gate: bool,
    pub gate_weights: Option<[f64; 3]>,
    pub mixture: MixtureMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: String::new(),
            seed: 0,
            entity_dim: 80,
            relation_dim: 100,
            time_dim: 20,
            hidden: 100,
            lstm_layers: 2,
            mlp_hidden: 100,
            max_steps: 3,
            window: 5,
            gcn_layers: 2,
            mix_weight: 0.7,
            aggregation: Aggregation::Mean,
            activation: Activation::Tanh,
            action_cap: 64,
            beam: 64,
            valid_beam: 16,
            candidate_score: CandidateScore::Max,
            epochs: 30,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            lr: 3e-3,
            clip_norm: 5.0,
            entropy_beta: 0.01,
            valid_every: 1,
            prior_alpha: 1.0,
            max_gap: 0,
            no_sc: false,
            no_pp: false,
            no_cp: false,
            no_fp: false,
            uniform_gate: false,
            gate_weights: None,
            mixture: MixtureMode::Probability,
        }
    }
}

/// Help text for every key, in declaration order.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "dataset directory"),
    ("seed", "master random seed"),
    ("entity_dim", "entity embedding width (80)"),
    ("relation_dim", "predicate and role embedding width (100)"),
    ("time_dim", "time-interval encoding width (20)"),
    ("hidden", "LSTM hidden width"),
    ("lstm_layers", "stacked LSTM layers per policy"),
    ("mlp_hidden", "hidden width of each action scorer"),
    ("max_steps", "reasoning steps per walk (3)"),
    ("window", "snapshots in the background graph (5 for event data, 1 for wiki-like data)"),
    ("gcn_layers", "message-passing layers"),
    ("mix_weight", "weight of the plain predicate embedding, strictly inside (0, 1)"),
    ("aggregation", "neighbour aggregation: mean or sum"),
    ("activation", "GCN activation: tanh or identity"),
    ("action_cap", "most recent facts offered per step"),
    ("beam", "beam width at evaluation"),
    ("valid_beam", "beam width for validation during training"),
    ("candidate_score", "entity score from beams: max or logsumexp"),
    ("epochs", "training epochs"),
    ("batch_size", "queries per update"),
    ("optimizer", "adam or sgd"),
    ("lr", "learning rate"),
    ("clip_norm", "global gradient-norm clip (0 disables)"),
    ("entropy_beta", "entropy bonus weight"),
    ("valid_every", "epochs between validations"),
    ("prior_alpha", "Dirichlet smoothing of the time prior"),
    ("max_gap", "largest time-gap bucket (0: four times window)"),
    ("no_sc", "ablation: skip the graph convolution"),
    ("no_pp", "ablation: drop the predicate-only policy"),
    ("no_cp", "ablation: drop the core-element policy"),
    ("no_fp", "ablation: drop the whole-fact policy"),
    ("uniform_gate", "ablation: equal weight for every active policy"),
    ("gate_weights", "fixed gate weights [P, C, F], e.g. [1,0,0]"),
    ("mixture", "combine policies as probability or logit"),
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.uniform_gate && self.gate_weights.is_some() {
            return Err(Error::Config("uniform_gate and gate_weights are mutually exclusive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.beam == 0 || self.valid_beam == 0 {
            return Err(Error::Config("beam widths must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.action_cap == 0 {
            return Err(Error::Config("action_cap must be at least 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.prior_alpha < 0.0 {
            return Err(Error::Config("prior_alpha must be non-negative".into()));
        }
        self.gcn_config().validate()?;
        self.policy_config().validate()
    }

    pub fn gcn_config(&self) -> GcnConfig {
        GcnConfig {
            entity_dim: self.entity_dim,
            relation_dim: self.relation_dim,
            layers: self.gcn_layers,
            mix_weight: self.mix_weight,
            window: self.window,
            activation: self.activation,
            aggregation: self.aggregation,
            bypass: self.no_sc,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let branches = [(Branch::P, self.no_pp), (Branch::C, self.no_cp), (Branch::F, self.no_fp)]
            .into_iter()
            .filter(|(_, off)| !off)
            .map(|(b, _)| b)
            .collect();
        let gate = match (self.uniform_gate, self.gate_weights) {
            (true, _) => GateMode::Uniform,
            (false, Some(w)) => GateMode::Fixed(w),
            (false, None) => GateMode::Learned,
        };
        PolicyConfig {
            time_dim: self.time_dim,
            hidden: self.hidden,
            lstm_layers: self.lstm_layers,
            mlp_hidden: self.mlp_hidden,
            branches,
            gate,
            mixture: self.mixture,
        }
    }

    pub fn model_spec(&self, ds: &Dataset) -> ModelSpec {
        ModelSpec {
            gcn: GcnSpec::for_dataset(ds, self.gcn_config()),
            policy: self.policy_config(),
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            ..OptimizerConfig::default()
        }
    }

    pub fn effective_max_gap(&self) -> u32 {
        if self.max_gap == 0 {
            4 * self.window
        } else {
            self.max_gap
        }
    }

    pub fn from_map(map: Map<String, Value>) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file and applies `overrides` (`key=value`) on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| Error::MissingFile(p.to_path_buf()))?;
                parse_config_text(&text)?
            }
            None => Map::new(),
        };
        for o in overrides {
            let (k, v) = split_assignment(o).ok_or_else(|| Error::Config(format!("expected key=value, got {o:?}")))?;
            map.insert(k, v);
        }
        RunConfig::from_map(map)
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn split_assignment(line: &str) -> Option<(String, Value)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), parse_value(v.trim())))
}

/// A JSON object, or `key = value` lines with `#` comments. Values are read
/// as JSON when possible and as bare strings otherwise.
pub fn parse_config_text(text: &str) -> Result<Map<String, Value>> {
    if text.trim_start().starts_with('{') {
        return match serde_json::from_str(text)? {
            Value::Object(m) => Ok(m),
            _ => Err(Error::Config("config JSON must be an object".into())),
        };
    }
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_assignment(line)
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        map.insert(k, v);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_file() {
        let map = parse_config_text("# comment\nepochs = 3\ndataset = data/x  # trailing\nno_fp=true\ngate_weights = [1, 0, 0]\n").unwrap();
        let cfg = RunConfig::from_map(map).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.dataset, "data/x");
        assert!(cfg.no_fp);
        assert_eq!(cfg.gate_weights, Some([1.0, 0.0, 0.0]));
        assert_eq!(cfg.policy_config().branches, vec![Branch::P, Branch::C]);
    }

    #[test]
    fn json_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"epochs": 4, "lr": 0.01}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &["epochs=7".into()]).unwrap();
        assert_eq!((cfg.epochs, cfg.lr), (7, 0.01));
    }

    #[test]
    fn rejects_typos_and_contradictions() {
        assert!(RunConfig::load(None, &["epoch=3".into()]).is_err());
        let all_off = ["no_pp=true", "no_cp=true", "no_fp=true"].map(String::from);
        assert!(RunConfig::load(None, &all_off).is_err());
        assert!(RunConfig::load(None, &["mix_weight=1".into()]).is_err());
        assert!(RunConfig::load(None, &["uniform_gate=true".into(), "gate_weights=[1,0,0]".into()]).is_err());
    }

    #[test]
    fn every_key_documented() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut documented: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        documented.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, documented);
    }

    #[test]
    fn max_gap_default() {
        assert_eq!(RunConfig::default().effective_max_gap(), 20);
    }
}
