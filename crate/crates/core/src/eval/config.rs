use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::gnn::model::LossKind;
use crate::graph_pipeline::SplitConfig;
use crate::ldp_feature::FeatureSpec;
use crate::privacy_accountant::extended_float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Feature LDP plus noisy aggregation.
    Dipsgnn,
    /// Feature LDP plus noise added once to the adjacency matrices.
    Edgerand,
    /// Raw features, exact aggregation.
    Nonprivate,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dipsgnn, Method::Edgerand, Method::Nonprivate];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dipsgnn => "dipsgnn",
            Method::Edgerand => "edgerand",
            Method::Nonprivate => "nonprivate",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected dipsgnn, edgerand or nonprivate)")))
    }
}

/// Input files. Ignored when a synthetic dataset is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `user_id, item_id, timestamp` rows with a header.
    pub interactions: Option<PathBuf>,
    /// `user_id, feature...` rows with a header.
    pub features: Option<PathBuf>,
    pub delimiter: char,
    /// Minimum interactions per user and per item; 0 disables filtering.
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { interactions: None, features: None, delimiter: ',', min_count: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub item_dim: usize,
    pub user_dim: usize,
    /// Aggregation steps `T`.
    pub steps: usize,
    /// Row-norm bound `C`.
    pub embed_norm: f64,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { item_dim: 100, user_dim: 50, steps: 1, embed_norm: 1.0, loss: LossKind::Bce }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(with = "extended_float")]
    pub epsilon1: f64,
    #[serde(with = "extended_float")]
    pub epsilon2: f64,
    /// Defaults to `0.9 / number of edges`.
    pub delta: Option<f64>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig { epsilon1: 20.0, epsilon2: 5.0, delta: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { epochs: 10, learning_rate: 0.001, batch_size: 100 }
    }
}

/// Values swept on top of the base config. An empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(with = "extended_float::vec")]
    pub epsilon1: Vec<f64>,
    #[serde(with = "extended_float::vec")]
    pub epsilon2: Vec<f64>,
    pub steps: Vec<usize>,
    pub embed_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Drop items already in the input subsequence from the ranking.
    pub exclude_seen: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![5, 10, 20], exclude_seen: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub synthetic: Option<SyntheticConfig>,
    /// Feature layout; empty means no user features.
    pub schema: Vec<FeatureSpec>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub privacy: PrivacyConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            synthetic: None,
            schema: Vec::new(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            privacy: PrivacyConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            methods: vec![Method::Dipsgnn],
            seeds: vec![0],
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = ExperimentConfig::from_toml(&text).map_err(|e| Error::parse(path, e))?;
        // Relative data paths are taken relative to the config file.
        if let Some(dir) = path.parent() {
            for p in [&mut config.data.interactions, &mut config.data.features].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("seeds must be distinct: {:?}", self.seeds)));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("K values must be positive".into()));
        }
        if self.model.item_dim == 0 || self.model.user_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        for &e in self.epsilon1_values().iter() {
            if !(e > 0.0) {
                return Err(Error::Config(format!("epsilon1 must be positive, got {e}")));
            }
        }
        for &e in self.epsilon2_values().iter() {
            if !(e > 0.0) {
                return Err(Error::Config(format!("epsilon2 must be positive, got {e}")));
            }
        }
        if self.steps_values().contains(&0) {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.embed_norm_values().iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("embedding norm must be positive".into()));
        }
        if let Some(d) = self.privacy.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("delta must be in (0, 1), got {d}")));
            }
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.data.delimiter.is_ascii() {
            return Err(Error::Config("delimiter must be an ASCII character".into()));
        }
        Ok(())
    }

    pub fn delimiter(&self) -> u8 {
        self.data.delimiter as u8
    }

    pub fn epsilon1_values(&self) -> Vec<f64> {
        or_base(&self.sweep.epsilon1, self.privacy.epsilon1)
    }

    pub fn epsilon2_values(&self) -> Vec<f64> {
        or_base(&self.sweep.epsilon2, self.privacy.epsilon2)
    }

    pub fn steps_values(&self) -> Vec<usize> {
        or_base(&self.sweep.steps, self.model.steps)
    }

    pub fn embed_norm_values(&self) -> Vec<f64> {
        or_base(&self.sweep.embed_norm, self.model.embed_norm)
    }
}

fn or_base<T: Copy>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() { vec![base] } else { list.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
methods = ["dipsgnn", "edgerand"]
seeds = [1, 2, 3]

[data]
interactions = "ratings.csv"
features = "users.csv"

[[schema]]
name = "age"
kind = "numerical"

[[schema]]
name = "gender"
kind = "categorical"
categories = ["F", "M"]

[model]
item_dim = 32
steps = 2

[privacy]
epsilon2 = inf

[sweep]
epsilon2 = [3.0, 5.0, inf]
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.methods, vec![Method::Dipsgnn, Method::Edgerand]);
        assert_eq!(cfg.model.item_dim, 32);
        assert_eq!(cfg.model.user_dim, 50);
        assert_eq!(cfg.privacy.epsilon1, 20.0);
        assert_eq!(cfg.privacy.epsilon2, f64::INFINITY);
        assert_eq!(cfg.epsilon2_values(), vec![3.0, 5.0, f64::INFINITY]);
        assert_eq!(cfg.steps_values(), vec![2]);
        assert_eq!(cfg.training.epochs, 10);
        assert_eq!(cfg.eval.ks, vec![5, 10, 20]);
        assert_eq!(cfg.schema.len(), 2);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash().unwrap(), cfg.hash().unwrap());
        let other = ExperimentConfig { seeds: vec![9], ..cfg.clone() };
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn rejects_invalid() {
        let bad = [
            "seeds = [1, 1]\n[data]\ninteractions = \"x\"",
            "methods = []\n[data]\ninteractions = \"x\"",
            "[eval]\nks = [0]\n[data]\ninteractions = \"x\"",
            "[privacy]\nepsilon2 = -1.0\n[data]\ninteractions = \"x\"",
            "[data]\ninteractions = \"x\"\nbogus = 1",
            "methods = [\"dpsgd\"]\n[data]\ninteractions = \"x\"",
        ];
        for text in bad {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("DPSGD".parse::<Method>().is_err());
    }
}
