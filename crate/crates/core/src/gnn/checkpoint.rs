use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ForwardConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::privacy_accountant::PrivacySpec;

pub const CHECKPOINT_FORMAT: &str = "dipsgnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model plus everything needed to rerun inference with the same noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub method: String,
    pub privacy: PrivacySpec,
    pub forward: ForwardConfig,
    /// Aggregation noise used at train and inference time.
    pub sigma: f64,
    /// Item ids in index order, when known.
    #[serde(default)]
    pub items: Vec<String>,
    /// Training epochs; 0 when unknown.
    #[serde(default)]
    pub epochs: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(method: &str, privacy: PrivacySpec, forward: ForwardConfig, sigma: f64, params: ModelParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            method: method.into(),
            privacy,
            forward,
            sigma,
            items: Vec::new(),
            epochs: 0,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::parse(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(path, format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.params.validate().map_err(|e| Error::parse(path, e.to_string()))?;
        if !ck.items.is_empty() && ck.items.len() != ck.params.dims.num_items {
            return Err(Error::parse(path, "item list does not match item table"));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::model::LossKind;
    use crate::gnn::params::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let dims = ModelDims { feature_width: 3, num_items: 5, item_dim: 4, user_dim: 2 };
        let params = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let privacy = PrivacySpec::calibrated(20.0, 5.0, 1e-4, 2, 0.5).unwrap();
        let fwd = ForwardConfig { steps: 2, embed_norm: 0.5, loss: LossKind::Bce };
        let ck = Checkpoint::new("dipsgnn", privacy, fwd, privacy.sigma, params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);

        let mut bad = ck.clone();
        bad.params.w3 = ndarray::Array2::zeros((1, 1));
        bad.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
