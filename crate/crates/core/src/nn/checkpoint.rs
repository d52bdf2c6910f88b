use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{GaussianPolicy, Mlp, MlpSpec};
use crate::env::Normalization;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Deterministic policy emitting raw actions.
    Deterministic,
    GaussianPolicy,
    Value,
}

/// JSON header plus the flat parameters as base64 little-endian `f64`s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub spec: MlpSpec,
    pub sigma_floor: Option<f64>,
    pub normalization: Normalization,
    pub params: String,
    /// Free-form provenance such as the training configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn encode(params: &[f64]) -> String {
    let bytes: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("parameter block: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "parameter block of {} bytes is not a whole number of f64s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    pub fn from_mlp(net: &Mlp, kind: CheckpointKind, normalization: Normalization) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind,
            spec: net.spec().clone(),
            sigma_floor: None,
            normalization,
            params: encode(net.params()),
            meta: serde_json::Value::Null,
        }
    }

    pub fn from_policy(policy: &GaussianPolicy, normalization: Normalization) -> Self {
        Checkpoint {
            sigma_floor: Some(policy.sigma_floor),
            ..Self::from_mlp(&policy.net, CheckpointKind::GaussianPolicy, normalization)
        }
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        Mlp::from_params(self.spec.clone(), decode(&self.params)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_policy(&self) -> Result<GaussianPolicy> {
        if self.kind != CheckpointKind::GaussianPolicy {
            return Err(Error::Checkpoint(format!("expected a Gaussian policy, found {:?}", self.kind)));
        }
        let floor = self
            .sigma_floor
            .ok_or_else(|| Error::Checkpoint("Gaussian policy without sigma floor".into()))?;
        GaussianPolicy::new(self.to_mlp()?, floor)
    }

    pub fn kind(&self) -> CheckpointKind {
        self.kind
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn policy_round_trip() {
        let net = Mlp::init(MlpSpec::new(vec![3, 4, 4]), 2).unwrap();
        let policy = GaussianPolicy::new(net, 1e-3).unwrap();
        let ck = Checkpoint::from_policy(&policy, Normalization::default());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.to_policy().unwrap(), policy);
        assert!(back.to_mlp().is_ok());
    }

    #[test]
    fn kind_is_checked() {
        let net = Mlp::init(MlpSpec::new(vec![3, 2]), 2).unwrap();
        let ck = Checkpoint::from_mlp(&net, CheckpointKind::Deterministic, Normalization::default());
        assert!(matches!(ck.to_policy(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_block_is_rejected() {
        let net = Mlp::init(MlpSpec::new(vec![3, 2]), 2).unwrap();
        let mut ck = Checkpoint::from_mlp(&net, CheckpointKind::Deterministic, Normalization::default());
        ck.params = encode(&net.params()[1..]);
        assert!(ck.to_mlp().is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let p = Path::new("/nonexistent/ck.json");
        assert!(matches!(Checkpoint::load(p), Err(Error::MissingArtifact(q)) if q == p));
    }

    proptest! {
        #[test]
        fn parameters_round_trip_bitwise(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let back = decode(&encode(&values)).unwrap();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
