use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AdamState, Dense, MlpParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk form of one layer: shape plus row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct LayerRecord {
    inputs: usize,
    outputs: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ParamsRecord {
    layers: Vec<LayerRecord>,
}

impl From<MlpParams> for ParamsRecord {
    fn from(params: MlpParams) -> Self {
        let layers = params
            .layers
            .into_iter()
            .map(|l| LayerRecord {
                inputs: l.inputs(),
                outputs: l.outputs(),
                weight: l.weight.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        Self { layers }
    }
}

impl TryFrom<ParamsRecord> for MlpParams {
    type Error = Error;

    fn try_from(record: ParamsRecord) -> Result<Self> {
        let layers = record
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let weight = Array2::from_shape_vec((l.outputs, l.inputs), l.weight).map_err(|_| {
                    Error::Config(format!("layer {i}: weight length does not match its shape"))
                })?;
                Dense::new(weight, Array1::from(l.bias))
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::from_layers(layers)
    }
}

/// Network weights plus optimiser state, serialised as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: MlpParams,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(params: MlpParams, adam: Option<AdamState>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params,
            adam,
        }
    }

    /// Completed optimiser steps, 0 for a checkpoint without optimiser state.
    pub fn step_count(&self) -> u64 {
        self.adam.as_ref().map_or(0, |a| a.step_count)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad checkpoint: {e}")))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        if let Some(adam) = &ckpt.adam {
            if !ckpt.params.same_shape(&adam.m) || !ckpt.params.same_shape(&adam.v) {
                return Err(Error::Config(
                    "checkpoint optimiser moments do not match the network shape".into(),
                ));
            }
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; a missing or unreadable file is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = MlpParams::init(&[3, 4, 2], &mut rng).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let mut grads = params.zeros_like();
        for (i, g) in grads.values_mut().enumerate() {
            *g = (i as f64 * 0.77).sin() / 3.0;
        }
        adam_step(&mut adam, &mut params, &grads).unwrap();
        let ckpt = Checkpoint::new(params, Some(adam));
        let text = ckpt.to_json().unwrap();
        assert!(text.contains("\"format_version\":1"));
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.step_count(), 1);
    }

    #[test]
    fn rejects_wrong_version_and_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MlpParams::init(&[2, 2], &mut rng).unwrap();
        let text = Checkpoint::new(params, None)
            .to_json()
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":99");
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Config(_))));

        let broken = r#"{"format_version":1,"params":{"layers":[{"inputs":2,"outputs":2,"weight":[1.0],"bias":[0.0,0.0]}]},"adam":null}"#;
        assert!(matches!(Checkpoint::from_json(broken), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
