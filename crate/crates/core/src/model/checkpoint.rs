//! JSON checkpoints. Tensors are base64-encoded little-endian f32 and keyed
//! by name in a `BTreeMap`, so the serialized document is byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{expected_body_shapes, expected_head_shapes, EncoderBundle, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SourceTrained,
    Adapted,
}

impl Phase {
    /// File-name form used in "{phase}-seed{NNNN}.ckpt.json".
    pub fn slug(self) -> &'static str {
        match self {
            Phase::SourceTrained => "source",
            Phase::Adapted => "adapted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub phase: Phase,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub provenance: Provenance,
    pub tensors: BTreeMap<String, TensorRecord>,
}

fn encode_tensor(t: &Tensor<f32>) -> TensorRecord {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorRecord {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        data: STANDARD.encode(bytes),
    }
}

fn decode_tensor(name: &str, r: &TensorRecord) -> Result<Tensor<f32>> {
    if r.dtype != "f32" {
        return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {:?}", r.dtype)));
    }
    let bytes = STANDARD
        .decode(&r.data)
        .map_err(|e| Error::Checkpoint(format!("tensor {name}: bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("tensor {name}: byte length not a multiple of 4")));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(r.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
}

impl Checkpoint {
    pub fn from_bundle(bundle: &EncoderBundle<f32>, provenance: Provenance) -> Self {
        let tensors = bundle
            .body()
            .iter()
            .chain(bundle.heads().iter())
            .map(|(n, t)| (n.to_string(), encode_tensor(t)))
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: bundle.config().clone(),
            provenance,
            tensors,
        }
    }

    /// Rebuilds the bundle. Checkpoints only hold finished models, so the
    /// result is frozen.
    pub fn to_bundle(&self) -> Result<EncoderBundle<f32>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.config.validate()?;
        let body = expected_body_shapes(&self.config);
        let heads = expected_head_shapes(&self.config);
        if self.tensors.len() != body.len() + heads.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                body.len() + heads.len(),
                self.tensors.len()
            )));
        }
        let collect = |names: &[(String, Vec<usize>)]| -> Result<ParamSet<f32>> {
            let mut set = ParamSet::new();
            for (name, shape) in names {
                let rec = self
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                let t = decode_tensor(name, rec)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                set.push(name.clone(), t);
            }
            Ok(set)
        };
        EncoderBundle::from_parts(self.config.clone(), collect(&body)?, collect(&heads)?, true)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_encoder, BlockKind, Pooling};
    use crate::tensor::SeededRng;

    fn bundle() -> EncoderBundle {
        let c = EncoderConfig {
            num_layers: 2,
            d_model: 4,
            block_kind: BlockKind::Transformer,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 9,
            max_seq_len: 5,
            num_classes: 2,
            pooling: Pooling::Mean,
        };
        init_encoder(&c, &mut SeededRng::new(11)).unwrap()
    }

    fn prov() -> Provenance {
        Provenance {
            phase: Phase::SourceTrained,
            seed: 11,
            config_digest: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let b = bundle();
        let ck = Checkpoint::from_bundle(&b, prov());
        let back: Checkpoint = serde_json::from_str(&ck.to_json()).unwrap();
        let r = back.to_bundle().unwrap();
        assert!(r.is_frozen());
        assert_eq!(r.body(), b.body());
        assert_eq!(r.heads(), b.heads());
        assert_eq!(back.to_json(), ck.to_json());
    }

    #[test]
    fn names_are_sorted_and_stable() {
        let ck = Checkpoint::from_bundle(&bundle(), prov());
        let names: Vec<&String> = ck.tensors.keys().collect();
        assert_eq!(names[0], "block.00.attn.key");
        assert!(names.contains(&&"embed.position".to_string()));
        assert!(names.contains(&&"head.01.weight".to_string()));
    }

    #[test]
    fn damaged_checkpoint_is_rejected() {
        let mut ck = Checkpoint::from_bundle(&bundle(), prov());
        ck.tensors.remove("head.00.bias");
        assert!(ck.to_bundle().unwrap_err().to_string().contains("expected"));
        let mut ck = Checkpoint::from_bundle(&bundle(), prov());
        ck.tensors.get_mut("embed.token").unwrap().shape = vec![3, 4];
        assert!(ck.to_bundle().is_err());
        let mut ck = Checkpoint::from_bundle(&bundle(), prov());
        ck.format_version = 2;
        assert!(ck.to_bundle().is_err());
    }
}
