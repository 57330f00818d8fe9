//! SD2C checkpoints: `"SD2C"`, a `u32` format version, a `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, Role, TransformerModel};
use crate::steering::{SteeringDims, SteeringState, VariantKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SD2C";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;
/// Headers beyond this size are rejected before allocation.
const MAX_HEADER_LEN: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringHeader {
    pub variant: VariantKind,
    pub dims: SteeringDims,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub role: Role,
    pub model_config: ModelConfig,
    pub steering: Option<SteeringHeader>,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub steering: Option<SteeringState>,
    /// Free-form facts recorded at save time (seed, validation τ, ...).
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: TransformerModel, steering: Option<SteeringState>) -> Self {
        Self { model, steering, metadata: Default::default() }
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.model.params();
        if let Some(s) = &self.steering {
            out.extend(s.params());
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut offset = 0u64;
        let manifest = tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            role: self.model.role,
            model_config: self.model.config.clone(),
            steering: self.steering.as_ref().map(|s| SteeringHeader { variant: s.kind(), dims: s.dims, enabled: s.enabled }),
            tensors: manifest,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a checkpoint. Every failure is a
    /// [`Error::Checkpoint`]; no input panics.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(ck_err("file shorter than the fixed prefix"));
        }
        if &bytes[..4] != MAGIC {
            return Err(ck_err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ck_err(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[PREFIX_LEN..];
        if header_len > MAX_HEADER_LEN || header_len > rest.len() as u64 {
            return Err(ck_err(format!("header length {header_len} exceeds the file")));
        }
        let (json, payload) = rest.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(json).map_err(|e| ck_err(format!("header: {e}")))?;
        header.model_config.validate().map_err(|e| ck_err(e.to_string()))?;
        // every layer owns several tensors; bounds param_shapes on hostile headers
        if header.model_config.n_layers > header.tensors.len() {
            return Err(ck_err("manifest is shorter than the layer count"));
        }

        let mut expected = param_shapes(&header.model_config);
        if let Some(s) = &header.steering {
            if s.dims.d_drafter != header.model_config.d_model
                || s.dims.d_mlp != header.model_config.d_mlp
                || s.dims.n_layers != header.model_config.n_layers
            {
                return Err(ck_err("steering dims do not match the drafter architecture"));
            }
            if s.dims.d_verifier == 0 || s.dims.d_steer == 0 {
                return Err(ck_err("steering dims must be positive"));
            }
            expected.extend(s.dims.param_shapes(s.variant));
        }
        if header.tensors.len() != expected.len() {
            return Err(ck_err(format!("manifest lists {} tensors, expected {}", header.tensors.len(), expected.len())));
        }
        let mut offset = 0u64;
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape {
                return Err(ck_err(format!("manifest entry {} {:?}, expected {name} {shape:?}", entry.name, entry.shape)));
            }
            if entry.dtype != "f32" {
                return Err(ck_err(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            if entry.offset != offset {
                return Err(ck_err(format!("{}: offset {} but expected {offset}", entry.name, entry.offset)));
            }
            let numel = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            offset = numel
                .and_then(|n| n.checked_mul(4))
                .and_then(|b| b.checked_add(offset))
                .ok_or_else(|| ck_err("tensor size overflows"))?;
        }
        if payload.len() as u64 != offset {
            return Err(ck_err(format!("payload has {} bytes, manifest needs {offset}", payload.len())));
        }

        let mut tensors = Vec::with_capacity(expected.len());
        for (entry, (_, shape)) in header.tensors.iter().zip(&expected) {
            let start = entry.offset as usize;
            let numel: usize = shape.iter().product();
            let data = payload[start..start + 4 * numel]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        let n_model = param_shapes(&header.model_config).len();
        let steering_tensors = tensors.split_off(n_model);
        let model = TransformerModel::from_params(header.model_config, header.role, tensors)?;
        let steering = match header.steering {
            None => None,
            Some(s) => {
                let mut st = SteeringState::from_params(s.variant, s.dims, steering_tensors)?;
                st.enabled = s.enabled;
                Some(st)
            }
        };
        Ok(Self { model, steering, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; a missing file is [`Error::MissingArtifact`].
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => Self::decode(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(path.to_path_buf())),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample(kind: Option<VariantKind>) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vc = ModelConfig::new(2, 16, 2, 24, 11, 32).with_taps(0, 1, 1);
        let dc = ModelConfig::new(2, 8, 2, 12, 11, 32).with_taps(0, 1, 1);
        let model = TransformerModel::init(dc.clone(), Role::Drafter, &mut rng).unwrap();
        let steering = kind.map(|k| {
            let mut s = SteeringState::init(k, SteeringDims::new(&vc, &dc), &mut rng);
            for (_, t) in s.params_mut() {
                for x in t.data_mut() {
                    *x += 0.25;
                }
            }
            s
        });
        let mut ck = Checkpoint::new(model, steering);
        ck.metadata.insert("seed".into(), 3.into());
        ck
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for kind in [None, Some(VariantKind::BiasInMlp), Some(VariantKind::BiasAfterMlp), Some(VariantKind::CondBiasInMlp)] {
            let ck = sample(kind);
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back.encode(), bytes);
            for ((_, a), (_, b)) in ck.tensors().iter().zip(back.tensors()) {
                assert!(a.bit_eq(b));
            }
            assert_eq!(back.steering.as_ref().map(|s| s.kind()), kind);
            assert_eq!(back.metadata, ck.metadata);
        }
    }

    #[test]
    fn payload_length_matches_manifest() {
        let ck = sample(Some(VariantKind::BiasInMlp));
        let bytes = ck.encode();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let numel: usize = ck.tensors().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(bytes.len() - PREFIX_LEN - header_len, 4 * numel);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample(None).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes;
        bad.push(0);
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn huge_layer_count_is_rejected() {
        let bytes = sample(None).encode();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + header_len]).unwrap();
        header["model_config"]["n_layers"] = serde_json::json!(1u64 << 40);
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = bytes[..8].to_vec();
        forged.extend((json.len() as u64).to_le_bytes());
        forged.extend(json);
        forged.extend(&bytes[PREFIX_LEN + header_len..]);
        assert!(matches!(Checkpoint::decode(&forged), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::load(&dir.path().join("nope.sd2c")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
