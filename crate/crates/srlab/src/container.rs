//! The SRLB container: magic "SRLB", format version (u32 LE), header length
//! (u64 LE), a UTF-8 JSON header describing the model config and an ordered
//! tensor table (name, dtype, shape), then raw little-endian tensor data in
//! table order, each tensor starting on a 64-byte boundary.
//!
//! Checkpoints store every model tensor as f32; mask files reuse the same
//! container with u8 tensors named `blocks.<i>.<matrix>.mask` and carry the
//! pruner fields (s, granularity, scope, method) in the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use srlab_core::model::{MatrixKind, Model, ModelConfig};
use srlab_core::pruning::{BlockMask, Granularity, PruneMethod, PrunerSpec, Scope, SparsityMask};
use srlab_core::tensor::Tensor;

use crate::error::{io_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"SRLB";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfigJson {
    pub n_blocks: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub eos_token_id: u32,
    pub bos_token_id: u32,
}

impl From<ModelConfig> for ConfigJson {
    fn from(c: ModelConfig) -> Self {
        Self {
            n_blocks: c.n_blocks,
            hidden: c.hidden,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            vocab: c.vocab,
            max_seq: c.max_seq,
            eos_token_id: c.eos_token_id,
            bos_token_id: c.bos_token_id,
        }
    }
}

impl From<ConfigJson> for ModelConfig {
    fn from(c: ConfigJson) -> Self {
        ModelConfig {
            n_blocks: c.n_blocks,
            hidden: c.hidden,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            vocab: c.vocab,
            max_seq: c.max_seq,
            eos_token_id: c.eos_token_id,
            bos_token_id: c.bos_token_id,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: ConfigJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub granularity: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(offset: usize) -> usize {
    offset.div_ceil(ALIGN) * ALIGN
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "u8" => Some(1),
        _ => None,
    }
}

fn write_container(path: &Path, header: &Header, payloads: &[Vec<u8>]) -> Result<()> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::HeaderMismatch { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for payload in payloads {
        let aligned = align_up(bytes.len());
        bytes.resize(aligned, 0);
        bytes.extend_from_slice(payload);
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

struct RawContainer {
    header: Header,
    tensors: Vec<Vec<u8>>,
}

fn read_container(path: &Path) -> Result<RawContainer> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: "no magic".into() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: "no header length".into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header wants {header_len} bytes"),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| {
        Error::HeaderMismatch { path: path.to_path_buf(), detail: format!("undecodable header: {e}") }
    })?;

    let mut offset = 16 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let elem = dtype_size(&entry.dtype).ok_or_else(|| Error::HeaderMismatch {
            path: path.to_path_buf(),
            detail: format!("tensor `{}` has unknown dtype `{}`", entry.name, entry.dtype),
        })?;
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel * elem;
        offset = align_up(offset);
        if bytes.len() < offset + nbytes {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("tensor `{}` declared but body ends early", entry.name),
            });
        }
        tensors.push(bytes[offset..offset + nbytes].to_vec());
        offset += nbytes;
    }
    Ok(RawContainer { header, tensors })
}

fn f32s_to_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Write a model checkpoint.
pub fn save_checkpoint(model: &Model, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let named = model.named_tensors();
    let header = Header {
        kind: "checkpoint".into(),
        config: model.config.into(),
        config_hash: config_hash.map(str::to_owned),
        s: None,
        granularity: None,
        scope: None,
        method: None,
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let payloads: Vec<Vec<u8>> = named.iter().map(|(_, t)| f32s_to_bytes(t.data())).collect();
    write_container(path, &header, &payloads)
}

/// Read a model checkpoint back; bit-exact round trip.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Header)> {
    let raw = read_container(path)?;
    if raw.header.kind != "checkpoint" {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            detail: format!("kind `{}` is not a checkpoint", raw.header.kind),
        });
    }
    let config: ModelConfig = raw.header.config.clone().into();
    let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
    for (entry, bytes) in raw.header.tensors.iter().zip(&raw.tensors) {
        if entry.dtype != "f32" {
            return Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                detail: format!("checkpoint tensor `{}` must be f32", entry.name),
            });
        }
        let tensor = Tensor::from_vec(&entry.shape, bytes_to_f32s(bytes)).map_err(|e| {
            Error::HeaderMismatch { path: path.to_path_buf(), detail: e.to_string() }
        })?;
        if map.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                detail: format!("tensor `{}` appears twice", entry.name),
            });
        }
    }
    let model = Model::from_tensors(config, &mut map)
        .map_err(|e| Error::HeaderMismatch { path: path.to_path_buf(), detail: e.to_string() })?;
    Ok((model, raw.header))
}

/// Write a sparsity mask in the same container format with u8 tensors.
pub fn save_mask(
    mask: &SparsityMask,
    config: ModelConfig,
    path: &Path,
    config_hash: Option<&str>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payloads = Vec::new();
    for (bi, bm) in mask.blocks.iter().enumerate() {
        for kind in MatrixKind::ALL {
            let m = bm.mask(kind);
            entries.push(TensorEntry {
                name: SparsityMask::tensor_name(bi, kind),
                dtype: "u8".into(),
                shape: m.shape().to_vec(),
            });
            payloads.push(m.data().iter().map(|&v| v as u8).collect());
        }
    }
    let header = Header {
        kind: "mask".into(),
        config: config.into(),
        config_hash: config_hash.map(str::to_owned),
        s: Some(mask.spec.sparsity),
        granularity: Some(mask.spec.granularity.name().into()),
        scope: Some(mask.spec.scope.name().into()),
        method: Some(mask.spec.method.name().into()),
        tensors: entries,
    };
    write_container(path, &header, &payloads)
}

fn parse_enum<T>(path: &Path, field: &str, value: Option<&str>, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
    let v = value.ok_or_else(|| Error::HeaderMismatch {
        path: path.to_path_buf(),
        detail: format!("mask header missing `{field}`"),
    })?;
    parse(v).ok_or_else(|| Error::HeaderMismatch {
        path: path.to_path_buf(),
        detail: format!("unknown {field} `{v}`"),
    })
}

/// Read a sparsity mask back, validating it against the embedded config.
pub fn load_mask(path: &Path) -> Result<(SparsityMask, Header)> {
    let raw = read_container(path)?;
    if raw.header.kind != "mask" {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            detail: format!("kind `{}` is not a mask", raw.header.kind),
        });
    }
    let config: ModelConfig = raw.header.config.clone().into();
    let method = parse_enum(path, "method", raw.header.method.as_deref(), |v| match v {
        "magnitude" => Some(PruneMethod::Magnitude),
        "wanda" => Some(PruneMethod::Wanda),
        _ => None,
    })?;
    let granularity = parse_enum(path, "granularity", raw.header.granularity.as_deref(), |v| match v {
        "per_matrix" => Some(Granularity::PerMatrix),
        "per_row" => Some(Granularity::PerRow),
        _ => None,
    })?;
    let scope = parse_enum(path, "scope", raw.header.scope.as_deref(), |v| match v {
        "all" => Some(Scope::All),
        "attention_only" => Some(Scope::AttentionOnly),
        "ffn_only" => Some(Scope::FfnOnly),
        _ => None,
    })?;
    let sparsity = raw.header.s.ok_or_else(|| Error::HeaderMismatch {
        path: path.to_path_buf(),
        detail: "mask header missing `s`".into(),
    })?;
    let spec = PrunerSpec { method, sparsity, granularity, scope };

    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (entry, bytes) in raw.header.tensors.iter().zip(&raw.tensors) {
        if entry.dtype != "u8" {
            return Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                detail: format!("mask tensor `{}` must be u8", entry.name),
            });
        }
        let data: Vec<f32> = bytes.iter().map(|&b| b as f32).collect();
        let tensor = Tensor::from_vec(&entry.shape, data).map_err(|e| Error::HeaderMismatch {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        by_name.insert(entry.name.clone(), tensor);
    }
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for bi in 0..config.n_blocks {
        let mut masks: Vec<Tensor> = Vec::with_capacity(6);
        for kind in MatrixKind::ALL {
            let name = SparsityMask::tensor_name(bi, kind);
            let t = by_name.remove(&name).ok_or_else(|| Error::HeaderMismatch {
                path: path.to_path_buf(),
                detail: format!("missing mask tensor `{name}`"),
            })?;
            let expect = kind.shape(&config);
            if t.shape() != expect {
                return Err(Error::HeaderMismatch {
                    path: path.to_path_buf(),
                    detail: format!("mask `{name}` has shape {:?}, expected {expect:?}", t.shape()),
                });
            }
            masks.push(t);
        }
        blocks.push(BlockMask { masks: masks.try_into().expect("six masks") });
    }
    let mask = SparsityMask { blocks, spec };
    mask.validate()?;
    Ok((mask, raw.header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use srlab_core::pruning::compute_mask;

    fn toy_model(seed: u64) -> Model {
        let config = ModelConfig {
            n_blocks: 2,
            hidden: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab: 258,
            max_seq: 12,
            eos_token_id: 256,
            bos_token_id: 257,
        };
        Model::init_random(config, seed).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srlb");
        let model = toy_model(3);
        save_checkpoint(&model, &path, Some("abc123")).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.config_hash.as_deref(), Some("abc123"));
        assert_eq!(loaded.config, model.config);
        for ((_, a), (_, b)) in loaded.named_tensors().iter().zip(model.named_tensors()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn corrupted_magic_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srlb");
        save_checkpoint(&toy_model(3), &path, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn wrong_version_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srlb");
        save_checkpoint(&toy_model(3), &path, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 9, expected: 1, .. })
        ));
    }

    #[test]
    fn truncated_body_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srlb");
        save_checkpoint(&toy_model(3), &path, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn header_body_disagreement_is_distinct_error() {
        // Rewrite the header to declare one more tensor than the body holds.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srlb");
        let model = toy_model(3);
        let named = model.named_tensors();
        let mut header = Header {
            kind: "checkpoint".into(),
            config: model.config.into(),
            config_hash: None,
            s: None,
            granularity: None,
            scope: None,
            method: None,
            tensors: named
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        header.tensors.push(TensorEntry {
            name: "phantom".into(),
            dtype: "f32".into(),
            shape: vec![64, 64],
        });
        let payloads: Vec<Vec<u8>> = named.iter().map(|(_, t)| f32s_to_bytes(t.data())).collect();
        write_container(&path, &header, &payloads).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn tensor_data_is_64_byte_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srlb");
        save_checkpoint(&toy_model(3), &path, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = align_up(16 + header_len);
        assert_eq!(first % ALIGN, 0);
        // first tensor is the 258x8 token embedding
        let v = f32::from_le_bytes(bytes[first..first + 4].try_into().unwrap());
        assert_eq!(v, toy_model(3).token_embedding.data()[0]);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask.srlb");
        let model = toy_model(9);
        let mask =
            compute_mask(&model, PrunerSpec::new(PruneMethod::Magnitude, 0.5), None).unwrap();
        save_mask(&mask, model.config, &path, Some("h")).unwrap();
        let (loaded, header) = load_mask(&path).unwrap();
        assert_eq!(header.s, Some(0.5));
        assert_eq!(header.method.as_deref(), Some("magnitude"));
        assert_eq!(loaded.spec, mask.spec);
        for (a, b) in loaded.blocks.iter().zip(&mask.blocks) {
            for kind in MatrixKind::ALL {
                assert!(a.mask(kind).bit_eq(b.mask(kind)));
            }
        }
    }
}
