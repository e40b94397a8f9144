//! SRTK token files: magic "SRTK", version u32 LE, N u64 LE, T u64 LE, then
//! N*T token ids as u32 LE. Provenance (source, seed, config hash) rides in
//! a small TOML sidecar at `<path>.meta` since the binary layout is fixed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use srlab_core::calib::{CalibSource, CalibrationSet};
use srlab_core::tokens::TokenBatch;

use crate::error::{io_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"SRTK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenMeta {
    pub source: String,
    /// Derived seeds use the full u64 range, which TOML integers (i64)
    /// cannot hold, so the sidecar stores the seed as a string.
    #[serde(with = "u64_as_string")]
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mix_ratio: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

mod u64_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

pub fn save_tokens(set: &CalibrationSet, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let batch = set.tokens();
    let mut bytes = Vec::with_capacity(24 + batch.ids().len() * 4);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(batch.n() as u64).to_le_bytes());
    bytes.extend_from_slice(&(batch.t() as u64).to_le_bytes());
    for &id in batch.ids() {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;

    let meta = TokenMeta {
        source: set.source_name().to_owned(),
        seed: set.seed(),
        mix_ratio: match set.source() {
            CalibSource::Mixed { ratio } => Some(ratio),
            _ => None,
        },
        config_hash: config_hash.map(str::to_owned),
    };
    let toml = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    let mp = meta_path(path);
    fs::write(&mp, toml).map_err(|e| io_err(&mp, e))
}

pub fn load_tokens(path: &Path) -> Result<CalibrationSet> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: "no magic".into() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic });
    }
    if bytes.len() < 24 {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: "no dimensions".into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let t = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let want = 24 + n * t * 4;
    if bytes.len() < want {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("want {want} bytes for {n}x{t} ids, have {}", bytes.len()),
        });
    }
    let ids: Vec<u32> = bytes[24..want]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let batch = TokenBatch::new(n, t, ids)
        .map_err(|e| Error::HeaderMismatch { path: path.to_path_buf(), detail: e.to_string() })?;

    let (source, seed) = match fs::read_to_string(meta_path(path)) {
        Ok(text) => {
            let meta: TokenMeta = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let source = match meta.source.as_str() {
                "self_generated" => CalibSource::SelfGenerated,
                "mixed" => CalibSource::Mixed { ratio: meta.mix_ratio.unwrap_or(0.0) },
                _ => CalibSource::Corpus,
            };
            (source, meta.seed)
        }
        Err(_) => (CalibSource::Corpus, 0),
    };
    Ok(CalibrationSet::new(batch, source, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use srlab_core::calib::sample_from_corpus;

    #[test]
    fn token_file_round_trips_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.srtk");
        let corpus: Vec<u32> = (0..200u32).map(|v| v % 256).collect();
        let set = sample_from_corpus(&corpus, 5, 12, 42).unwrap();
        save_tokens(&set, &path, Some("deadbeef")).unwrap();
        let loaded = load_tokens(&path).unwrap();
        assert_eq!(loaded.tokens(), set.tokens());
        assert_eq!(loaded.source(), set.source());
        assert_eq!(loaded.seed(), 42);
        let meta: TokenMeta =
            toml::from_str(&fs::read_to_string(meta_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.config_hash.as_deref(), Some("deadbeef"));
    }

    #[test]
    fn truncation_and_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.srtk");
        let corpus: Vec<u32> = (0..64u32).collect();
        let set = sample_from_corpus(&corpus, 2, 8, 1).unwrap();
        save_tokens(&set, &path, None).unwrap();

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_tokens(&path), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        fs::write(&path, bad).unwrap();
        assert!(matches!(load_tokens(&path), Err(Error::BadMagic { .. })));
    }
}
