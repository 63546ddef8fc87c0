//! Versioned named-tensor containers (safetensors with a metadata header).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

const KEY_KIND: &str = "artopih.kind";
const KEY_VERSION: &str = "artopih.version";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
    /// First 16 hex digits of the SHA-256 of the file bytes.
    pub id: String,
}

fn digest_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

/// Serializes `tensors` with `kind` and extra `metadata`; returns the checkpoint id.
pub fn save(
    path: impl AsRef<Path>,
    kind: &str,
    metadata: &BTreeMap<String, String>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<String> {
    let path = path.as_ref();
    let mut meta: HashMap<String, String> =
        metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    meta.insert(KEY_KIND.into(), kind.into());
    meta.insert(KEY_VERSION.into(), FORMAT_VERSION.into());
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let bytes = canonical_header(&bytes)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(digest_id(&bytes))
}

/// Rewrites the JSON header with sorted keys. The metadata passes through a
/// `HashMap`, so without this the same tensors could produce different bytes
/// and therefore different ids.
fn canonical_header(bytes: &[u8]) -> Result<Vec<u8>> {
    let bad = |m: &str| Error::Checkpoint(format!("serializer produced {m}"));
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("no header"))?.try_into().expect("8 bytes")) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(|| bad("a truncated header"))?;
    let value: serde_json::Value = serde_json::from_slice(header)?;
    let mut json = serde_json::to_vec(&value)?;
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

pub fn load(path: impl AsRef<Path>, expected_kind: &str, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected_kind, device)
}

pub fn from_bytes(bytes: &[u8], expected_kind: &str, device: &Device) -> Result<Checkpoint> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable container: {e}")))?;
    let mut metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let kind = metadata
        .remove(KEY_KIND)
        .ok_or_else(|| Error::Checkpoint("missing kind tag".into()))?;
    let version = metadata
        .remove(KEY_VERSION)
        .ok_or_else(|| Error::Checkpoint("missing version tag".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "expected a {expected_kind} checkpoint, found {kind}"
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(bytes, device)
        .map_err(|e| Error::Checkpoint(format!("corrupt tensor data: {e}")))?;
    Ok(Checkpoint {
        kind,
        metadata,
        tensors,
        id: digest_id(bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut t = BTreeMap::new();
        t.insert(
            "a".to_string(),
            Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap(),
        );
        t
    }

    #[test]
    fn round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        let mut meta = BTreeMap::new();
        meta.insert("profile".to_string(), "tiny".to_string());
        let id = save(&p, "test", &meta, &sample()).unwrap();
        let ck = load(&p, "test", &Device::Cpu).unwrap();
        assert_eq!(ck.id, id);
        assert_eq!(ck.metadata, meta);
        let a: Vec<Vec<f32>> = ck.tensors["a"].to_dtype(DType::F32).unwrap().to_vec2().unwrap();
        assert_eq!(a, vec![vec![0.0, 1.0, 2.0], vec![3.0, 4.0, 5.0]]);
    }

    #[test]
    fn same_content_same_id() {
        let dir = tempfile::tempdir().unwrap();
        let meta: BTreeMap<String, String> = (0..20).map(|i| (format!("k{i}"), i.to_string())).collect();
        let a = save(dir.path().join("a"), "test", &meta, &sample()).unwrap();
        let b = save(dir.path().join("b"), "test", &meta, &sample()).unwrap();
        assert_eq!(a, b);
        assert_eq!(load(dir.path().join("b"), "test", &Device::Cpu).unwrap().metadata, meta);
    }

    #[test]
    fn wrong_kind_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        save(&p, "test", &BTreeMap::new(), &sample()).unwrap();
        assert!(load(&p, "other", &Device::Cpu).unwrap_err().to_string().contains("expected"));

        let mut meta = HashMap::new();
        meta.insert(KEY_KIND.to_string(), "test".to_string());
        meta.insert(KEY_VERSION.to_string(), "99".to_string());
        let s = sample();
        let bytes = safetensors::serialize(s.iter().map(|(k, v)| (k.as_str(), v)), Some(meta)).unwrap();
        let err = from_bytes(&bytes, "test", &Device::Cpu).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn corrupted_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        save(&p, "test", &BTreeMap::new(), &sample()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(from_bytes(&bytes, "test", &Device::Cpu).is_err());
        assert!(from_bytes(b"garbage", "test", &Device::Cpu).is_err());
    }
}
