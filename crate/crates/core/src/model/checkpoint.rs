//! Binary checkpoint format.
//!
//! Layout: the 4-byte magic `RMCK`, a little-endian `u64` header length, a
//! JSON header `{version, config, tensors: [{name, shape}]}` and then every
//! tensor's values as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, RoiMatcher};
use crate::nn::Tensor;

pub const CHECKPOINT_VERSION: &str = "roimatcher-v1";
const MAGIC: &[u8; 4] = b"RMCK";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes the configuration and every parameter of `model`.
pub fn save_checkpoint(model: &RoiMatcher, path: &Path) -> Result<(), ModelError> {
    let header = Header {
        version: CHECKPOINT_VERSION.to_string(),
        config: model.config().clone(),
        tensors: model
            .params()
            .iter()
            .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * model.params().num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint. The parameter names and shapes must
/// match the layout implied by the stored configuration exactly.
pub fn load_checkpoint(path: &Path) -> Result<RoiMatcher, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(12..).ok_or_else(|| bad("truncated header"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            expected: CHECKPOINT_VERSION.to_string(),
            found: header.version,
        });
    }
    let mut model = RoiMatcher::new(header.config, 0)?;
    if header.tensors.len() != model.params().len() {
        return Err(bad(&format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    let mut data = &body[hlen..];
    for entry in &header.tensors {
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
        if model.params().get(id).shape() != entry.shape.as_slice() {
            return Err(bad(&format!("shape mismatch for {}", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad("truncated tensor data"));
        }
        let values: Vec<f64> = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *model.params_mut().get_mut(id) = Tensor::new(entry.shape.clone(), values);
        data = &data[8 * n..];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { base_channels: 4, input_size: (32, 32), attention_heads: 2, head_channels: 8, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = RoiMatcher::new(cfg(), 11).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for ((_, n1, t1), (_, n2, t2)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn rejects_wrong_version_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = RoiMatcher::new(cfg(), 1).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find(CHECKPOINT_VERSION).unwrap();
        let mut altered = bytes.clone();
        altered[pos + CHECKPOINT_VERSION.len() - 1] = b'9';
        std::fs::write(&path, &altered).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::VersionMismatch { .. })));
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
