//! Named-tensor archives (safetensors container) used for checkpoints and
//! pretrained assets.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use csf_autograd::{ParamStore, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{CsfError, Result};

/// Serialize `store` plus string metadata into a byte buffer (f64 payloads).
pub fn to_bytes(store: &ParamStore, metadata: &HashMap<String, String>) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(name, t)| {
            let bytes = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            (name.clone(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| CsfError::Serde(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(metadata.clone())).map_err(|e| CsfError::Serde(e.to_string()))
}

/// Parse an archive; f32 and f64 payloads are accepted.
pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, HashMap<String, String>)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| CsfError::Serde(e.to_string()))?;
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| CsfError::Serde(e.to_string()))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let mut store = ParamStore::new();
    for (name, view) in st.tensors() {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect(),
            other => {
                return Err(CsfError::Serde(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        store.insert(name, Tensor::new(view.shape().to_vec(), data));
    }
    Ok((store, metadata))
}

/// Write via a temporary sibling file and rename, so readers never observe a
/// partial archive.
pub fn save(path: &Path, store: &ParamStore, metadata: &HashMap<String, String>) -> Result<()> {
    let bytes = to_bytes(store, metadata)?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(ParamStore, HashMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| CsfError::io(path, e))?;
    from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CsfError::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "archive".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CsfError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CsfError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new([2, 2], vec![0.1, -2.5e-300, f64::MAX, 1.0 / 3.0]));
        store.insert("b", Tensor::new([1], vec![7.0]));
        let mut meta = HashMap::new();
        meta.insert("version".to_string(), "1".to_string());
        let bytes = to_bytes(&store, &meta).unwrap();
        let (back, meta_back) = from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(meta_back.get("version").map(String::as_str), Some("1"));
    }

    #[test]
    fn save_is_atomic_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones([3]));
        save(&path, &store, &HashMap::new()).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["x.safetensors".to_string()]);
        assert_eq!(load(&path).unwrap().0, store);
    }
}
