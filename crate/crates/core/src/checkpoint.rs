//! Model archives: named f32 tensors in a safetensors file, with the model
//! config (and free-form extras) stored in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::datamodel::ModelConfig;
use crate::error::{Error, Result};
use crate::model::IsscModel;
use crate::params::Parameters;
use crate::tensor::Tensor;

const FORMAT_KEY: &str = "format";
const FORMAT: &str = "issc-checkpoint-1";
const CONFIG_KEY: &str = "model_config";

pub fn save(model: &IsscModel<f32>, path: &Path, extra: &[(&str, String)]) -> Result<()> {
    let named = model.named_params();
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = named
        .iter()
        .map(|(n, t)| (n.clone(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
    let cfg = serde_json::to_string(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    meta.insert(CONFIG_KEY.to_string(), cfg);
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Loads a model and the archive's metadata.
pub fn load(path: &Path) -> Result<(IsscModel<f32>, HashMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ckpt(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(ckpt("not a model checkpoint".into()));
    }
    let cfg_json = meta.get(CONFIG_KEY).ok_or_else(|| ckpt("missing model config".into()))?;
    let config: ModelConfig = serde_json::from_str(cfg_json).map_err(|e| ckpt(e.to_string()))?;
    let mut model = IsscModel::<f32>::new(&config, 0)?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| ckpt(e.to_string()))?;
    let mut failure = None;
    let mut seen = 0;
    model.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match st.tensor(&name) {
            Ok(view) if view.dtype() == Dtype::F32 && view.shape() == t.shape() => {
                let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                *t = Tensor::from_vec(t.shape(), data).expect("shape checked");
                seen += 1;
            }
            Ok(view) => {
                failure = Some(format!("{name}: stored {:?} {:?}, expected F32 {:?}", view.dtype(), view.shape(), t.shape()))
            }
            Err(e) => failure = Some(format!("{name}: {e}")),
        }
    });
    if let Some(f) = failure {
        return Err(ckpt(f));
    }
    if seen != st.len() {
        return Err(ckpt(format!("archive holds {} tensors, model uses {seen}", st.len())));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = IsscModel::<f32>::new(&ModelConfig::tiny(), 5).unwrap();
        save(&model, &path, &[("step", "7".into())]).unwrap();
        let (back, meta) = load(&path).unwrap();
        assert_eq!(meta["step"], "7");
        assert_eq!(back.config, model.config);
        for ((na, a), (nb, b)) in model.named_params().iter().zip(back.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
