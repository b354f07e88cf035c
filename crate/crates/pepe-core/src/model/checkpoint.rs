//! Versioned JSON checkpoint: dims, metadata, and every parameter tensor by
//! name. Loading validates the format version, tensor names, and shapes;
//! callers validate the vocabulary digest against their vocabulary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PepeError, Result};

use super::{ApeModel, Dims, ModelMeta, ParamSet};

const FORMAT_VERSION: u32 = 1;

/// On-disk representation.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: Dims,
    pub meta: ModelMeta,
    /// Free-form pipeline metadata (config digest, stage, seed).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

pub fn save_checkpoint(
    model: &ApeModel,
    extra: BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let tensors: BTreeMap<String, Vec<f64>> = model
        .params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();
    let ckpt = Checkpoint {
        format_version: FORMAT_VERSION,
        dims: model.dims,
        meta: model.meta.clone(),
        extra,
        tensors,
    };
    let body = serde_json::to_vec(&ckpt)?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ApeModel, BTreeMap<String, String>)> {
    let body = std::fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&body)
        .map_err(|e| PepeError::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format_version != FORMAT_VERSION {
        return Err(PepeError::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            ckpt.format_version
        )));
    }
    ckpt.dims.validate()?;
    if ckpt.meta.user_index.len() != ckpt.dims.users {
        return Err(PepeError::Checkpoint(format!(
            "user index has {} entries, dims.users is {}",
            ckpt.meta.user_index.len(),
            ckpt.dims.users
        )));
    }

    let with_factor = ckpt.tensors.contains_key("factor.user_vec");
    let with_user_cls = ckpt.tensors.contains_key("user_cls.w");
    let mut params = ParamSet::zeros(&ckpt.dims, with_factor, with_user_cls);
    let mut expected = 0usize;
    for (name, tensor) in params.tensors_mut() {
        expected += 1;
        let stored = ckpt
            .tensors
            .get(&name)
            .ok_or_else(|| PepeError::Checkpoint(format!("missing tensor {name}")))?;
        if stored.len() != tensor.len() {
            return Err(PepeError::Checkpoint(format!(
                "tensor {name} has {} values, expected {}",
                stored.len(),
                tensor.len()
            )));
        }
        if stored.iter().any(|v| !v.is_finite()) {
            return Err(PepeError::Checkpoint(format!(
                "tensor {name} contains non-finite values"
            )));
        }
        tensor.copy_from_slice(stored);
    }
    if ckpt.tensors.len() != expected {
        return Err(PepeError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {expected}",
            ckpt.tensors.len()
        )));
    }

    Ok((
        ApeModel {
            dims: ckpt.dims,
            params,
            meta: ckpt.meta,
        },
        ckpt.extra,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_model;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (mut model, _) = tiny_model(31);
        model.meta.pretrained = true;
        model.meta.variant = Some("pepe".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut extra = BTreeMap::new();
        extra.insert("config_digest".to_string(), "abc123".to_string());
        save_checkpoint(&model, extra.clone(), &path).unwrap();

        let (back, extra_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back.dims, model.dims);
        assert_eq!(back.meta, model.meta);
        assert_eq!(extra_back, extra);
        for ((na, ta), (nb, tb)) in model.params.tensors().iter().zip(back.params.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na} must round-trip bit-exactly");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (model, _) = tiny_model(32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, BTreeMap::new(), &path).unwrap();

        let body = std::fs::read_to_string(&path).unwrap();
        let mut ckpt: serde_json::Value = serde_json::from_str(&body).unwrap();
        ckpt["tensors"]["seg"] = serde_json::json!([1.0, 2.0]);
        std::fs::write(&path, serde_json::to_vec(&ckpt).unwrap()).unwrap();

        assert!(matches!(
            load_checkpoint(&path),
            Err(PepeError::Checkpoint(_))
        ));
    }
}
