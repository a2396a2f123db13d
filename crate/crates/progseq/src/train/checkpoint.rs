//! Checkpoint format: a JSON manifest (configs, parameter names,
//! shapes, byte offsets) beside a little-endian 32-bit float blob.
//! Loading and re-saving reproduces the blob bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{Discriminator, DiscriminatorConfig};
use crate::model::{ProgressiveModel, ProgressiveModelConfig};
use crate::scalar::Scalar;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("parameter `{name}`: {problem}")]
    Param { name: String, problem: String },
    #[error("blob is {got} bytes, manifest promises {want}")]
    BlobLength { got: usize, want: usize },
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    scalar: String,
    model: ProgressiveModelConfig,
    discriminator: Option<DiscriminatorConfig>,
    params: Vec<ManifestParam>,
    blob_bytes: usize,
}

const FORMAT: &str = "PROGSEQ-CKPT1";
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `manifest.json` and `params.bin` into `dir`. Discriminator
/// parameters, when present, follow the generator's in the blob under
/// their own namespace.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    model: &ProgressiveModel<S>,
    discriminator: Option<&Discriminator<S>>,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut append = |name: &str, shape: &[usize], values: &[S]| {
        params.push(ManifestParam {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: blob.len(),
            len: values.len(),
        });
        for v in values {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for (_, name, tensor) in model.params().iter() {
        append(name, tensor.shape(), tensor.values());
    }
    if let Some(d) = discriminator {
        for (_, name, tensor) in d.params().iter() {
            append(name, tensor.shape(), tensor.values());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        scalar: S::NAME.to_string(),
        model: model.config().clone(),
        discriminator: discriminator.map(|d| d.config().clone()),
        params,
        blob_bytes: blob.len(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(io_err(&blob_path))?;
    Ok(())
}

/// Reads a checkpoint directory back into a model (and discriminator
/// when one was saved). Every parameter must appear exactly once with
/// a matching shape.
pub fn load_checkpoint<S: Scalar>(
    dir: &Path,
) -> Result<(ProgressiveModel<S>, Option<Discriminator<S>>), CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Manifest(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() != manifest.blob_bytes {
        return Err(CheckpointError::BlobLength {
            got: blob.len(),
            want: manifest.blob_bytes,
        });
    }

    let mut model = ProgressiveModel::<S>::new(manifest.model.clone(), 0)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut discriminator = match &manifest.discriminator {
        Some(cfg) => Some(
            Discriminator::<S>::new(cfg.clone(), 0)
                .map_err(|e| CheckpointError::Config(e.to_string()))?,
        ),
        None => None,
    };

    let read_into = |values: &mut Vec<S>, entry: &ManifestParam| -> Result<(), CheckpointError> {
        let bytes = entry.len * 4;
        let end = entry.offset + bytes;
        if end > blob.len() {
            return Err(CheckpointError::Param {
                name: entry.name.clone(),
                problem: format!("blob range {}..{} out of bounds", entry.offset, end),
            });
        }
        if values.len() != entry.len {
            return Err(CheckpointError::Param {
                name: entry.name.clone(),
                problem: format!("expected {} values, manifest has {}", values.len(), entry.len),
            });
        }
        for (i, v) in values.iter_mut().enumerate() {
            let at = entry.offset + 4 * i;
            let bits: [u8; 4] = blob[at..at + 4].try_into().expect("4-byte slice");
            *v = S::of_f64(f32::from_le_bytes(bits) as f64);
        }
        Ok(())
    };

    let mut seen = std::collections::BTreeSet::new();
    for entry in &manifest.params {
        if !seen.insert(entry.name.clone()) {
            return Err(CheckpointError::Param {
                name: entry.name.clone(),
                problem: "listed more than once".into(),
            });
        }
        let store = if entry.name.starts_with("discriminator.") {
            match &mut discriminator {
                Some(d) => d.params_mut(),
                None => {
                    return Err(CheckpointError::Param {
                        name: entry.name.clone(),
                        problem: "discriminator parameter without a discriminator config".into(),
                    })
                }
            }
        } else {
            model.params_mut()
        };
        let id = store.find(&entry.name).ok_or_else(|| CheckpointError::Param {
            name: entry.name.clone(),
            problem: "unknown parameter".into(),
        })?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Param {
                name: entry.name.clone(),
                problem: format!(
                    "shape {:?} does not match checkpoint {:?}",
                    store.get(id).shape(),
                    entry.shape
                ),
            });
        }
        read_into(store.get_mut(id).values_mut(), entry)?;
    }
    let expected = model.params().len()
        + discriminator.as_ref().map_or(0, |d| d.params().len());
    if seen.len() != expected {
        return Err(CheckpointError::Manifest(format!(
            "manifest lists {} parameters, model needs {expected}",
            seen.len()
        )));
    }
    Ok((model, discriminator))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AugmentationMode, OutputHead};

    fn config() -> ProgressiveModelConfig {
        ProgressiveModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 8,
            ff_dim: 16,
            joint_count: 2,
            vocab_size: 6,
            future_window: (0, 1),
            augmentation: AugmentationMode::None,
            head: OutputHead::Regression,
            u_max: 40,
            termination_epsilon: 0.02,
        }
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ckpt-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn round_trip_is_blob_exact() {
        let dir = temp_dir("rt");
        let model: ProgressiveModel<f32> = ProgressiveModel::new(config(), 9).unwrap();
        save_checkpoint(&dir, &model, None).unwrap();
        let blob_a = fs::read(dir.join(BLOB_FILE)).unwrap();
        let (loaded, disc) = load_checkpoint::<f32>(&dir).unwrap();
        assert!(disc.is_none());
        save_checkpoint(&dir, &loaded, None).unwrap();
        let blob_b = fs::read(dir.join(BLOB_FILE)).unwrap();
        assert_eq!(blob_a, blob_b);
        for ((_, na, ta), (_, nb, tb)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values());
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn double_precision_models_round_trip_through_f32_blobs() {
        let dir = temp_dir("f64");
        let model: ProgressiveModel<f64> = ProgressiveModel::new(config(), 11).unwrap();
        save_checkpoint(&dir, &model, None).unwrap();
        let blob_a = fs::read(dir.join(BLOB_FILE)).unwrap();
        let (loaded, _) = load_checkpoint::<f64>(&dir).unwrap();
        save_checkpoint(&dir, &loaded, None).unwrap();
        let blob_b = fs::read(dir.join(BLOB_FILE)).unwrap();
        assert_eq!(blob_a, blob_b);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_lists_every_parameter_exactly_once() {
        let dir = temp_dir("names");
        let model: ProgressiveModel<f32> = ProgressiveModel::new(config(), 2).unwrap();
        save_checkpoint(&dir, &model, None).unwrap();
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest.params.len(), model.params().len());
        let mut names: Vec<&str> = manifest.params.iter().map(|p| p.name.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), before);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn discriminator_params_live_in_their_own_namespace() {
        let dir = temp_dir("disc");
        let model: ProgressiveModel<f32> = ProgressiveModel::new(config(), 2).unwrap();
        let disc: Discriminator<f32> =
            Discriminator::new(DiscriminatorConfig::preset(6, 2, 40, 6), 3).unwrap();
        save_checkpoint(&dir, &model, Some(&disc)).unwrap();
        let (loaded_m, loaded_d) = load_checkpoint::<f32>(&dir).unwrap();
        let loaded_d = loaded_d.expect("discriminator restored");
        for ((_, _, a), (_, _, b)) in disc.params().iter().zip(loaded_d.params().iter()) {
            assert_eq!(a.values(), b.values());
        }
        assert_eq!(loaded_m.config().embed_dim, 8);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_blob_length_is_detected() {
        let dir = temp_dir("corrupt");
        let model: ProgressiveModel<f32> = ProgressiveModel::new(config(), 2).unwrap();
        save_checkpoint(&dir, &model, None).unwrap();
        let mut blob = fs::read(dir.join(BLOB_FILE)).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(dir.join(BLOB_FILE), blob).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&dir),
            Err(CheckpointError::BlobLength { .. })
        ));
        fs::remove_dir_all(&dir).unwrap();
    }
}
