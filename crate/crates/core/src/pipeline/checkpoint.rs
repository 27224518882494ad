//! Model checkpoints: an `EFNT` tensor file plus a config sidecar.
//!
//! The tensor container carries names and shapes but no hyperparameters, so
//! the model config is written next to it as `<path>.cfg`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::serialize::{read_tensors, write_tensors};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::model::{build_model, Model};

/// Location of the config sidecar for a checkpoint at `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save_checkpoint(m: &Model, path: &Path) -> Result<()> {
    let entries: Vec<(&str, &Tensor<f32>)> = m.params.iter().collect();
    write_tensors(BufWriter::new(File::create(path)?), &entries)?;
    std::fs::write(sidecar_path(path), m.config.to_text())?;
    Ok(())
}

/// Loads a checkpoint using the config stored beside it.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let cfg = ModelConfig::parse(&text)?;
    load_checkpoint_with(path, &cfg)
}

/// Loads checkpoint tensors into a model built from `cfg`, requiring the
/// exact same parameter names, order and shapes.
pub fn load_checkpoint_with(path: &Path, cfg: &ModelConfig) -> Result<Model> {
    let tensors = read_tensors(BufReader::new(File::open(path)?))?;
    let mut model = build_model::<f32>(cfg, 0)?;
    load_params(&mut model, tensors)?;
    Ok(model)
}

/// Replaces every parameter of `m` with the matching named tensor.
pub fn load_params(m: &mut Model, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != m.params.len() {
        return Err(Error::config(
            "checkpoint",
            format!("{} tensors stored, model has {} parameters", tensors.len(), m.params.len()),
        ));
    }
    for ((name, mut t), (want, slot)) in tensors.into_iter().zip(m.params.iter_mut()) {
        if name != want {
            return Err(Error::config("checkpoint", format!("found {name:?} where {want:?} was expected")));
        }
        if t.shape() != slot.shape() {
            return Err(Error::config(
                "checkpoint",
                format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), slot.shape()),
            ));
        }
        t.set_requires_grad(true);
        *slot = t;
    }
    Ok(())
}
