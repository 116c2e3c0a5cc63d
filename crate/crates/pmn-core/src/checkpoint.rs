//! Binary model persistence.
//!
//! Layout: magic `PMN1`, format version u16, a length-prefixed (u32) JSON
//! block carrying the run configuration echo and the epoch counter, then one
//! record per tensor: name (u16 length + UTF-8), rank u16, dims u32 each,
//! and the payload as little-endian f32. All integers little-endian.
//!
//! Parameters live at f32 precision in memory (see
//! `Tensor::quantize_f32`), so a save/load round trip reproduces the model
//! bit for bit and evaluations before and after persisting are identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PmnError, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::RunConfig;

const MAGIC: &[u8; 4] = b"PMN1";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    config: RunConfig,
}

/// Serialize a model with its configuration echo and epoch counter.
pub fn save(path: &Path, model: &Model, config: &RunConfig, epoch: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| PmnError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| PmnError::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let meta = serde_json::to_vec(&Meta {
        epoch,
        config: config.clone(),
    })
    .map_err(|e| PmnError::Format(format!("config serialization failed: {e}")))?;
    w.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta).map_err(io_err)?;

    let mut failure = None;
    model.visit_state(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = write_tensor(&mut w, &name, tensor) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(PmnError::io(path.display().to_string(), e));
    }
    w.flush().map_err(io_err)
}

fn write_tensor(w: &mut impl Write, name: &str, tensor: &Tensor) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(tensor.rank() as u16).to_le_bytes())?;
    for &dim in tensor.shape() {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Load a checkpoint: rebuild the model from the embedded configuration and
/// fill every tensor by name. Any missing, extra, or reshaped tensor is a
/// format error (the checkpoint belongs to a different configuration).
pub fn load(path: &Path) -> Result<(Model, RunConfig, usize)> {
    let file = File::open(path).map_err(|e| PmnError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| PmnError::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(PmnError::Format(format!(
            "{}: not a model checkpoint (magic {magic:?})",
            path.display()
        )));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf).map_err(io_err)?;
    let version = u16::from_le_bytes(u16buf);
    if version != VERSION {
        return Err(PmnError::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| PmnError::Format(format!("{}: bad config block: {e}", path.display())))?;

    // Read tensor records until end of file.
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    loop {
        let mut name_len_buf = [0u8; 2];
        match r.read_exact(&mut name_len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io_err(e)),
        }
        let name_len = u16::from_le_bytes(name_len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| PmnError::Format(format!("{}: tensor name not UTF-8", path.display())))?;

        r.read_exact(&mut u16buf).map_err(io_err)?;
        let rank = u16::from_le_bytes(u16buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(io_err)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut f32buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut f32buf).map_err(io_err)?;
            data.push(f32::from_le_bytes(f32buf) as f64);
        }
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(PmnError::Format(format!(
                "{}: duplicate tensor '{name}'",
                path.display()
            )));
        }
    }

    let mut model = meta.config.build_model()?;
    let mut failure: Option<PmnError> = None;
    model.visit_state_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        match tensors.remove(&name) {
            Some(loaded) if loaded.shape() == tensor.shape() => *tensor = loaded,
            Some(loaded) => {
                failure = Some(PmnError::Format(format!(
                    "tensor '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            None => {
                failure = Some(PmnError::Format(format!(
                    "checkpoint is missing tensor '{name}'"
                )));
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(PmnError::Format(format!(
            "checkpoint contains unknown tensor '{extra}'"
        )));
    }
    Ok((model, meta.config, meta.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{RunConfig, Variant};

    fn small_config() -> RunConfig {
        RunConfig {
            seed: 3,
            epochs: 1,
            batch_size: 8,
            samples_per_class: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let config = small_config();
        let model = config.build_model().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pmn");
        save(&path, &model, &config, 7).unwrap();
        let (loaded, config_back, epoch) = load(&path).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(config_back, config);

        let mut originals = Vec::new();
        model.visit_state(&mut |name, t| originals.push((name, t.clone())));
        let mut loaded_state = Vec::new();
        loaded.visit_state(&mut |name, t| loaded_state.push((name, t.clone())));
        assert_eq!(originals.len(), loaded_state.len());
        for ((na, ta), (nb, tb)) in originals.iter().zip(&loaded_state) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na} changed across the round trip");
        }

        // Second save of the loaded model produces identical bytes.
        let path2 = dir.path().join("m2.pmn");
        save(&path2, &loaded, &config_back, 7).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn variant_mismatch_is_detected() {
        // A checkpoint whose config block claims a different classifier than
        // its tensors: the rebuilt model cannot be filled.
        let config = small_config();
        let model = config.build_model().unwrap();
        let mut lying_config = config;
        lying_config.variant = Variant::AeMlpBaseline;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pmn");
        save(&path, &model, &lying_config, 0).unwrap();
        assert!(matches!(load(&path).unwrap_err(), PmnError::Format(_)));
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.pmn");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(load(&path).unwrap_err(), PmnError::Format(_)));
    }

    #[test]
    fn baseline_checkpoints_round_trip_too() {
        let mut config = small_config();
        config.variant = Variant::AeMlpBaseline;
        let model = config.build_model().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pmn");
        save(&path, &model, &config, 2).unwrap();
        let (loaded, _, _) = load(&path).unwrap();
        assert_eq!(loaded.prototype_count(), 0);
        assert_eq!(loaded.class_count(), 4);
    }
}
