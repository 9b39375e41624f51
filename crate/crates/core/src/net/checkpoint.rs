use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{init_params, ModelConfig, ModelParams, TensorRef};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GEOMCKPT";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorMeta>,
}

/// Writes `params` at training step `step`. The payload stores raw
/// little-endian f32 words, so a save/load round trip is bit exact.
pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, step: u64) -> Result<()> {
    let mut metas = Vec::new();
    let mut offset = 0usize;
    for (name, t) in params.tensors() {
        let shape = match t {
            TensorRef::V1(a) => vec![a.len()],
            TensorRef::V2(a) => vec![a.nrows(), a.ncols()],
        };
        let len: usize = shape.iter().product();
        metas.push(TensorMeta { name, shape, offset });
        offset += len;
    }
    let header = Header {
        config: params.config.clone(),
        step,
        tensors: metas,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for slab in params.flat() {
        for v in slab {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a checkpoint back; returns the parameters and the saved step.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, u64)> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    header.config.validate()?;

    let mut params: ModelParams<f32> = init_params(&header.config)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            let shape = match t {
                TensorRef::V1(a) => vec![a.len()],
                TensorRef::V2(a) => vec![a.nrows(), a.ncols()],
            };
            (name, shape)
        })
        .collect();
    if header.tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{}: header lists {} tensors, config implies {}",
            path.display(),
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0usize;
    for (meta, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &meta.name != name || &meta.shape != shape || meta.offset != offset {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} has shape {:?} at offset {}, expected {} {:?} at {}",
                path.display(),
                meta.name,
                meta.shape,
                meta.offset,
                name,
                shape,
                offset
            )));
        }
        offset += shape.iter().product::<usize>();
    }

    let mut payload = vec![0u8; offset * 4];
    r.read_exact(&mut payload).map_err(|_| {
        Error::Checkpoint(format!(
            "{}: truncated payload, expected {} f32 values",
            path.display(),
            offset
        ))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let mut cursor = 0usize;
    for slab in params.flat_mut() {
        for v in slab.iter_mut() {
            *v = f32::from_le_bytes(payload[cursor..cursor + 4].try_into().unwrap());
            cursor += 4;
        }
    }
    Ok((params, header.step))
}

#[cfg(test)]
mod tests {
    use super::super::params::{init_params, FeatMode, ModelConfig};
    use super::*;

    fn sample_params(seed: u64) -> ModelParams<f32> {
        init_params(&ModelConfig::desk(12, seed)).unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = sample_params(7);
        save_checkpoint(&path, &params, 1234).unwrap();
        let (loaded, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 1234);
        for (a, b) in params.flat().iter().zip(loaded.flat().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(params.config, loaded.config);
    }

    #[test]
    fn trainable_encoder_roundtrip() {
        let cfg = ModelConfig {
            feat_mode: FeatMode::TrainableMlp,
            feat_in: 20,
            ..ModelConfig::desk(16, 9)
        };
        let params = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&path, &params, 5).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert!(loaded.encoder.is_some());
        for (a, b) in params.flat().iter().zip(loaded.flat().iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(3), 10).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(3), 10).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(4), 1).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
