//! Checkpoint binary format, little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "MCPT"
//! version    u32      currently 1
//! digest     32 bytes sha256 of the canonical JSON of ClipConfig
//! image_side u32
//! n_params   u32
//! record*    name_len u32, name bytes, dtype u8 (0 = f64),
//!            rank u32, dims u64×rank, data f64×numel
//! ```
//!
//! Round trips are bit-exact: loading a saved model yields identical bytes
//! in every parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::CheckpointError;
use crate::tensor::Tensor;

use super::{ClipConfig, ClipModel, ParamSet};

const MAGIC: &[u8; 4] = b"MCPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn config_digest(cfg: &ClipConfig) -> [u8; 32] {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher.finalize().into()
}

pub fn save_checkpoint(path: &Path, model: &ClipModel) -> Result<(), CheckpointError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&config_digest(&model.cfg))?;
    w.write_all(&(model.image_side as u32).to_le_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.inner
            .read_exact(buf)
            .map_err(|_| CheckpointError::Truncated)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a checkpoint saved for exactly this config; the stored digest must
/// match, so a shape-incompatible or re-keyed config fails before any
/// parameter is read.
pub fn load_checkpoint(path: &Path, cfg: &ClipConfig) -> Result<ClipModel, CheckpointError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let mut magic = [0u8; 4];
    r.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut digest = [0u8; 32];
    r.exact(&mut digest)?;
    let expected_digest = config_digest(cfg);
    if digest != expected_digest {
        return Err(CheckpointError::DigestMismatch {
            found: hex(&digest),
            expected: hex(&expected_digest),
        });
    }
    let image_side = r.u32()? as usize;
    let n_params = r.u32()? as usize;

    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        if name_len as u64 > file_len {
            return Err(CheckpointError::Truncated);
        }
        let mut name_bytes = vec![0u8; name_len];
        r.exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::Truncated)?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::BadDtype(dtype));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Truncated);
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        // a corrupt header cannot ask for more data than the file holds
        if numel as u64 > file_len / 8 {
            return Err(CheckpointError::Truncated);
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::from_vec(shape, data).expect("numel derived from shape");
        params.push(name, tensor);
    }

    for required in ["image.pos", "image.proj", "text.proj", "logit_t"] {
        if params.get(required).is_none() {
            return Err(CheckpointError::MissingParam(required.to_string()));
        }
    }

    Ok(ClipModel {
        cfg: cfg.clone(),
        image_side,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClipConfig, ClipModel, ModelConfig};

    fn toy() -> ClipModel {
        let cfg = ClipConfig {
            image: ModelConfig::image(2, 32, 2, 8, 16),
            text: ModelConfig::text(2, 32, 2, 50, 16),
            text_len: 8,
        };
        ClipModel::new(cfg, 32, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path, &model.cfg).unwrap();
        assert_eq!(loaded.image_side, model.image_side);
        assert_eq!(loaded.params.len(), model.params.len());
        for ((na, ta), (nb, tb)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "param {na} not bit-exact");
        }
    }

    #[test]
    fn wrong_config_is_rejected_by_digest() {
        let model = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let mut other = model.cfg.clone();
        other.text_len = 16;
        assert!(matches!(
            load_checkpoint(&path, &other),
            Err(CheckpointError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_files_fail_loudly() {
        let model = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic = path.with_extension("m");
        std::fs::write(&bad_magic, [b"XXXX".as_slice(), &bytes[4..]].concat()).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic, &model.cfg),
            Err(CheckpointError::BadMagic)
        ));

        let truncated = path.with_extension("t");
        std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated, &model.cfg),
            Err(CheckpointError::Truncated)
        ));
    }
}
