//! Model checkpoints: a binary blob of little-endian `f64` parameters and a
//! JSON sidecar describing the backend and the stage-specific settings.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoder::{BackendKind, EncoderConfig};
use crate::error::{Error, Result};
use crate::io;

const MAGIC: &[u8; 8] = b"CEDARCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub backend_kind: BackendKind,
    pub h: usize,
    pub version: u32,
    pub stage: String,
    pub encoder: EncoderConfig,
    pub num_params: usize,
    pub parameter_hash: String,
    /// Stage-specific model settings.
    pub model: serde_json::Value,
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn encode_blob(params: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.write_u64::<LittleEndian>(params.len() as u64)
        .expect("write to Vec");
    for p in params {
        buf.write_f64::<LittleEndian>(*p).expect("write to Vec");
    }
    buf
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated header".into()))? as usize;
    if bytes.len() != 16 + n * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {n} parameters, blob holds {} bytes",
            bytes.len()
        )));
    }
    (0..n)
        .map(|_| {
            cur.read_f64::<LittleEndian>()
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect()
}

/// Write `<stem>.bin` and `<stem>.json`.
pub fn save(stem: &Path, sidecar: &Sidecar, params: &[f64]) -> Result<()> {
    io::write_atomic(&blob_path(stem), &encode_blob(params))?;
    io::write_json(&sidecar_path(stem), sidecar)
}

pub fn load(stem: &Path, expected_stage: &str) -> Result<(Sidecar, Vec<f64>)> {
    let sidecar: Sidecar = io::read_json(&sidecar_path(stem))?;
    if sidecar.stage != expected_stage {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` model, expected `{expected_stage}`",
            stem.display(),
            sidecar.stage
        )));
    }
    if sidecar.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            sidecar.version
        )));
    }
    let path = blob_path(stem);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let params = decode_blob(&bytes)?;
    if params.len() != sidecar.num_params {
        return Err(Error::Checkpoint(format!(
            "sidecar declares {} parameters, blob has {}",
            sidecar.num_params,
            params.len()
        )));
    }
    Ok((sidecar, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_corruption() {
        let p = vec![1.5, -0.25, f64::MIN_POSITIVE];
        let b = encode_blob(&p);
        assert_eq!(decode_blob(&b).unwrap(), p);
        assert!(decode_blob(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_blob(&bad).is_err());
    }
}
