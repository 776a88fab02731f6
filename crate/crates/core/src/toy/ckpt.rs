//! Weights are stored as a flat little-endian `f64` blob. A one-line NDJSON
//! sidecar at `<blob>.header.ndjson` records the model config and the name,
//! shape, dtype and element offset of every tensor.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TensorInfo, ToyConfig, ToyMoEParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    endianness: String,
    num_values: usize,
    config: ToyConfig,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "toy-moe-checkpoint/1";

pub fn header_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".header.ndjson");
    PathBuf::from(s)
}

pub fn save_checkpoint(params: &ToyMoEParams, blob: impl AsRef<Path>) -> Result<()> {
    let blob = blob.as_ref();
    let header = Header {
        format: FORMAT.into(),
        dtype: "f64".into(),
        endianness: "little".into(),
        num_values: params.data.len(),
        config: params.config.clone(),
        tensors: params
            .layout
            .tensors
            .iter()
            .map(|t: &TensorInfo| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f64".into(),
                offset: t.offset,
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(params.data.len() * 8);
    for w in &params.data {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
    let hp = header_path(blob);
    let mut f = fs::File::create(&hp).map_err(|e| Error::io(&hp, e))?;
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(&hp, e))?;
    Ok(())
}

pub fn load_checkpoint(blob: impl AsRef<Path>) -> Result<ToyMoEParams> {
    let blob = blob.as_ref();
    let hp = header_path(blob);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let header: Header = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != FORMAT || header.dtype != "f64" || header.endianness != "little" {
        return Err(Error::Schema(format!(
            "unsupported checkpoint {} / {} / {}",
            header.format, header.dtype, header.endianness
        )));
    }
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    if bytes.len() != header.num_values * 8 {
        return Err(Error::Schema(format!(
            "blob has {} bytes, header promises {} values",
            bytes.len(),
            header.num_values
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = ToyMoEParams::from_data(header.config, data)?;
    for (t, e) in params.layout.tensors.iter().zip(&header.tensors) {
        if t.name != e.name || t.shape != e.shape || t.offset != e.offset {
            return Err(Error::Schema(format!("tensor table mismatch at {}", e.name)));
        }
    }
    if params.layout.tensors.len() != header.tensors.len() {
        return Err(Error::Schema("tensor count mismatch".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let p = ToyMoEParams::init(ToyConfig::default(), 3).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let header = fs::read_to_string(header_path(&path)).unwrap();
        assert_eq!(header.lines().count(), 1);
        assert!(header.contains("\"layers.0.router\""));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let p = ToyMoEParams::init(ToyConfig::default(), 3).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Schema(_))));
    }
}
