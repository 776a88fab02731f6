//! Embedding files. `<name>.ndjson` holds a header line
//! `{"kind":"emb-header","model","layer","dim","seq_len"}` followed by one
//! `{"kind":"emb","seq","pos","x"}` line per token. The packed variant keeps
//! only the header in the NDJSON file and stores rows as little-endian `f32`
//! in `(seq, pos)` order in the sibling `<name>.bin`.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ProbeDataset;
use crate::error::{Error, Result};
use crate::trace::{open_reader, open_writer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbHeader {
    pub model: String,
    pub layer: usize,
    pub dim: usize,
    pub seq_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum Line {
    #[serde(rename = "emb-header")]
    Header(EmbHeader),
    #[serde(rename = "emb")]
    Emb { seq: u64, pos: usize, x: Vec<f64> },
}

fn bin_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    let stem = s.strip_suffix(".gz").unwrap_or(&s);
    let stem = stem.strip_suffix(".ndjson").unwrap_or(stem);
    PathBuf::from(format!("{stem}.bin"))
}

/// Writes `dataset`; with `packed`, rows go to the sibling `.bin` file and
/// must be whole sequences in `(seq, pos)` order.
pub fn write_embeddings(path: impl AsRef<Path>, header: &EmbHeader, dataset: &ProbeDataset, packed: bool) -> Result<()> {
    let path = path.as_ref();
    if header.dim != dataset.dim() || header.seq_len != dataset.seq_len {
        return Err(Error::Config("header does not match the dataset shape".into()));
    }
    let mut w = open_writer(path)?;
    let io = |e| Error::io(path, e);
    let line = serde_json::to_string(&Line::Header(header.clone())).expect("header serializes");
    writeln!(w, "{line}").map_err(io)?;
    if packed {
        let ordered = dataset
            .positions
            .iter()
            .enumerate()
            .all(|(i, &p)| p == i % dataset.seq_len && dataset.sequences[i] == dataset.sequences[i - p]);
        if !dataset.whole_sequences() || !ordered {
            return Err(Error::Config("packed embeddings need whole sequences in (seq, pos) order".into()));
        }
        let bp = bin_path(path);
        let mut bytes = Vec::with_capacity(dataset.features.len() * 4);
        for v in dataset.features.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))?;
    } else {
        for (i, row) in dataset.features.rows().into_iter().enumerate() {
            let rec = Line::Emb {
                seq: dataset.sequences[i],
                pos: dataset.positions[i],
                x: row.to_vec(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("row serializes")).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads either variant. Packed rows are used when the NDJSON file holds
/// no `emb` lines.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(EmbHeader, ProbeDataset)> {
    let path = path.as_ref();
    let reader = open_reader(path)?;
    let mut header: Option<EmbHeader> = None;
    let mut data = Vec::new();
    let mut sequences = Vec::new();
    let mut positions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match (parsed, &header) {
            (Line::Header(h), None) => header = Some(h),
            (Line::Header(_), Some(_)) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "second header".into(),
                })
            }
            (Line::Emb { .. }, None) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "embedding before header".into(),
                })
            }
            (Line::Emb { seq, pos, x }, Some(h)) => {
                if x.len() != h.dim {
                    return Err(Error::Schema(format!("line {}: {} values, header dim {}", i + 1, x.len(), h.dim)));
                }
                data.extend(x);
                sequences.push(seq);
                positions.push(pos);
            }
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing emb-header".into(),
    })?;
    if header.dim == 0 || header.seq_len == 0 {
        return Err(Error::Schema("header dim and seq_len must be positive".into()));
    }
    if positions.is_empty() {
        let bp = bin_path(path);
        let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let row_bytes = header.dim * 4;
        if bytes.len() % (row_bytes * header.seq_len) != 0 {
            return Err(Error::Schema(format!(
                "{} bytes is not a whole number of {}-token sequences",
                bytes.len(),
                header.seq_len
            )));
        }
        data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let rows = bytes.len() / row_bytes;
        sequences = (0..rows).map(|r| (r / header.seq_len) as u64).collect();
        positions = (0..rows).map(|r| r % header.seq_len).collect();
    }
    let rows = positions.len();
    let features = Array2::from_shape_vec((rows, header.dim), data).expect("row-major buffer");
    let ds = ProbeDataset::new(features, sequences, positions, header.seq_len)?;
    Ok((header, ds))
}
