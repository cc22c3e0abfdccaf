//! Shared on-disk layout for `.acts` shards and `.itda` dictionaries:
//! one UTF-8 JSON header line, then `count * d_model` little-endian `f32`
//! values in row-major order. Labels live in a sibling `.labels.jsonl`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::activation_store::AtomLabel;
use crate::error::{Error, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;
pub(crate) const DTYPE_F32LE: &str = "f32le";

/// Header fields every container must expose.
pub(crate) trait ContainerHeader: Serialize + DeserializeOwned {
    fn count(&self) -> usize;
    fn d_model(&self) -> usize;
    fn dtype(&self) -> &str;
    fn format_version(&self) -> u32;
}

/// `foo.acts` -> `foo.labels.jsonl`.
pub fn labels_path(path: &Path) -> PathBuf {
    path.with_extension("labels.jsonl")
}

pub(crate) fn write<H: ContainerHeader>(path: &Path, header: &H, payload: &[f32], labels: &[AtomLabel]) -> Result<()> {
    debug_assert_eq!(payload.len(), header.count() * header.d_model());
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let line = serde_json::to_string(header).map_err(|e| Error::Internal(e.to_string()))?;
    out.write_all(line.as_bytes()).map_err(io)?;
    out.write_all(b"\n").map_err(io)?;
    for v in payload {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)?;

    let lpath = labels_path(path);
    let lio = |e| Error::io(&lpath, e);
    let mut out = BufWriter::new(File::create(&lpath).map_err(lio)?);
    for label in labels {
        let line = serde_json::to_string(label).map_err(|e| Error::Internal(e.to_string()))?;
        out.write_all(line.as_bytes()).map_err(lio)?;
        out.write_all(b"\n").map_err(lio)?;
    }
    out.flush().map_err(lio)
}

/// Reads header and payload only; values are not checked for finiteness.
pub(crate) fn read_payload<H: ContainerHeader>(path: &Path) -> Result<(H, Vec<f32>)> {
    let io = |e| Error::io(path, e);
    let mut reader = BufReader::new(File::open(path).map_err(io)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(io)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format(path, "missing header line terminator"));
    }
    line.pop();
    let header: H = serde_json::from_slice(&line).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format_version() != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format_version {}", header.format_version()),
        ));
    }
    if header.dtype() != DTYPE_F32LE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", header.dtype())));
    }
    if header.d_model() == 0 {
        return Err(Error::format(path, "d_model must be positive"));
    }
    let expected = header
        .count()
        .checked_mul(header.d_model())
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "count * d_model overflows"))?;
    let mut bytes = Vec::with_capacity(expected);
    reader.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header implies {} (count={}, d_model={})",
                bytes.len(),
                expected,
                header.count(),
                header.d_model()
            ),
        ));
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, payload))
}

pub(crate) fn read_labels(path: &Path, count: usize) -> Result<Vec<AtomLabel>> {
    let lpath = labels_path(path);
    let file = File::open(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let mut labels = Vec::with_capacity(count);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&lpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let label: AtomLabel =
            serde_json::from_str(&line).map_err(|e| Error::format(&lpath, format!("line {}: {e}", i + 1)))?;
        labels.push(label);
    }
    if labels.len() != count {
        return Err(Error::format(
            &lpath,
            format!("{} labels for {} rows", labels.len(), count),
        ));
    }
    Ok(labels)
}
