//! `FLD1` container for field series.
//!
//! Layout:
//!
//! | bytes      | content                                              |
//! |------------|------------------------------------------------------|
//! | 8          | magic `FLD1\0\0\0\0`                                 |
//! | 4          | header length `N`, little-endian u32                 |
//! | N          | UTF-8 JSON header ([`FldHeader`])                    |
//! | rest       | `nt*nz*ny*nx*2` little-endian f32, `[t,z,y,x,c]` order |
//!
//! The mask is run-length encoded row-major over `[y, x]`: runs alternate
//! invalid, valid, invalid, ... starting with an invalid run (possibly 0).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldSeries, GridSpec, NC};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FLD1\0\0\0\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FldHeader {
    pub grid: GridSpec,
    pub nt: usize,
    pub axes: Vec<String>,
    pub channels: Vec<String>,
    pub dtype: String,
    pub mask_rle: Vec<usize>,
}

impl FldHeader {
    pub fn dims(&self) -> [usize; 5] {
        [self.nt, self.grid.nz, self.grid.ny, self.grid.nx, NC]
    }

    pub fn payload_len(&self) -> usize {
        self.dims().iter().product::<usize>() * 4
    }

    pub fn mask(&self) -> Result<Vec<bool>> {
        decode_mask(&self.mask_rle, self.grid.cells())
    }
}

pub fn encode_mask(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_mask(runs: &[usize], cells: usize) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(cells);
    for (i, &r) in runs.iter().enumerate() {
        mask.extend(std::iter::repeat_n(i % 2 == 1, r));
    }
    if mask.len() != cells {
        return Err(Error::ShapeMismatch(format!(
            "mask runs cover {} cells, grid has {cells}",
            mask.len()
        )));
    }
    Ok(mask)
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadField {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write(fs: &FieldSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = FldHeader {
        grid: fs.spec().clone(),
        nt: fs.nt(),
        axes: ["t", "z", "y", "x", "c"].map(String::from).to_vec(),
        channels: vec!["u".into(), "v".into()],
        dtype: "f32le".into(),
        mask_rle: encode_mask(fs.mask()),
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write_all = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write_all(MAGIC)?;
    write_all(&(json.len() as u32).to_le_bytes())?;
    write_all(&json)?;
    let mut payload = Vec::with_capacity(fs.data().len() * 4);
    for &v in fs.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_all(&payload)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Returns the header and the byte offset of the payload.
fn read_header_from(r: &mut impl Read, path: &Path) -> Result<(FldHeader, usize)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad(path, "file shorter than magic"))?;
    if &magic != MAGIC {
        return Err(bad(path, "wrong magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| bad(path, "missing header length"))?;
    let n = u32::from_le_bytes(len) as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)
        .map_err(|_| bad(path, "truncated header"))?;
    let header: FldHeader =
        serde_json::from_slice(&json).map_err(|e| bad(path, format!("header JSON: {e}")))?;
    header
        .grid
        .validate()
        .map_err(|e| bad(path, e.to_string()))?;
    if header.axes != ["t", "z", "y", "x", "c"] || header.channels != ["u", "v"] {
        return Err(bad(path, "unsupported axis order or channels"));
    }
    if header.dtype != "f32le" {
        return Err(bad(path, format!("unsupported dtype {}", header.dtype)));
    }
    Ok((header, MAGIC.len() + 4 + n))
}

/// Reads the header only; the payload size is checked against the file length.
pub fn read_header(path: impl AsRef<Path>) -> Result<FldHeader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let total = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let (header, offset) = read_header_from(&mut BufReader::new(file), path)?;
    if total != offset + header.payload_len() {
        return Err(bad(
            path,
            format!(
                "payload is {} bytes, expected {}",
                total.saturating_sub(offset),
                header.payload_len()
            ),
        ));
    }
    Ok(header)
}

pub fn read(path: impl AsRef<Path>) -> Result<FieldSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (header, _) = read_header_from(&mut r, path)?;
    let mut payload = Vec::with_capacity(header.payload_len());
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != header.payload_len() {
        return Err(bad(
            path,
            format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                header.payload_len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mask = header.mask().map_err(|e| bad(path, e.to_string()))?;
    FieldSeries::new(header.grid, header.nt, data, mask).map_err(|e| bad(path, e.to_string()))
}
