//! Grid and group file formats.
//!
//! A grid is stored as a pair of files:
//!
//! * the payload at `path`: `height * width` IEEE-754 `f32` values,
//!   little-endian, row-major (row = time sample);
//! * a JSON sidecar at `path` + `.json` with keys `height`, `width`,
//!   `dtype` (`"f32"`), `order` (`"row-major"`), `byte_order` (`"little"`)
//!   and optional `dt`, `dx`.
//!
//! A group manifest is JSON of the form `{"slices": ["a.bin", "b.bin"]}`,
//! paths relative to the manifest's directory.
//!
//! Concurrent writes to the same path are not supported.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Gather;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub order: String,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub slices: Vec<PathBuf>,
}

/// Sidecar path of the grid whose payload lives at `path`.
pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// True when `path` has a grid sidecar next to it.
pub fn is_grid(path: &Path) -> bool {
    header_path(path).is_file()
}

pub fn encode_payload(g: &Gather<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(4 * g.height() * g.width());
    for v in g.data().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn write_grid(g: &Gather<f32>, path: &Path) -> Result<()> {
    let header = GridHeader {
        height: g.height(),
        width: g.width(),
        dtype: "f32".into(),
        order: "row-major".into(),
        byte_order: "little".into(),
        dt: g.dt,
        dx: g.dx,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(path, encode_payload(g)).map_err(|e| Error::io(path, e))?;
    let hpath = header_path(path);
    fs::write(&hpath, text + "\n").map_err(|e| Error::io(hpath, e))
}

pub fn read_header(path: &Path) -> Result<GridHeader> {
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: GridHeader = serde_json::from_str(&text).map_err(|e| Error::BadHeader {
        path: hpath.clone(),
        message: e.to_string(),
    })?;
    if header.dtype != "f32" {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.order != "row-major" || header.byte_order != "little" {
        return Err(Error::BadHeader {
            path: hpath,
            message: format!("unsupported layout {}/{}", header.order, header.byte_order),
        });
    }
    Ok(header)
}

pub fn read_grid(path: &Path) -> Result<Gather<f32>> {
    let header = read_header(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 4 * (header.height as u64) * (header.width as u64);
    if bytes.len() as u64 != expected {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((header.height, header.width), values).expect("length checked");
    Ok(Gather::new(data)?.with_sampling(header.dt, header.dx))
}

pub fn write_manifest(manifest: &GroupManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<GroupManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::BadHeader {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Slice paths of a manifest, resolved against its directory.
pub fn manifest_slices(path: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    Ok(manifest.slices.iter().map(|p| base.join(p)).collect())
}

/// Reads every slice of a group, in manifest order.
pub fn read_group(manifest: &Path) -> Result<Vec<Gather<f32>>> {
    let paths = manifest_slices(manifest)?;
    if paths.is_empty() {
        return Err(Error::io(
            manifest,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "manifest lists no slices"),
        ));
    }
    let mut slices = Vec::with_capacity(paths.len());
    for p in &paths {
        let g = read_grid(p)?;
        if let Some(first) = slices.first() {
            g.check_shape(Gather::shape(first))?;
        }
        slices.push(g);
    }
    Ok(slices)
}

/// Reads a small comma-separated grid (one row per line, `#` comments).
pub fn read_csv_grid(path: &Path) -> Result<Gather<f32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_grid(&text)
}

pub fn parse_csv_grid(text: &str) -> Result<Gather<f32>> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::BadSpec(format!("line {}: {e}", n + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::shape((rows.len(), first.len()), (rows.len(), row.len())));
            }
        }
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    let height = rows.len();
    Gather::from_vec(height, width, rows.into_iter().flatten().collect())
}
