//! Raw field snapshots: one `.f64` file per field per step (little-endian
//! 64-bit floats, row-major) plus a text sidecar `.hdr` recording
//! `nx, ny, lx, ly, t` and the field name.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::grid::{Field, Grid};

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed sidecar {path}: {reason}")]
    BadSidecar { path: PathBuf, reason: String },
    #[error("snapshot {path} has {len} values, grid expects {expected}")]
    SizeMismatch {
        path: PathBuf,
        len: usize,
        expected: usize,
    },
}

fn io_err(path: &Path, source: io::Error) -> SnapshotError {
    SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `<dir>/<name>_<step:06>.f64` and the matching `.hdr` sidecar.
pub fn write_snapshot(
    dir: &Path,
    name: &str,
    step: usize,
    t: f64,
    field: &Field,
) -> Result<PathBuf, SnapshotError> {
    let base = dir.join(format!("{name}_{step:06}"));
    let raw_path = base.with_extension("f64");
    let mut bytes = Vec::with_capacity(field.len() * 8);
    for v in field.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| io_err(&raw_path, e))?;

    let hdr_path = base.with_extension("hdr");
    let g = field.grid();
    let mut hdr = fs::File::create(&hdr_path).map_err(|e| io_err(&hdr_path, e))?;
    write!(
        hdr,
        "nx {}\nny {}\nlx {}\nly {}\nt {}\nfield {}\n",
        g.nx(),
        g.ny(),
        g.lx(),
        g.ly(),
        t,
        name
    )
    .map_err(|e| io_err(&hdr_path, e))?;
    Ok(raw_path)
}

/// Read a snapshot pair back; `raw_path` points at the `.f64` file.
/// Returns the field and the time recorded in the sidecar.
pub fn read_snapshot(raw_path: &Path) -> Result<(Field, f64), SnapshotError> {
    let hdr_path = raw_path.with_extension("hdr");
    let text = fs::read_to_string(&hdr_path).map_err(|e| io_err(&hdr_path, e))?;
    let mut nx = None;
    let mut ny = None;
    let mut lx = None;
    let mut ly = None;
    let mut t = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("nx"), Some(v)) => nx = v.parse::<usize>().ok(),
            (Some("ny"), Some(v)) => ny = v.parse::<usize>().ok(),
            (Some("lx"), Some(v)) => lx = v.parse::<f64>().ok(),
            (Some("ly"), Some(v)) => ly = v.parse::<f64>().ok(),
            (Some("t"), Some(v)) => t = v.parse::<f64>().ok(),
            _ => {}
        }
    }
    let (nx, ny, lx, ly, t) = match (nx, ny, lx, ly, t) {
        (Some(a), Some(b), Some(c), Some(d), Some(e)) => (a, b, c, d, e),
        _ => {
            return Err(SnapshotError::BadSidecar {
                path: hdr_path,
                reason: "missing nx/ny/lx/ly/t entries".into(),
            })
        }
    };
    let grid = Grid::new(nx, ny, lx, ly).map_err(|e| SnapshotError::BadSidecar {
        path: hdr_path.clone(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(raw_path).map_err(|e| io_err(raw_path, e))?;
    if bytes.len() != grid.len() * 8 {
        return Err(SnapshotError::SizeMismatch {
            path: raw_path.to_path_buf(),
            len: bytes.len() / 8,
            expected: grid.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let field = Field::from_values(grid, values).expect("length checked");
    Ok((field, t))
}
