//! Output artifacts: CSV tables, 8-bit PGM slices and the provenance record.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// A rectangular table written as CSV. Floats use Rust's shortest round-trip form so the
/// text is identical across runs and platforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Shape(format!(
                "row has {} cells for {} columns",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            let quoted: Vec<String> = cells.iter().map(|c| quote(c)).collect();
            s.push_str(&quoted.join(","));
            s.push('\n');
        };
        line(&mut s, &self.header);
        for r in &self.rows {
            line(&mut s, r);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn quote(c: &str) -> String {
    if c.contains([',', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

/// Cell text for a float.
pub fn num(v: f64) -> String {
    format!("{v}")
}

// ----------------------------------------------------------------------------
// PGM

/// Binary 8-bit PGM with values min–max scaled to 0..=255; non-finite values map to 0
/// and a constant image is all 0.
pub fn encode_pgm(rows: usize, cols: usize, values: &[f64]) -> Result<Vec<u8>> {
    if rows * cols != values.len() || values.is_empty() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} image from {} values",
            values.len()
        )));
    }
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if !v.is_finite() || hi <= lo {
            0
        } else {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        }
    }));
    Ok(out)
}

/// Write a map as grayscale slices. Rank 1 gives one single-row image, rank 2 one
/// image with dims[0] rows, rank 3 one image per index of the first axis. Returns the
/// written paths.
pub fn write_slices(dir: impl AsRef<Path>, stem: &str, grid: &VoxelGrid, values: &[f64]) -> Result<Vec<PathBuf>> {
    if values.len() != grid.len() {
        return Err(Error::Shape("map length differs from the grid".into()));
    }
    let dir = dir.as_ref();
    let d = grid.dims();
    let mut written = Vec::new();
    let mut emit = |name: String, rows: usize, cols: usize, v: &[f64]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, encode_pgm(rows, cols, v)?).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    match grid.rank() {
        1 => emit(format!("{stem}.pgm"), 1, d[0], values)?,
        2 => emit(format!("{stem}.pgm"), d[0], d[1], values)?,
        _ => {
            let plane = d[1] * d[2];
            for z in 0..d[0] {
                emit(
                    format!("{stem}_s{z:03}.pgm"),
                    d[1],
                    d[2],
                    &values[z * plane..(z + 1) * plane],
                )?;
            }
        }
    }
    Ok(written)
}

// ----------------------------------------------------------------------------
// provenance

/// Everything needed to rerun a command: argv, seed, mode and the resolved settings.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub mode: Option<String>,
    pub threads: usize,
    pub config: serde_json::Value,
    pub version: String,
    pub outputs: Vec<String>,
}

impl Provenance {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let p = dir.as_ref().join("provenance.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Serialize to pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, v: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `key: value` summary lines, one per pair.
pub fn summary_text(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}: {v}");
    }
    s
}
