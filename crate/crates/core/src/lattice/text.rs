//! Plain-text formats for lattice fields.
//!
//! Label maps and masks: a header line `rows cols K`, then `rows` lines of
//! `cols` space-separated integers (masks use `K = 2`). Real-valued grids
//! (`.probmap`, `.smap`) carry no header: one line per lattice row.

use std::fs;
use std::path::Path;

use super::{BinaryMask, LabelMap, LatticeDims};
use crate::error::{Error, Result};

pub fn label_map_to_string(map: &LabelMap) -> String {
    let d = map.dims();
    let mut out = format!("{} {} {}\n", d.rows, d.cols, map.k());
    for row in map.values().chunks(d.cols) {
        push_row(&mut out, row.iter().map(|v| v.to_string()));
    }
    out
}

pub fn mask_to_string(mask: &BinaryMask) -> String {
    label_map_to_string(&mask.to_label_map())
}

fn push_row(out: &mut String, cells: impl Iterator<Item = String>) {
    let mut first = true;
    for c in cells {
        if !first {
            out.push(' ');
        }
        out.push_str(&c);
        first = false;
    }
    out.push('\n');
}

pub fn parse_label_map(text: &str, context: &str) -> Result<LabelMap> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(context, "empty file"))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(context, format!("bad header {header:?}: {e}")))?;
    let [rows, cols, k] = head[..] else {
        return Err(Error::parse(context, "header must be `rows cols K`"));
    };
    let dims = LatticeDims::new(rows, cols)?;
    let mut values = Vec::with_capacity(dims.len());
    for (i, line) in lines.enumerate() {
        let before = values.len();
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<usize>()
                .map_err(|e| Error::parse(context, format!("line {}: {e}", i + 2)))?;
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(Error::parse(
                context,
                format!("line {}: expected {cols} values", i + 2),
            ));
        }
    }
    if values.len() != dims.len() {
        return Err(Error::parse(
            context,
            format!("expected {rows} rows, got {}", values.len() / cols),
        ));
    }
    LabelMap::new(dims, k, values)
}

pub fn parse_mask(text: &str, context: &str) -> Result<BinaryMask> {
    let map = parse_label_map(text, context)?;
    if map.k() != 2 {
        return Err(Error::parse(context, format!("mask header has K = {}", map.k())));
    }
    map.to_mask()
}

/// Real grid with fixed 6-decimal formatting.
pub fn real_grid_to_string(values: &[f64], dims: LatticeDims) -> String {
    let mut out = String::new();
    for row in values.chunks(dims.cols) {
        push_row(&mut out, row.iter().map(|v| format!("{v:.6}")));
    }
    out
}

pub fn parse_real_grid(text: &str, context: &str) -> Result<(LatticeDims, Vec<f64>)> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(context, format!("line {}: {e}", i + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::parse(context, format!("line {}: ragged row", i + 1)))
            }
            _ => {}
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::parse(context, format!("non-finite value {v}")));
        }
        values.extend(row);
        rows += 1;
    }
    let dims = LatticeDims::new(rows, cols.unwrap_or(0))?;
    Ok((dims, values))
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_map(&text, &path.display().to_string())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mask(&text, &path.display().to_string())
}

pub fn read_real_grid(path: &Path) -> Result<(LatticeDims, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_real_grid(&text, &path.display().to_string())
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    fs::write(path, label_map_to_string(map)).map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    fs::write(path, mask_to_string(mask)).map_err(|e| Error::io(path, e))
}

pub fn write_real_grid(path: &Path, values: &[f64], dims: LatticeDims) -> Result<()> {
    fs::write(path, real_grid_to_string(values, dims)).map_err(|e| Error::io(path, e))
}
