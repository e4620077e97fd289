//! The CGF1 binary grid format and CSV ingestion for small grids.
//!
//! Layout, all little-endian:
//!
//! | bytes          | content                              |
//! |----------------|--------------------------------------|
//! | 8              | magic `CGRIDv1\0`                    |
//! | 4              | `u32` height                         |
//! | 4              | `u32` width                          |
//! | 1              | `u8` mask-present flag (0 or 1)      |
//! | 8·h·w          | `f64` values, row-major              |
//! | h·w (if flag)  | `u8` mask, 1 = valid                 |
//!
//! Several grids written back to back form a grid stream; ensembles are
//! stored that way, one member per block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CoarseField, GridField};

pub const MAGIC: &[u8; 8] = b"CGRIDv1\0";

pub fn write_grid<W: Write>(w: &mut W, g: &GridField) -> Result<()> {
    write_raw(w, g.height(), g.width(), g.values(), g.mask())
}

fn write_raw<W: Write>(
    w: &mut W,
    height: usize,
    width: usize,
    values: &[f64],
    mask: Option<&[bool]>,
) -> Result<()> {
    let to_u32 = |x: usize| {
        u32::try_from(x).map_err(|_| Error::Format(format!("dimension {x} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(17 + values.len() * 9);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&to_u32(height)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(width)?.to_le_bytes());
    buf.push(mask.is_some() as u8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = mask {
        buf.extend(m.iter().map(|&b| b as u8));
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("<stream>", e))
}

/// Reads one grid. Returns `Ok(None)` on a clean end of stream.
pub fn read_grid<R: Read>(r: &mut R) -> Result<Option<GridField>> {
    let mut magic = [0u8; 8];
    match read_exact_or_eof(r, &mut magic)? {
        false => return Ok(None),
        true if &magic != MAGIC => {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        true => {}
    }
    let mut head = [0u8; 9];
    read_exact(r, &mut head)?;
    let height = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let has_mask = match head[8] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("mask flag {f} is neither 0 nor 1"))),
    };
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Error::Format("grid too large".into()))?;
    let mut raw = vec![0u8; n * 8];
    read_exact(r, &mut raw)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = GridField::new(height, width, values)
        .map_err(|e| Error::Format(e.to_string()))?;
    if has_mask {
        let mut m = vec![0u8; n];
        read_exact(r, &mut m)?;
        let mask = m
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                b => Err(Error::Format(format!("mask byte {b} is neither 0 nor 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(grid.with_mask(mask)?))
    } else {
        Ok(Some(grid))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated grid: {e}")))
}

/// Fills `buf`, or returns `false` if the stream ended before the first byte.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("truncated grid header".into())),
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<stream>", e)),
        }
    }
    Ok(true)
}

pub fn save(path: &Path, g: &GridField) -> Result<()> {
    save_all(path, std::slice::from_ref(g))
}

/// Writes `grids` back to back into one file.
pub fn save_all(path: &Path, grids: &[GridField]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for g in grids {
        write_grid(&mut w, g).map_err(|e| relabel(e, path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file holding exactly one grid.
pub fn load(path: &Path) -> Result<GridField> {
    let mut grids = load_all(path)?;
    match grids.len() {
        1 => Ok(grids.pop().unwrap()),
        n => Err(Error::Format(format!(
            "{}: expected one grid, found {n}",
            path.display()
        ))),
    }
}

pub fn load_all(path: &Path) -> Result<Vec<GridField>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut out = Vec::new();
    while let Some(g) = read_grid(&mut r).map_err(|e| relabel(e, path))? {
        out.push(g);
    }
    Ok(out)
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Coarse fields are stored as unmasked CGF1 grids.
pub fn save_coarse(path: &Path, c: &CoarseField) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_raw(&mut w, c.height(), c.width(), c.values(), None).map_err(|e| relabel(e, path))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_coarse(path: &Path) -> Result<CoarseField> {
    let g = load(path)?;
    let (h, w) = g.dims();
    CoarseField::new(h, w, g.into_values())
}

/// Parses a `row,col,value[,mask]` CSV. Every cell must appear exactly once.
///
/// Mask entries accept `1`/`0`/`true`/`false`. Without a mask column the
/// grid carries no mask.
pub fn read_csv<R: Read>(r: R) -> Result<GridField> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_mask = match names.as_slice() {
        ["row", "col", "value"] => false,
        ["row", "col", "value", "mask"] => true,
        other => {
            return Err(Error::Format(format!(
                "expected header row,col,value[,mask], got {}",
                other.join(",")
            )))
        }
    };

    let mut cells: Vec<(usize, usize, f64, bool)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("csv row {}: bad {what}", line + 1));
        let row: usize = rec[0].parse().map_err(|_| bad("row"))?;
        let col: usize = rec[1].parse().map_err(|_| bad("col"))?;
        let value: f64 = rec[2].parse().map_err(|_| bad("value"))?;
        let valid = if has_mask {
            match &rec[3] {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad("mask")),
            }
        } else {
            true
        };
        cells.push((row, col, value, valid));
    }
    if cells.is_empty() {
        return Err(Error::Format("csv grid has no cells".into()));
    }
    let height = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let width = cells.iter().map(|c| c.1).max().unwrap() + 1;
    let mut values = vec![f64::NAN; height * width];
    let mut seen = vec![false; height * width];
    let mut mask = vec![true; height * width];
    for (row, col, value, valid) in cells {
        let i = row * width + col;
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Format(format!("csv cell ({row},{col}) repeated")));
        }
        values[i] = value;
        mask[i] = valid;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!(
            "csv cell ({},{}) missing",
            i / width,
            i % width
        )));
    }
    let g = GridField::new(height, width, values)?;
    if has_mask {
        g.with_mask(mask)
    } else {
        Ok(g)
    }
}

pub fn write_csv<W: Write>(w: W, g: &GridField) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if g.mask().is_some() {
        wtr.write_record(["row", "col", "value", "mask"])?;
    } else {
        wtr.write_record(["row", "col", "value"])?;
    }
    for i in 0..g.len() {
        let (row, col) = (i / g.width(), i % g.width());
        let mut rec = vec![row.to_string(), col.to_string(), g.values()[i].to_string()];
        if let Some(m) = g.mask() {
            rec.push(if m[i] { "1" } else { "0" }.to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))
}
