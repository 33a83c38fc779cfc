//! Binary 8-bit PPM (P6) and PGM (P5).

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(grid: &Grid, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.as_slice().iter().map(|&v| quantize(v)));
    out
}

/// Writes a 3-channel grid as P6 or a 1-channel grid as P5.
pub fn write_pnm(path: &Path, grid: &Grid) -> Result<()> {
    let magic = match grid.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("cannot store {c} channels"),
            })
        }
    };
    std::fs::write(path, encode(grid, magic)).map_err(|e| Error::io(path, e))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => return Err(format!("bad magic number {:?}", String::from_utf8_lossy(m))),
        None => return Err("file too short for a header".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("header number out of range at byte {start}"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos + 1,
    })
}

/// Reads P5 or P6 into values `byte / 255`.
pub fn read_pnm(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let h = parse_header(&bytes).map_err(bad)?;
    let expected = h.width * h.height * h.channels;
    let data = &bytes[h.data_start..];
    if data.len() != expected {
        return Err(bad(format!(
            "expected {expected} data bytes for {}x{}x{}, found {}",
            h.height,
            h.width,
            h.channels,
            data.len()
        )));
    }
    Grid::new(h.height, h.width, h.channels, data.iter().map(|&b| b as f64 / 255.0).collect())
}
