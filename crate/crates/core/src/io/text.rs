//! Binary PGM (P5) images, CSV fields and fixation lists.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::saliency::Field;

/// Encodes a field as an 8-bit P5 image after an affine rescale of its
/// range to `[0, 255]`. A constant field maps to all zeros.
pub fn pgm_bytes(field: &Field) -> Vec<u8> {
    let (lo, hi) = field.range();
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", field.width, field.height).into_bytes();
    out.extend(field.values.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, field: &Field) -> Result<()> {
    fs::write(path, pgm_bytes(field))?;
    Ok(())
}

/// Decodes a P5 image with `maxval <= 255`; values are scaled to `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Field> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed("truncated PGM header".into()));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P5" {
        return Err(Error::BadMagic {
            expected: "P5".into(),
            found: header[0].clone(),
        });
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("bad PGM header field `{s}`")))
    };
    let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Unsupported(format!("PGM maxval {maxval}; only 8-bit images are read")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != width * height {
        return Err(Error::Malformed(format!(
            "PGM raster has {} bytes, expected {}",
            data.len(),
            width * height
        )));
    }
    Ok(Field {
        height,
        width,
        values: data.iter().map(|&b| b as f64 / maxval as f64).collect(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Field> {
    parse_pgm(&fs::read(path)?)
}

/// Row-major CSV, one image row per line, values in shortest round-trip
/// form.
pub fn field_csv(field: &Field) -> String {
    let mut s = String::new();
    for row in field.values.chunks(field.width.max(1)) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn write_field_csv(path: &Path, field: &Field) -> Result<()> {
    fs::write(path, field_csv(field))?;
    Ok(())
}

/// `row,col` pairs, one per line. Blank lines, `#` comments and a leading
/// `row,col` header are ignored.
pub fn parse_fixations(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (out.is_empty() && line.eq_ignore_ascii_case("row,col")) {
            continue;
        }
        let bad = || Error::Config {
            line: i + 1,
            message: format!("expected `row,col`, got `{line}`"),
        };
        let (r, c) = line.split_once(',').ok_or_else(bad)?;
        out.push((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?));
    }
    Ok(out)
}

pub fn read_fixations_csv(path: &Path) -> Result<Vec<(usize, usize)>> {
    parse_fixations(&fs::read_to_string(path)?)
}
