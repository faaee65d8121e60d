//! Image files.
//!
//! Raw format: `<stem>.f64` holds little-endian `f64` values in row-major
//! order and `<stem>.hdr` holds a single line `height=<int> width=<int>`.
//! PGM is for viewing only; values are linearly rescaled to the gray range.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Image;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn raw_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f64"), stem.with_extension("hdr"))
}

/// Writes `img` to `<stem>.f64` and `<stem>.hdr`.
pub fn write_raw(stem: &Path, img: &Image) -> Result<()> {
    let (data_path, hdr_path) = raw_paths(stem);
    let mut bytes = Vec::with_capacity(img.len() * 8);
    for v in img.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_path, bytes)?;
    fs::write(
        &hdr_path,
        format!("height={} width={}\n", img.height(), img.width()),
    )?;
    Ok(())
}

pub fn read_raw(stem: &Path) -> Result<Image> {
    let (data_path, hdr_path) = raw_paths(stem);
    let header = fs::read_to_string(&hdr_path)?;
    let mut height = None;
    let mut width = None;
    for tok in header.split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| format_err(&hdr_path, format!("expected key=value, got {tok:?}")))?;
        let n: usize = value
            .parse()
            .map_err(|_| format_err(&hdr_path, format!("{key} is not an integer: {value:?}")))?;
        match key {
            "height" => height = Some(n),
            "width" => width = Some(n),
            other => return Err(format_err(&hdr_path, format!("unknown key {other:?}"))),
        }
    }
    let height = height.ok_or_else(|| format_err(&hdr_path, "missing height"))?;
    let width = width.ok_or_else(|| format_err(&hdr_path, "missing width"))?;
    let bytes = fs::read(&data_path)?;
    if bytes.len() != height * width * 8 {
        return Err(format_err(
            &data_path,
            format!("{} bytes for a {height}x{width} grid", bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Image::new(height, width, values).map_err(|e| format_err(&data_path, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmEncoding {
    /// ASCII `P2`.
    Plain,
    /// Binary `P5`.
    Binary,
}

/// Writes a PGM with gray levels `0..=maxval` spanning `[min, max]` of the image.
pub fn write_pgm(path: &Path, img: &Image, maxval: u16, encoding: PgmEncoding) -> Result<()> {
    if maxval == 0 {
        return Err(Error::InvalidParameter("PGM maxval must be positive".into()));
    }
    let (lo, hi) = (img.min(), img.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let levels: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|v| (((v - lo) / span) * maxval as f64).round().clamp(0.0, maxval as f64) as u16)
        .collect();
    let magic = match encoding {
        PgmEncoding::Plain => "P2",
        PgmEncoding::Binary => "P5",
    };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    match encoding {
        PgmEncoding::Plain => {
            for row in levels.chunks(img.width()) {
                let line: Vec<String> = row.iter().map(u16::to_string).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
        PgmEncoding::Binary => {
            for v in levels {
                if maxval < 256 {
                    out.push(v as u8);
                } else {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a P2 or P5 PGM (8- or 16-bit) as raw gray levels.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(&bytes)?;
    let parse = |s: String, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| format_err(path, format!("bad {what}: {s:?}")))
    };
    let width = parse(next_token(&bytes)?, "width")?;
    let height = parse(next_token(&bytes)?, "height")?;
    let maxval = parse(next_token(&bytes)?, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("maxval {maxval} out of range")));
    }
    let n = width * height;
    let values: Vec<f64> = match magic.as_str() {
        "P2" => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(parse(next_token(&bytes)?, "sample")? as f64);
            }
            v
        }
        "P5" => {
            let data = &bytes[pos + 1..];
            let wide = maxval > 255;
            let need = if wide { 2 * n } else { n };
            if data.len() < need {
                return Err(format_err(path, "truncated raster"));
            }
            if wide {
                data.chunks_exact(2)
                    .take(n)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                    .collect()
            } else {
                data[..n].iter().map(|&b| b as f64).collect()
            }
        }
        other => return Err(format_err(path, format!("unsupported magic {other:?}"))),
    };
    Image::new(height, width, values).map_err(|e| format_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 5, |r, c| (r as f64 + 0.1) * (c as f64 - 2.3) / 7.0);
        let stem = dir.path().join("x");
        write_raw(&stem, &img).unwrap();
        let hdr = fs::read_to_string(dir.path().join("x.hdr")).unwrap();
        assert_eq!(hdr.trim(), "height=3 width=5");
        assert_eq!(read_raw(&stem).unwrap(), img);
    }

    #[test]
    fn raw_rejects_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        fs::write(stem.with_extension("hdr"), "height=2 width=2").unwrap();
        fs::write(stem.with_extension("f64"), [0u8; 24]).unwrap();
        assert!(matches!(read_raw(&stem), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_round_trip_levels() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 3, |r, c| (r * 3 + c) as f64);
        for (enc, maxval) in [
            (PgmEncoding::Plain, 11),
            (PgmEncoding::Binary, 11),
            (PgmEncoding::Binary, 65535),
        ] {
            let p = dir.path().join("a.pgm");
            write_pgm(&p, &img, maxval, enc).unwrap();
            let back = read_pgm(&p).unwrap();
            let expect = img.scaled(maxval as f64 / 11.0).map(f64::round);
            assert_eq!(back, expect, "{enc:?} {maxval}");
        }
    }
}
