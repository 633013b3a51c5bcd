//! 8-bit binary PGM (`P5`) export.

use std::path::Path;

use crate::error::{CliError, CliResult};

/// Min-max normalizes `values` to `0..=255`; a constant map becomes 128.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn encode(width: usize, height: usize, values: &[f64]) -> CliResult<Vec<u8>> {
    if width * height != values.len() {
        return Err(CliError::usage(format!(
            "{width}x{height} image needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(to_gray(values));
    Ok(out)
}

pub fn write(path: &Path, width: usize, height: usize, values: &[f64]) -> CliResult<()> {
    let bytes = encode(width, height, values)?;
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Parses a `P5` image with maxval 255 into `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> CliResult<(usize, usize, Vec<u8>)> {
    let bad = || CliError::runtime("malformed PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?;
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_full_range() {
        let g = to_gray(&[-1.0, 0.0, 3.0]);
        assert_eq!(g, vec![0, 64, 255]);
        assert_eq!(to_gray(&[0.2; 5]), vec![128; 5]);
    }

    #[test]
    fn round_trip() {
        let bytes = encode(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, px) = decode(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 51, 102, 153, 204, 255]);
    }
}
