//! Binary PGM (P5) read/write.
//!
//! Dataset images are 16-bit (maxval 65535, big-endian sample order);
//! exported attention maps are 8-bit. Writing is canonical
//! (`P5\n<w> <h>\n<maxval>\n`), reading accepts arbitrary whitespace and
//! `#` comments in the header.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{GsError, Result};

/// Quantize `pixels` (row-major [h,w], values in [0,1]) to 16-bit and write.
pub fn write_pgm16(path: &Path, pixels: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(pixels.len(), h * w);
    let mut buf = Vec::with_capacity(32 + 2 * pixels.len());
    write!(buf, "P5\n{w} {h}\n65535\n").expect("in-memory write");
    for &p in pixels {
        let v = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&v.to_be_bytes());
    }
    write_atomic(path, &buf)
}

/// Quantize to 8-bit and write.
pub fn write_pgm8(path: &Path, pixels: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(pixels.len(), h * w);
    let mut buf = Vec::with_capacity(32 + pixels.len());
    write!(buf, "P5\n{w} {h}\n255\n").expect("in-memory write");
    for &p in pixels {
        buf.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write_atomic(path, &buf)
}

/// Read a P5 file of either depth back to [0,1] floats. Returns (pixels, h, w).
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| GsError::io(path, e))?;
    let bad = |msg: &str| GsError::Input(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let n = w * h;
    let data = &bytes[pos..];
    let pixels = if maxval > 255 {
        if data.len() != 2 * n {
            return Err(bad("payload length mismatch (16-bit)"));
        }
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    } else {
        if data.len() != n {
            return Err(bad("payload length mismatch (8-bit)"));
        }
        data.iter().map(|&b| b as f64 / maxval as f64).collect()
    };
    Ok((pixels, h, w))
}

/// Write through a temp file in the same directory, then rename, so no
/// partial artifact survives a failure.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| GsError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes).map_err(|e| GsError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| GsError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_16bit_is_quantized_identity() {
        let dir = std::env::temp_dir().join("gsnet_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt16.pgm");
        let px = [0.0, 0.25, 0.5, 0.75, 1.0, 0.333];
        write_pgm16(&path, &px, 2, 3).unwrap();
        let (back, h, w) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (2, 3));
        for (a, b) in px.iter().zip(&back) {
            let q = (a * 65535.0).round() / 65535.0;
            assert!((q - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = std::env::temp_dir().join("gsnet_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\nab").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
