//! Binary PGM (P5) emission and a minimal reader.
//!
//! Header is exactly `P5\n<w> <h>\n255\n` followed by row-major bytes, so
//! artifacts are byte-for-byte reproducible.

use std::path::Path;

use ndarray::{Array4, Axis};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("malformed PGM: {0}")]
    Format(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// `round(v * 255)` clamped to `[0, 255]`.
pub fn quantize<R: Real>(v: R) -> u8 {
    let scaled = (v.as_f64() * 255.0).round();
    scaled.clamp(0.0, 255.0) as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), PgmError> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|source| PgmError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

/// Read a `P5` file with maxval 255. Accepts arbitrary whitespace and
/// `#` comments in the header.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), PgmError> {
    let bytes = std::fs::read(path).map_err(|source| PgmError::Io {
        context: format!("reading {}", path.display()),
        source,
    })?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::Format("not a P5 file".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
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
            return Err(PgmError::Format("missing header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits")
            .parse()
            .map_err(|e| PgmError::Format(format!("bad header number: {e}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PgmError::Format(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PgmError::Format("missing payload separator".into()));
    }
    pos += 1;
    let pixels = &bytes[pos..];
    if pixels.len() != width * height {
        return Err(PgmError::Format(format!(
            "payload has {} bytes, header declares {}",
            pixels.len(),
            width * height
        )));
    }
    Ok((width, height, pixels.to_vec()))
}

/// Tile a `(n, 1, h, w)` batch row-major into a grid with `cols` columns;
/// missing cells stay black.
pub fn tile_grid<R: Real>(images: &Array4<R>, cols: usize) -> (usize, usize, Vec<u8>) {
    let n = images.len_of(Axis(0));
    let h = images.len_of(Axis(2));
    let w = images.len_of(Axis(3));
    let rows = n.div_ceil(cols);
    let width = cols * w;
    let height = rows * h;
    let mut pixels = vec![0u8; width * height];
    for i in 0..n {
        let tile = images.index_axis(Axis(0), i);
        let (row, col) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                pixels[(row * h + y) * width + col * w + x] = quantize(tile[[0, y, x]]);
            }
        }
    }
    (width, height, pixels)
}

/// Square-ish grid layout for `n` tiles: `ceil(sqrt(n))` columns.
pub fn grid_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!(quantize(0.0f32), 0);
        assert_eq!(quantize(1.0f32), 255);
        assert_eq!(quantize(0.5f32), 128); // round(127.5) = 128
        assert_eq!(quantize(-0.2f32), 0);
        assert_eq!(quantize(1.7f32), 255);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let pixels: Vec<u8> = (0..12).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5\n4 3\n255\n"));
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
    }

    #[test]
    fn grid_is_row_major_with_black_padding() {
        let mut images = Array4::<f32>::zeros((3, 1, 2, 2));
        images.fill(1.0);
        let (w, h, pixels) = tile_grid(&images, 2);
        assert_eq!((w, h), (4, 4));
        // Fourth cell (bottom-right 2x2 block) is padding.
        assert_eq!(pixels[2 * 4 + 2], 0);
        assert_eq!(pixels[0], 255);
        assert_eq!(grid_cols(64), 8);
    }
}
