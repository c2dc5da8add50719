//! Portable graymap (PGM) reading and writing.
//!
//! Reads binary `P5` and ASCII `P2`, with `#` comments in the header and any
//! maxval up to 65535. Writes 8-bit `P5`.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("malformed PGM at byte {offset}: {message}")]
pub struct PgmError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T, PgmError> {
    Err(PgmError {
        offset,
        message: message.into(),
    })
}

/// A decoded grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each at most `maxval`.
    pub pixels: Vec<u16>,
}

impl GrayImage {
    /// Quantizes a `[1, H, W]` or `[H, W]` tensor in `[0, 1]` to 8 bits with
    /// `round(v * 255)`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (height, width) = match t.shape() {
            [.., h, w] => (*h, *w),
            _ => (1, t.len()),
        };
        Self {
            width,
            height,
            maxval: 255,
            pixels: t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect(),
        }
    }

    /// `[1, H, W]` tensor with values `v / maxval`.
    pub fn to_tensor(&self) -> Tensor {
        let scale = self.maxval as f32;
        Tensor::new(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| p as f32 / scale).collect(),
        )
        .expect("pixel count matches dimensions")
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PgmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return fail(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fail(start, format!("{what} out of range")), Ok)
    }
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return fail(0, "missing P5/P2 magic"),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return fail(maxval_at, "zero image dimension");
    }
    if !(1..=65535).contains(&maxval) {
        return fail(maxval_at, format!("maxval {maxval} outside 1..=65535"));
    }
    let count = width * height;
    let mut pixels = Vec::with_capacity(count);
    if binary {
        if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
            return fail(cur.pos, "expected single whitespace before raster");
        }
        cur.pos += 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raster = &bytes[cur.pos..];
        if raster.len() < need {
            return fail(bytes.len(), format!("raster truncated: need {need} bytes, found {}", raster.len()));
        }
        if wide {
            pixels.extend(raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])));
        } else {
            pixels.extend(raster[..need].iter().map(|&b| b as u16));
        }
        if let Some(i) = pixels.iter().position(|&p| p as usize > maxval) {
            return fail(cur.pos + i * if wide { 2 } else { 1 }, "sample exceeds maxval");
        }
    } else {
        for _ in 0..count {
            cur.skip_space();
            let at = cur.pos;
            let v = cur.number("sample")?;
            if v > maxval {
                return fail(at, "sample exceeds maxval");
            }
            pixels.push(v as u16);
        }
    }
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

/// Binary `P5` encoding; 16-bit big-endian samples when maxval exceeds 255.
pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        out.extend(img.pixels.iter().flat_map(|p| p.to_be_bytes()));
    } else {
        out.extend(img.pixels.iter().map(|&p| p as u8));
    }
    out
}

pub fn read(path: &Path) -> Result<GrayImage, super::DataError> {
    let bytes = fs::read(path).map_err(|e| super::DataError::io(path, e))?;
    decode(&bytes).map_err(|source| super::DataError::Pgm {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &Path, img: &GrayImage) -> Result<(), super::DataError> {
    fs::write(path, encode(img)).map_err(|e| super::DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_header_comments_and_ascii() {
        let img = decode(b"P2 # c\n3 1\n# max\n10\n0 5 10\n").unwrap();
        assert_eq!((img.width, img.height, img.maxval), (3, 1, 10));
        assert_eq!(img.pixels, vec![0, 5, 10]);
    }

    #[test]
    fn round_trips_binary() {
        let img = GrayImage {
            width: 2,
            height: 2,
            maxval: 255,
            pixels: vec![0, 17, 128, 255],
        };
        assert_eq!(decode(&encode(&img)).unwrap(), img);
        let wide = GrayImage {
            maxval: 1000,
            pixels: vec![0, 999, 1000, 3],
            ..img
        };
        assert_eq!(decode(&encode(&wide)).unwrap(), wide);
    }

    #[test]
    fn reports_offsets() {
        assert_eq!(decode(b"P6\n").unwrap_err().offset, 0);
        let e = decode(b"P5\n4 4\n255\n\x01\x02").unwrap_err();
        assert_eq!(e.offset, 13);
        assert!(e.message.contains("truncated"));
        assert_eq!(decode(b"P5 x").unwrap_err().offset, 3);
        assert_eq!(decode(b"P2 1 1 3 7").unwrap_err().offset, 9);
    }

    #[test]
    fn quantization_is_a_fixed_point() {
        let t = Tensor::from_fn(vec![1, 2, 3], |i| i as f32 * 0.25);
        let once = GrayImage::from_tensor(&t).to_tensor();
        let twice = GrayImage::from_tensor(&once).to_tensor();
        assert_eq!(once, twice);
        assert_eq!(once.data()[0], 0.0);
        assert_eq!(once.data()[5], 1.0);
    }
}
