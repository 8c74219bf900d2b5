//! 8-bit binary portable pixmap (P6) reading and writing. Images travel as
//! `[3,H,W]` tensors with values in [0, 1].

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "write_ppm expects [3,H,W], got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let data = image.data();
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    bytes.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    fn header_field(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
        // skip whitespace and # comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(path, format!("bad or missing {}", what)))
    }

    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::data(path, "not a binary PPM (expected P6)"));
    }
    let mut pos = 2usize;
    let w = header_field(&bytes, &mut pos, path, "width")?;
    let h = header_field(&bytes, &mut pos, path, "height")?;
    let maxval = header_field(&bytes, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(Error::data(path, format!("unsupported maxval {}", maxval)));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + 3 * h * w {
        return Err(Error::data(path, "pixel data truncated"));
    }
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = bytes[pos + 3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(data, &[3, h, w], false)
}

/// Rec. 601 luma of a `[3,H,W]` image as `[1,H,W]`.
pub fn to_gray(image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "to_gray expects [3,H,W], got {:?}",
            shape
        )));
    }
    let plane = shape[1] * shape[2];
    let data = image.data();
    let gray: Vec<f64> = (0..plane)
        .map(|p| 0.299 * data[p] + 0.587 * data[plane + p] + 0.114 * data[2 * plane + p])
        .collect();
    Tensor::from_vec(gray, &[1, shape[1], shape[2]], false)
}
