//! Minimal image buffer plus portable-pixmap I/O.
//!
//! Images are row-major H×W×C in linear intensity, f64 in [0, 1] unless a
//! caller says otherwise (log images reuse the same container).

use crate::error::{E4dgsError, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Collapse to one channel with the fixed luma weights (identity on
    /// already-grayscale images).
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        assert_eq!(self.channels, 3, "grayscale conversion expects 1 or 3 channels");
        let mut out = Image::zeros(self.width, self.height, 1);
        for i in 0..self.width * self.height {
            let r = self.data[i * 3];
            let g = self.data[i * 3 + 1];
            let b = self.data[i * 3 + 2];
            out.data[i] = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b;
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Writes P5 (1 channel) or P6 (3 channels), 8-bit or 16-bit big-endian
/// samples per the netpbm convention.
pub fn write_pnm(path: &Path, img: &Image, bit_depth: u8) -> Result<()> {
    let (magic, maxval): (&str, u32) = match (img.channels, bit_depth) {
        (1, 8) => ("P5", 255),
        (1, 16) => ("P5", 65535),
        (3, 8) => ("P6", 255),
        (3, 16) => ("P6", 65535),
        _ => {
            return Err(E4dgsError::InvalidArgument(format!(
                "unsupported pnm layout: {} channels, {} bits",
                img.channels, bit_depth
            )))
        }
    };
    let mut buf = format!("{magic}\n{} {}\n{maxval}\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if bit_depth == 8 {
            buf.push(q as u8);
        } else {
            buf.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| E4dgsError::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| E4dgsError::io(path, e))?;
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(E4dgsError::parse(path, "truncated pnm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(E4dgsError::parse(path, format!("bad pnm magic {other:?}"))),
    };
    let width: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| E4dgsError::parse(path, "bad width"))?;
    let height: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| E4dgsError::parse(path, "bad height"))?;
    let maxval: u32 = next_token(&bytes)?
        .parse()
        .map_err(|_| E4dgsError::parse(path, "bad maxval"))?;
    pos += 1; // single whitespace after maxval

    let n = width * height * channels;
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    if bytes.len() - pos < n * bytes_per_sample {
        return Err(E4dgsError::parse(
            path,
            format!(
                "expected {} sample bytes, found {}",
                n * bytes_per_sample,
                bytes.len() - pos
            ),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let q = if bytes_per_sample == 1 {
            bytes[pos + i] as u32
        } else {
            u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]) as u32
        };
        data.push(q as f64 / maxval as f64);
    }
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

/// Raw dump for metric computation: "E4DGS-F32" header, little-endian shape,
/// then f32 samples.
pub fn write_raw_f32(path: &Path, img: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| E4dgsError::io(path, e))?;
    let mut write = |buf: &[u8]| f.write_all(buf).map_err(|e| E4dgsError::io(path, e));
    write(b"E4DGS-F32")?;
    write(&(img.width as u32).to_le_bytes())?;
    write(&(img.height as u32).to_le_bytes())?;
    write(&(img.channels as u32).to_le_bytes())?;
    for &v in &img.data {
        write(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(5, 4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.017) % 1.0;
        }
        for (bits, tol) in [(8u8, 1.0 / 255.0), (16u8, 1.0 / 65535.0)] {
            let path = dir.path().join(format!("t{bits}.ppm"));
            write_pnm(&path, &img, bits).unwrap();
            let back = read_pnm(&path).unwrap();
            assert_eq!(back.width, 5);
            assert_eq!(back.channels, 3);
            for (a, b) in img.data.iter().zip(&back.data) {
                assert!((a - b).abs() <= tol * 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn grayscale_uses_luma_weights() {
        let mut img = Image::zeros(1, 1, 3);
        img.data = vec![1.0, 0.5, 0.25];
        let g = img.to_grayscale();
        assert!((g.data[0] - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn truncated_pnm_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        let err = read_pnm(&path).unwrap_err();
        assert!(err.to_string().contains("expected 16 sample bytes"));
    }
}
