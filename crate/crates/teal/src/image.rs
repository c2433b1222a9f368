//! Grayscale image grid with values in [0, 1], plus binary PGM (P5) I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale raster. Pixels live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::Dim {
                op: "image",
                msg: format!("{}x{} needs {} pixels, got {}", h, w, h * w, pixels.len()),
            });
        }
        Ok(ImageGrid { h, w, pixels })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ImageGrid { h, w, pixels: vec![0.0; h * w] }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.pixels[r * self.w + c] = v;
    }

    /// Nested-row representation used by the JSONL record format.
    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        self.pixels.chunks_exact(self.w).map(|r| r.to_vec()).collect()
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let h = rows.len();
        if h == 0 {
            return Err(Error::Dim { op: "image", msg: "empty row list".into() });
        }
        let w = rows[0].len();
        if w == 0 || rows.iter().any(|r| r.len() != w) {
            return Err(Error::Dim { op: "image", msg: "ragged or empty rows".into() });
        }
        let pixels = rows.iter().flatten().copied().collect();
        ImageGrid::new(h, w, pixels)
    }

    /// Mean squared pixel difference; shapes must match.
    pub fn mse(&self, other: &ImageGrid) -> Result<f64> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::ShapeMismatch {
                op: "image mse",
                lhs: vec![self.h, self.w],
                rhs: vec![other.h, other.w],
            });
        }
        let n = self.pixels.len() as f64;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(sum / n)
    }

    /// Write as binary PGM (P5, maxval 255). Pixels are clamped to [0, 1].
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.w, self.h)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Read a binary PGM written by [`ImageGrid::write_pgm`].
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let header_err = |msg: &str| Error::Format { offset: 0, msg: format!("pgm: {msg}") };
        // Header is three whitespace-separated fields after the magic.
        if !buf.starts_with(b"P5") {
            return Err(header_err("missing P5 magic"));
        }
        let mut pos = 2usize;
        let mut fields = Vec::with_capacity(3);
        while fields.len() < 3 && pos < buf.len() {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(header_err("truncated header"));
            }
            let text = std::str::from_utf8(&buf[start..pos])
                .map_err(|_| header_err("non-ascii header"))?;
            fields.push(
                text.parse::<usize>()
                    .map_err(|_| header_err("non-numeric header field"))?,
            );
        }
        if fields.len() != 3 || fields[2] != 255 {
            return Err(header_err("expected width height 255"));
        }
        pos += 1; // single whitespace byte after maxval
        let (w, h) = (fields[0], fields[1]);
        let body = buf.get(pos..pos + w * h).ok_or_else(|| header_err("short pixel data"))?;
        let pixels = body.iter().map(|&b| b as f32 / 255.0).collect();
        ImageGrid::new(h, w, pixels)
    }
}
