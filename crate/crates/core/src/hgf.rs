//! Raw floating-point image files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | content                              |
//! |--------|------|--------------------------------------|
//! | 0      | 4    | magic `HGF1`                         |
//! | 4      | 4    | width (`u32`)                        |
//! | 8      | 4    | height (`u32`)                       |
//! | 12     | 4    | channels (`u32`)                     |
//! | 16     | ...  | `width * height * channels` `f32`    |
//!
//! Samples are row-major with channels interleaved. Invalid pixels store NaN
//! in every channel. Normal maps use 3 channels, depth maps 1.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

const MAGIC: &[u8; 4] = b"HGF1";

#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Build from a per-pixel optional value; `None` becomes NaN.
    pub fn from_fn<const C: usize>(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<[f64; C]>,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * C);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(v) => data.extend(v.iter().map(|&c| c as f32)),
                    None => data.extend(std::iter::repeat(f32::NAN).take(C)),
                }
            }
        }
        Self {
            width,
            height,
            channels: C,
            data,
        }
    }

    /// Per-pixel values, `None` where any channel is non-finite.
    pub fn to_grid<const C: usize>(&self) -> Result<Grid<Option<[f64; C]>>> {
        if self.channels != C {
            return Err(Error::ManifestParse(format!(
                "expected {C}-channel float image, found {}",
                self.channels
            )));
        }
        Ok(Grid::from_fn(self.width, self.height, |x, y| {
            let px = self.pixel(x, y);
            if px.iter().all(|v| v.is_finite()) {
                let mut out = [0.0; C];
                for (o, v) in out.iter_mut().zip(px) {
                    *o = *v as f64;
                }
                Some(out)
            } else {
                None
            }
        }))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.channels] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != MAGIC {
            return Err(Error::ManifestParse("not an HGF1 float image".into()));
        }
        let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (width, height, channels) = (field(4), field(8), field(12));
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::ManifestParse("float image dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingImage(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_invalid_pixels() {
        let img = FloatImage::from_fn::<3>(4, 3, |x, y| {
            (x != y).then(|| [x as f64, y as f64 * 0.5, -1.25])
        });
        let mut bytes = Vec::new();
        img.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 3 * 3 * 4);
        let back = FloatImage::read_from(bytes.as_slice()).unwrap();
        let grid = back.to_grid::<3>().unwrap();
        assert_eq!(*grid.get(1, 1), None);
        assert_eq!(*grid.get(2, 1), Some([2.0, 0.5, -1.25]));
        assert!(back.to_grid::<1>().is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\0\0\0\0\0\0\0\0\0\0\0\0".to_vec();
        assert!(FloatImage::read_from(bytes.as_slice()).is_err());
    }
}
