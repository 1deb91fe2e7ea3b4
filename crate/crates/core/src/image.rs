//! Image and volume carriers plus the 8-bit PGM preview writer.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A single H×W slice. Data images live in `[0, 1]`; diffused or
/// intermediate images are flagged `clean = false` and may leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
    pub clean: bool,
}

impl ImageGrid {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != h * w {
            return Err(Error::ShapeMismatch(format!("{} pixels for a {h}x{w} image", pixels.len())));
        }
        let clean = pixels.iter().all(|v| (0.0..=1.0).contains(v));
        Ok(Self { h, w, pixels, clean })
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Self { h, w, pixels: vec![value; h * w], clean: (0.0..=1.0).contains(&value) }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.w + x]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )))
        }
    }

    pub fn clamped(&self, lo: f32, hi: f32) -> Self {
        let pixels: Vec<f32> = self.pixels.iter().map(|v| v.clamp(lo, hi)).collect();
        let clean = lo >= 0.0 && hi <= 1.0;
        Self { h: self.h, w: self.w, pixels, clean }
    }

    /// Writes an 8-bit binary PGM, mapping `[0, 1]` to `0..=255`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.h, self.w, &self.pixels)
    }
}

pub fn write_pgm(path: &Path, h: usize, w: usize, pixels: &[f32]) -> Result<()> {
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// An H×W×D stack of slices. Storage is slice-major: voxel `(y, x, c)` sits
/// at `(c·H + y)·W + x`, so each slice is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d, voxels: vec![0.0; h * w * d] }
    }

    pub fn slice(&self, c: usize) -> ImageGrid {
        let n = self.h * self.w;
        let pixels = self.voxels[c * n..(c + 1) * n].to_vec();
        ImageGrid { h: self.h, w: self.w, clean: pixels.iter().all(|v| (0.0..=1.0).contains(v)), pixels }
    }

    pub fn slices(&self) -> Vec<ImageGrid> {
        (0..self.d).map(|c| self.slice(c)).collect()
    }

    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

/// Integer label volume with the same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn mask(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_flag_tracks_range() {
        assert!(ImageGrid::new(1, 2, vec![0.0, 1.0]).unwrap().clean);
        assert!(!ImageGrid::new(1, 2, vec![-0.1, 1.0]).unwrap().clean);
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        ImageGrid::new(1, 3, vec![0.0, 0.5, 2.0]).unwrap().write_pgm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
    }

    #[test]
    fn volume_slices_are_contiguous() {
        let mut v = Volume::zeros(2, 3, 2);
        let i = v.index(1, 2, 1);
        v.voxels[i] = 0.75;
        assert_eq!(v.slice(1).get(1, 2), 0.75);
        assert_eq!(v.slice(0).get(1, 2), 0.0);
    }
}
