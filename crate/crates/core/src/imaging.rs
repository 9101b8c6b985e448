//! Binary masks and conversions between `[-1, 1]` image tensors and 8-bit PNG.

use std::path::Path;

use facetex_grad::Tensor;

use crate::error::{Error, Result};
use crate::raster::RasterOutput;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_coverage(raster: &RasterOutput) -> Self {
        Self::new(raster.height, raster.width, raster.coverage.clone())
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// `1×H×W` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.height, self.width], self.data.iter().map(|&b| b as u8 as f32).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] >= 128).collect()))
    }
}

/// `[-1, 1]` → `0..=255`.
pub fn to_u8(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Writes a `3×H×W` tensor as an RGB PNG.
pub fn save_rgb_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = chw(image)?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * h * w + p] = from_u8(px.0[c]);
        }
    }
    Ok(out)
}

pub(crate) fn chw(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Dimension(format!("expected C×H×W image, got {s:?}"))),
    }
}

/// Tiles equally sized `C×H×W` cells into a grid with `cols` columns.
pub fn tile(cells: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>> {
    if cells.is_empty() || cols == 0 {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let (c, h, w) = chw(&cells[0])?;
    let rows = cells.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::zeros(&[c, gh, gw]);
    for (k, cell) in cells.iter().enumerate() {
        if chw(cell)? != (c, h, w) {
            return Err(Error::Dimension("grid cells differ in size".into()));
        }
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * gh + r0 + y) * gw + c0 + x] = cell[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_round_trip() {
        for p in 0..=255u8 {
            assert_eq!(to_u8(from_u8(p)), p);
        }
    }

    #[test]
    fn iou_basics() {
        let a = Mask::new(1, 4, vec![true, true, false, false]);
        let b = Mask::new(1, 4, vec![false, true, true, false]);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn tiling_places_cells() {
        let a = Tensor::full(&[1, 2, 2], 1.0f32);
        let b = Tensor::full(&[1, 2, 2], 2.0f32);
        let g = tile(&[a, b], 2).unwrap();
        assert_eq!(g.shape(), &[1, 2, 4]);
        assert_eq!(g.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }
}
