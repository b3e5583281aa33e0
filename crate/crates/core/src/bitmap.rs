//! Single-channel raster with ink intensity in `[0, 1]` (ink = 1).
//!
//! Files on disk follow the usual convention of dark ink on a light
//! background; [`Bitmap::load`] and [`Bitmap::save`] convert polarity.

use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};

/// Pixels at or above this intensity count as ink for trimming and emptiness.
pub const INK_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Bitmap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "bitmap {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Bitmap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Zero outside the raster.
    #[inline]
    fn sample(&self, x: isize, y: isize) -> f32 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = self.sample(xi, yi) * (1.0 - fx) + self.sample(xi + 1, yi) * fx;
        let bottom = self.sample(xi, yi + 1) * (1.0 - fx) + self.sample(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn ink_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= INK_THRESHOLD).count()
    }

    /// Bounding box of ink pixels as `(x0, y0, x1, y1)`, end-exclusive.
    pub fn ink_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) >= INK_THRESHOLD {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then_some((x0, y0, x1, y1))
    }

    /// Copies `[x0, x1) x [y0, y1)`; out-of-raster pixels are blank.
    pub fn crop(&self, x0: isize, y0: isize, x1: isize, y1: isize) -> Bitmap {
        let w = (x1 - x0).max(0) as usize;
        let h = (y1 - y0).max(0) as usize;
        let mut out = Bitmap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = self.sample(x0 + x as isize, y0 + y as isize);
            }
        }
        out
    }

    /// Crops to the ink bounding box; `None` when there is no ink.
    pub fn trim(&self) -> Option<Bitmap> {
        let (x0, y0, x1, y1) = self.ink_bounds()?;
        Some(self.crop(x0 as isize, y0 as isize, x1 as isize, y1 as isize))
    }

    pub fn resize(&self, new_w: usize, new_h: usize) -> Bitmap {
        let mut out = Bitmap::new(new_w, new_h);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        let sx = self.width as f32 / new_w as f32;
        let sy = self.height as f32 / new_h as f32;
        for y in 0..new_h {
            let src_y = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..new_w {
                let src_x = (x as f32 + 0.5) * sx - 0.5;
                // Clamp to the raster so borders are not darkened by blank padding.
                let v = self.bilinear(
                    src_x.clamp(0.0, (self.width - 1) as f32),
                    src_y.clamp(0.0, (self.height - 1) as f32),
                );
                out.data[y * new_w + x] = v;
            }
        }
        out
    }

    pub fn scale(&self, factor: f32) -> Bitmap {
        let w = ((self.width as f32 * factor).round() as usize).max(1);
        let h = ((self.height as f32 * factor).round() as usize).max(1);
        self.resize(w, h)
    }

    /// Rotates about the center, growing the canvas to hold the result.
    pub fn rotate(&self, degrees: f32) -> Bitmap {
        let theta = degrees.to_radians();
        let (s, c) = theta.sin_cos();
        let (w, h) = (self.width as f32, self.height as f32);
        let new_w = (w * c.abs() + h * s.abs()).ceil() as usize;
        let new_h = (w * s.abs() + h * c.abs()).ceil() as usize;
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (ncx, ncy) = (new_w as f32 / 2.0, new_h as f32 / 2.0);
        let mut out = Bitmap::new(new_w, new_h);
        for y in 0..new_h {
            for x in 0..new_w {
                let dx = x as f32 + 0.5 - ncx;
                let dy = y as f32 + 0.5 - ncy;
                let src_x = c * dx + s * dy + cx - 0.5;
                let src_y = -s * dx + c * dy + cy - 0.5;
                out.data[y * new_w + x] = self.bilinear(src_x, src_y);
            }
        }
        out
    }

    fn morph(&self, grow: bool) -> Bitmap {
        let mut out = Bitmap::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = if grow { 0.0f32 } else { 1.0f32 };
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let v = self.sample(x as isize + dx, y as isize + dy);
                        acc = if grow { acc.max(v) } else { acc.min(v) };
                    }
                }
                out.data[y * self.width + x] = acc;
            }
        }
        out
    }

    /// 3x3 max filter on a canvas padded by one pixel on each side.
    pub fn dilate(&self) -> Bitmap {
        let padded = self.pad(1);
        padded.morph(true)
    }

    /// 3x3 min filter.
    pub fn erode(&self) -> Bitmap {
        self.morph(false)
    }

    pub fn pad(&self, border: usize) -> Bitmap {
        let b = border as isize;
        self.crop(-b, -b, self.width as isize + b, self.height as isize + b)
    }

    /// Composites `src` at `(x, y)` by per-pixel max, clipping to the canvas.
    pub fn paste_max(&mut self, src: &Bitmap, x: isize, y: isize) {
        for sy in 0..src.height {
            let ty = y + sy as isize;
            if ty < 0 || ty >= self.height as isize {
                continue;
            }
            for sx in 0..src.width {
                let tx = x + sx as isize;
                if tx < 0 || tx >= self.width as isize {
                    continue;
                }
                let idx = ty as usize * self.width + tx as usize;
                self.data[idx] = self.data[idx].max(src.data[sy * src.width + sx]);
            }
        }
    }

    /// Fits the bitmap into a `size x size` canvas, scaling the longer side to
    /// `size` and centering the shorter one.
    pub fn to_canvas(&self, size: usize) -> Bitmap {
        let longest = self.width.max(self.height).max(1) as f32;
        let factor = size as f32 / longest;
        let w = ((self.width as f32 * factor).round() as usize).clamp(1, size);
        let h = ((self.height as f32 * factor).round() as usize).clamp(1, size);
        let scaled = self.resize(w, h);
        let mut out = Bitmap::new(size, size);
        out.paste_max(&scaled, ((size - w) / 2) as isize, ((size - h) / 2) as isize);
        out
    }

    pub fn from_gray(img: &GrayImage) -> Bitmap {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&p| 1.0 - p as f32 / 255.0).collect();
        Bitmap {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (255.0 - v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches dimensions")
    }

    pub fn load(path: &Path) -> Result<Bitmap> {
        Ok(Bitmap::from_gray(&load_gray(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(w: usize, h: usize, x: usize, y: usize) -> Bitmap {
        let mut b = Bitmap::new(w, h);
        b.set(x, y, 1.0);
        b
    }

    #[test]
    fn trim_finds_ink() {
        let b = dot(10, 8, 3, 5);
        assert_eq!(b.ink_bounds(), Some((3, 5, 4, 6)));
        let t = b.trim().unwrap();
        assert_eq!((t.width(), t.height()), (1, 1));
        assert!(Bitmap::new(4, 4).trim().is_none());
    }

    #[test]
    fn erode_and_dilate() {
        let b = dot(5, 5, 2, 2);
        assert_eq!(b.erode().ink_count(), 0);
        let d = b.dilate();
        assert_eq!(d.ink_count(), 9);
        assert_eq!((d.width(), d.height()), (7, 7));
    }

    #[test]
    fn canvas_preserves_aspect() {
        let mut b = Bitmap::new(10, 20);
        b.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let c = b.to_canvas(48);
        assert_eq!((c.width(), c.height()), (48, 48));
        assert_eq!(c.ink_bounds(), Some((12, 0, 36, 48)));
    }

    #[test]
    fn gray_roundtrip() {
        let b = dot(3, 3, 1, 1);
        assert_eq!(Bitmap::from_gray(&b.to_gray()), b);
    }
}
