//! Planar RGB float images and the few pixel operations the pipeline needs.

use std::path::Path;

use crate::error::{Error, Result};

/// An RGB image stored channel-major (`[c][y][x]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", Self::CHANNELS * height * width),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resize with pixel-centre alignment. Same-size resizes
    /// return an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Raster::zeros(height, width);
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..Self::CHANNELS {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> std::result::Result<Raster, String> {
        let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err("image has zero size".into());
        }
        let mut out = Raster::zeros(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..Self::CHANNELS {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    /// Quantizes to 8-bit RGB and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..Self::CHANNELS {
                let v = self.get(c, y as usize, x as usize).clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}
