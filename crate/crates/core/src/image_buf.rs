//! Row-major RGB float image with PNG import/export.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::Result;

/// RGB image, components in `[0, 1]`, pixel `(x, y)` at `pixels[y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Vector3<f32>>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        ImageRgb {
            width,
            height,
            pixels: vec![Vector3::zeros(); (width as usize) * (height as usize)],
        }
    }

    pub fn filled(width: u32, height: u32, color: Vector3<f32>) -> Self {
        ImageRgb {
            width,
            height,
            pixels: vec![color; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> Vector3<f32> {
        self.pixels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, c: Vector3<f32>) {
        self.pixels[(y * self.width + x) as usize] = c;
    }

    /// Quantizes to 8 bits per channel and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width, self.height);
        for (i, p) in self.pixels.iter().enumerate() {
            let x = i as u32 % self.width;
            let y = i as u32 / self.width;
            buf.put_pixel(x, y, image::Rgb([to_u8(p.x), to_u8(p.y), to_u8(p.z)]));
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (width, height) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| {
                Vector3::new(
                    p.0[0] as f32 / 255.0,
                    p.0[1] as f32 / 255.0,
                    p.0[2] as f32 / 255.0,
                )
            })
            .collect();
        Ok(ImageRgb {
            width,
            height,
            pixels,
        })
    }
}

#[inline]
fn to_u8(c: f32) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}
