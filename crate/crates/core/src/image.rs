//! The 64×64 RGB image used at every network boundary.
//!
//! Pixels are stored planar (channel-major): all red values row by row, then
//! green, then blue. Values live in `[0, 1]`; 8-bit sources are divided by 255.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Vec<f32>,
}

impl Image {
    /// Wraps planar pixel data, rejecting wrong lengths and values outside `[0, 1]`.
    pub fn from_planar(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_LEN {
            return Err(Error::contract(format!(
                "image needs {IMAGE_LEN} values, got {}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::contract(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Image { pixels })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN becomes 0.
    pub fn from_planar_clamped(mut pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_LEN {
            return Err(Error::contract(format!(
                "image needs {IMAGE_LEN} values, got {}",
                pixels.len()
            )));
        }
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Image { pixels })
    }

    pub fn filled(value: f32) -> Self {
        Image {
            pixels: vec![value.clamp(0.0, 1.0); IMAGE_LEN],
        }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(IMAGE_LEN);
        for c in 0..IMAGE_CHANNELS {
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let v = f(c, y, x);
                    pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Image { pixels }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Converts an arbitrary RGB picture: center-crop to a square, then
    /// resize to 64×64.
    pub fn from_rgb8(rgb: &RgbImage) -> Result<Self> {
        let (w, h) = rgb.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::contract("empty image"));
        }
        let side = w.min(h);
        let cropped = imageops::crop_imm(rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let resized = if side as usize == IMAGE_SIZE {
            cropped
        } else {
            imageops::resize(&cropped, IMAGE_SIZE as u32, IMAGE_SIZE as u32, FilterType::Triangle)
        };
        Ok(Image::from_fn(|c, y, x| {
            resized.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(self.to_rgb8())
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }

    /// Decodes any supported encoded picture and normalizes it to 64×64.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Image::from_rgb8(&img.to_rgb8())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()).map_err(|e| Error::io(path, e))
    }
}
