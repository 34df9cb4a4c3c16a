use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// 8-bit RGB raster with an optional binary segmentation mask.
///
/// Pixels are stored interleaved (`r, g, b, r, g, b, ...`) in row-major order.
/// Mask entries are `0` or `1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    mask: Option<Vec<u8>>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("image dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::domain(format!(
                "expected {} RGB bytes for {width}x{height}, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            mask: None,
        })
    }

    /// Constant-colour image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.width * self.height {
            return Err(Error::domain("mask size does not match image"));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::domain("mask entries must be 0 or 1"));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Same geometry and mask, new pixel bytes.
    pub(crate) fn with_pixels(&self, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self {
            width: self.width,
            height: self.height,
            pixels,
            mask: self.mask.clone(),
        }
    }

    /// Applies a per-value lookup table to one channel in place.
    pub(crate) fn map_channel(pixels: &mut [u8], channel: usize, lut: &[u8; 256]) {
        for px in pixels.chunks_exact_mut(3) {
            px[channel] = lut[px[channel] as usize];
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw())
    }

    /// Loads a mask PNG: any nonzero luma is foreground.
    pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Vec<u8>> {
        let gray = image::open(path.as_ref())?.to_luma8();
        Ok(gray.into_raw().into_iter().map(|v| u8::from(v > 0)).collect())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::domain("pixel buffer size mismatch"))?;
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Writes the mask as 8-bit grayscale, foreground 255.
    pub fn save_mask_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::domain("image has no mask"))?;
        let buf = GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            mask.iter().map(|&m| m * 255).collect(),
        )
        .ok_or_else(|| Error::domain("mask buffer size mismatch"))?;
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Image::new(0, 4, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0; 11]).is_err());
        let img = Image::filled(2, 2, [1, 2, 3]).unwrap();
        assert!(img.clone().with_mask(vec![0, 1, 1]).is_err());
        assert!(img.with_mask(vec![0, 1, 2, 0]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..5 * 3 * 3).map(|v| (v * 7 % 256) as u8).collect();
        let img = Image::new(5, 3, pixels)
            .unwrap()
            .with_mask(vec![0, 1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0, 0, 1])
            .unwrap();
        img.save_png(dir.path().join("a.png")).unwrap();
        img.save_mask_png(dir.path().join("m.png")).unwrap();
        let back = Image::load_png(dir.path().join("a.png"))
            .unwrap()
            .with_mask(Image::load_mask_png(dir.path().join("m.png")).unwrap())
            .unwrap();
        assert_eq!(back, img);
    }
}
