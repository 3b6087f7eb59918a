//! Grayscale raster with real-valued samples, plus lossless 8/16-bit
//! portable graymap I/O.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Row-major grayscale image. Samples are nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let i = self.index(x, y);
        self.data[i] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear sample; `None` outside the image.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        if u < 0.0 || v < 0.0 || u > (self.width - 1) as f64 || v > (self.height - 1) as f64 {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    fn quantized(&self, max: f64) -> impl Iterator<Item = f64> + '_ {
        self.data
            .iter()
            .map(move |&v| (v.clamp(0.0, 1.0) * max).round())
    }

    pub fn to_luma16(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        let raw: Vec<u16> = self.quantized(65535.0).map(|v| v as u16).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn to_luma8(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        let raw: Vec<u8> = self.quantized(255.0).map(|v| v as u8).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Writes a 16-bit binary PGM.
    pub fn save_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_luma16()
            .save_with_format(path, image::ImageFormat::Pnm)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save_pgm8(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Pnm)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Loads an 8- or 16-bit grayscale image, normalizing to [0, 1].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let data = match img {
            image::DynamicImage::ImageLuma8(buf) => buf
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
            image::DynamicImage::ImageLuma16(buf) => buf
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
            other => other
                .to_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        };
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Loads a 16-bit image as raw counts (no normalization).
    pub fn load_raw16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok((w, h, img.to_luma16().into_raw()))
    }

    pub fn save_raw16(
        width: usize,
        height: usize,
        data: Vec<u16>,
        path: impl AsRef<Path>,
    ) -> Result<()> {
        let path = path.as_ref();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(width as u32, height as u32, data)
                .ok_or_else(|| Error::Input("raster size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Pnm)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
