//! RGB images with values in `[0, 1]`, plus conversions to and from tensors
//! and PNG/JPEG files.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;

use crate::error::{Error, Result};

/// Luminance weights shared by the edge path and SSIM.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Height × width × 3, row-major, interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
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

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Luminance image in f64.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] as f64 + LUMA_WEIGHTS[1] * p[1] as f64 + LUMA_WEIGHTS[2] * p[2] as f64)
            .collect();
        GrayImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `(3, H, W)` tensor of the given dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Stacks images into a `(B, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let parts = images
            .iter()
            .map(|im| im.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => {
                return Err(Error::ShapeMismatch(format!(
                    "expected rank 3 or 4 image tensor, got rank {r}"
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Image::new(h, w, data)
    }

    /// Splits a `(B, 3, H, W)` tensor into images.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
    }

    /// Decodes a PNG/JPEG, center-crops to a square and resizes to `resolution`.
    pub fn load_square(path: &Path, resolution: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let side = w.min(h);
        let x0 = (w - side) / 2;
        let y0 = (h - side) / 2;
        let cropped = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
        let resized = if side as usize == resolution {
            cropped
        } else {
            image::imageops::resize(&cropped, resolution as u32, resolution as u32, FilterType::Triangle)
        };
        let data = resized.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(resolution, resolution, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Single-channel f64 image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "gray buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Replicate-border access.
    #[inline]
    pub fn at_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.at(r, c)
    }

    /// Gray replicated into three identical channels.
    pub fn to_rgb(&self) -> Image {
        let data = self.data.iter().flat_map(|&v| [v as f32; 3]).collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }
}
