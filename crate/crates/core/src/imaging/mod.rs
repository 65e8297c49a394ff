//! Pixel-space primitives: frames, scalar fields, resizing, SSIM, block
//! matching flow and the contrastive augmentations.

mod augment;
mod flow;
mod ssim;

pub use augment::{
    apply_jitter, augment, color_jitter, crop_resize, gaussian_blur, gaussian_kernel,
    random_crop_resize, sample_crop, Augmentation, CropRect, JitterParams, BLUR_SIGMA_RANGE,
    DEFAULT_MIN_CROP_SCALE, JITTER_RANGE,
};
pub use flow::{
    block_match_flow, read_flows, write_flows, FlowField, DEFAULT_BLOCK, DEFAULT_RADIUS,
    FLOW_MAGIC, FLOW_VERSION,
};
pub use ssim::{ssim_map, SsimParams};

use image::RgbImage;

use crate::error::{Error, Result};

pub const MIN_FRAME_SIDE: usize = 8;

/// Luma weights applied to (R, G, B).
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB image with interleaved channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    /// Builds a frame from interleaved RGB values, clamping them into `[0, 1]`.
    pub fn new(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(Error::invalid(format!(
                "frame {width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "frame {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame contains non-finite values"));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        Self {
            width,
            height,
            data,
        }
    }

    /// Integer-aligned sub-image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Frame> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Index(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Frame::new(w, h, data)
    }

    /// Bilinear resize with half-pixel centers and clamped borders.
    pub fn resize(&self, width: usize, height: usize) -> Result<Frame> {
        let rect = CropRect {
            x: 0.0,
            y: 0.0,
            w: self.width as f64,
            h: self.height as f64,
        };
        crop_resize(self, rect, width, height)
    }

    pub fn to_image(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_image(img: &RgbImage) -> Result<Frame> {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Frame::new(img.width() as usize, img.height() as usize, data)
    }
}

/// A single value per pixel (grayscale images, SSIM maps, attention masks).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::dim(format!(
                "field {width}x{height} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_size(&self, other: &ScalarField) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Mean over the rectangle `[x, x+w) × [y, y+h)`.
    /// A running mean is used so constant regions give exactly the constant.
    pub fn rect_mean(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let mut mean = 0.0;
        let mut k = 0.0;
        for row in y..y + h {
            for &v in &self.data[row * self.width + x..row * self.width + x + w] {
                k += 1.0;
                mean += (v - mean) / k;
            }
        }
        mean
    }

    /// Grayscale PNG view; values are clamped into `[0, 1]`.
    pub fn to_image(&self) -> image::GrayImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }
}

/// Per-pixel luma `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(frame: &Frame) -> ScalarField {
    let data = frame
        .data
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    ScalarField {
        width: frame.width,
        height: frame.height,
        data,
    }
}
