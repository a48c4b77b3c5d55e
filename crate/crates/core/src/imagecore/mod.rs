//! Image container, resampling and the blur / downsample / noise degradation model.

mod degrade;
mod io;
mod resample;

pub use degrade::{
    add_gaussian_noise, center_crop_to_multiple, degrade, gaussian_blur, gaussian_kernel,
    gaussian_noise, BlurKernel, DegradationConfig,
};
pub use io::{load_png, save_png};
pub use resample::{bicubic_upscale, catmull_rom, resample_bicubic, CATMULL_ROM_A};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H x W x C` image stored row-major with interleaved channels.
///
/// Samples are `[0, 1]` for files and metrics and `[-1, 1]` inside the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::input(format!("images carry 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::input(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite sample at index {bad}")));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageTensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        crate::tensor::pairwise_sum(&self.data) / self.data.len() as f64
    }

    /// `[0, 1]` to `[-1, 1]`.
    pub fn to_network_range(&self) -> ImageTensor {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// `[-1, 1]` to `[0, 1]`, clamped.
    pub fn to_unit_range(&self) -> ImageTensor {
        self.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
    }

    pub fn clamp_unit(&self) -> ImageTensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::input(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Ok(ImageTensor {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Rec.601 luma for RGB, the single plane otherwise.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn channel_plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Single-sample `[1, C, H, W]` tensor.
    pub fn to_nchw(&self) -> Tensor {
        batch_to_nchw(std::slice::from_ref(self))
            .expect("a single image always forms a consistent batch")
    }

    /// Converts sample `n` of an NCHW tensor back to HWC.
    pub fn from_nchw(t: &Tensor, n: usize) -> Result<ImageTensor> {
        let (batch, c, h, w) = t.dims4();
        if n >= batch {
            return Err(Error::input(format!("sample {n} out of batch {batch}")));
        }
        let plane = h * w;
        let base = n * c * plane;
        let src = t.data();
        let mut data = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                data[p * c + ch] = src[base + ch * plane + p];
            }
        }
        ImageTensor::new(h, w, c, data)
    }
}

/// Stacks equally sized images into `[N, C, H, W]`.
pub fn batch_to_nchw(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::input("empty image batch"))?;
    let (h, w, c) = first.dims();
    let plane = h * w;
    let mut data = vec![0.0; images.len() * c * plane];
    for (n, img) in images.iter().enumerate() {
        if img.dims() != (h, w, c) {
            return Err(Error::input(format!(
                "batch mixes {:?} and {:?} images",
                (h, w, c),
                img.dims()
            )));
        }
        let base = n * c * plane;
        for p in 0..plane {
            for ch in 0..c {
                data[base + ch * plane + p] = img.data[p * c + ch];
            }
        }
    }
    Tensor::new(&[images.len(), c, h, w], data)
}
