use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{resample_bicubic, ImageTensor};
use crate::error::{Error, Result};

/// Odd-sized, unit-sum 2D blur kernel stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::config(format!("blur kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::config(format!(
                "{size}x{size} kernel needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config(format!("blur kernel must sum to 1, sums to {total}")));
        }
        Ok(BlurKernel { size, weights })
    }

    pub fn identity() -> Self {
        BlurKernel {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }
}

/// Normalized `size x size` Gaussian; `sigma == 0` yields the identity kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<BlurKernel> {
    if size % 2 == 0 {
        return Err(Error::config(format!("blur kernel size must be odd, got {size}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 || size == 1 {
        let mut w = vec![0.0; size * size];
        w[(size / 2) * size + size / 2] = 1.0;
        return BlurKernel::new(size, w);
    }
    let r = (size / 2) as isize;
    let mut w = Vec::with_capacity(size * size);
    for i in -r..=r {
        for j in -r..=r {
            w.push((-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    BlurKernel::new(size, w)
}

/// `img ⊗ kernel` with edge replication; dimensions are preserved.
pub fn gaussian_blur(img: &ImageTensor, kernel: &BlurKernel) -> ImageTensor {
    let (h, w, c) = img.dims();
    let k = kernel.size();
    let r = (k / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..k {
                    // convolution: flipped kernel offsets
                    let sy = (y as isize + r - i as isize).clamp(0, h as isize - 1) as usize;
                    for j in 0..k {
                        let sx = (x as isize + r - j as isize).clamp(0, w as isize - 1) as usize;
                        acc += kernel.at(i, j) * src[(sy * w + sx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    ImageTensor::new(h, w, c, out).expect("blur preserves dimensions")
}

/// `len` i.i.d. `N(0, sigma^2)` draws from the seeded generator used by [`add_gaussian_noise`].
pub fn gaussian_noise(len: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| normal.sample(&mut rng)).collect())
}

/// `clamp(img + n)` with `n ~ N(0, sigma^2)` per sample.
pub fn add_gaussian_noise(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    let noise = gaussian_noise(img.data().len(), sigma, seed)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data = img
        .data()
        .iter()
        .zip(noise)
        .map(|(v, n)| (v + n).clamp(0.0, 1.0))
        .collect();
    let (h, w, c) = img.dims();
    ImageTensor::new(h, w, c, data)
}

/// Parameters of the blur, downsample, noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub blur_kernel: BlurKernel,
    pub scale: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationConfig {
    /// 5x5 Gaussian with `sigma = scale / 4`, no noise.
    pub fn for_scale(scale: usize) -> Result<Self> {
        let cfg = DegradationConfig {
            blur_kernel: gaussian_kernel(5, scale as f64 / 4.0)?,
            scale,
            noise_sigma: 0.0,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::config("scale factor must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        BlurKernel::new(self.blur_kernel.size, self.blur_kernel.weights.clone())?;
        Ok(())
    }
}

/// Largest centered crop whose sides are multiples of `scale`.
pub fn center_crop_to_multiple(img: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    let (h, w, _) = img.dims();
    if scale == 0 || h < scale || w < scale {
        return Err(Error::input(format!(
            "{h}x{w} image is smaller than the scale factor {scale}"
        )));
    }
    let nh = h - h % scale;
    let nw = w - w % scale;
    if nh == h && nw == w {
        return Ok(img.clone());
    }
    img.crop((h - nh) / 2, (w - nw) / 2, nh, nw)
}

/// Blur, antialiased bicubic downsample by `cfg.scale`, additive noise, clamp to `[0, 1]`.
///
/// Sides that are not multiples of the scale are center-cropped first.
pub fn degrade(hr: &ImageTensor, cfg: &DegradationConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let hr = center_crop_to_multiple(hr, cfg.scale)?;
    let blurred = gaussian_blur(&hr, &cfg.blur_kernel);
    let lr = resample_bicubic(
        &blurred,
        hr.height() / cfg.scale,
        hr.width() / cfg.scale,
        true,
    )?;
    add_gaussian_noise(&lr, cfg.noise_sigma, cfg.seed)
}
