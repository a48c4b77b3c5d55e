//! Full-reference image quality: PSNR, SSIM, GMSD and a feature-space perceptual distance.
//!
//! Images are expected in [0, 1]. SSIM and GMSD run on Rec.601 luminance unless
//! [`ColorMode::RgbAverage`] is selected; maps cover the valid region only.

mod maps;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;
use crate::networks::{ExtractorConfig, FeatureExtractor};
use crate::tensor::pairwise_sum;

pub use maps::{jet, MapKind, QualityMap};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const GMSD_C: f64 = 0.0026;
pub const LPIPS_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    #[default]
    Luminance,
    RgbAverage,
}

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::input(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn planes(img: &ImageTensor, mode: ColorMode) -> Vec<Vec<f64>> {
    match mode {
        ColorMode::Luminance => vec![img.luminance()],
        ColorMode::RgbAverage => (0..img.channels()).map(|c| img.channel_plane(c)).collect(),
    }
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images are identical.
pub fn psnr(sr: &ImageTensor, hr: &ImageTensor, peak: f64) -> Result<f64> {
    check_dims(sr, hr)?;
    let sq: Vec<f64> = sr.data().iter().zip(hr.data()).map(|(a, b)| (a - b) * (a - b)).collect();
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                s += wt * plane[y * w + x + t];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                s += wt * rows[(y + t) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> Vec<f64> {
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..a.len()).map(f).collect() };
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &win);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &win);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &win);
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

fn average_maps(maps: Vec<Vec<f64>>) -> Vec<f64> {
    let n = maps.len() as f64;
    let mut out = vec![0.0; maps[0].len()];
    for m in &maps {
        for (o, v) in out.iter_mut().zip(m) {
            *o += v / n;
        }
    }
    out
}

/// Mean SSIM and its valid-region map (11×11 Gaussian window, σ = 1.5).
pub fn ssim(sr: &ImageTensor, hr: &ImageTensor, mode: ColorMode) -> Result<(f64, QualityMap)> {
    check_dims(sr, hr)?;
    let (h, w, _) = sr.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::input(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let maps: Vec<Vec<f64>> = planes(sr, mode)
        .iter()
        .zip(planes(hr, mode).iter())
        .map(|(a, b)| ssim_plane(a, b, h, w, 1.0))
        .collect();
    let values = average_maps(maps);
    let mean = pairwise_sum(&values) / values.len() as f64;
    let map = QualityMap::new(MapKind::Ssim, h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1, values, SSIM_WINDOW / 2);
    Ok((mean, map))
}

/// Prewitt gradient magnitude on the valid `(h−2) × (w−2)` region.
fn gradient_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let at = |dy: isize, dx: isize| p[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for d in -1..=1 {
                gx += at(d, -1) - at(d, 1);
                gy += at(-1, d) - at(1, d);
            }
            gx /= 3.0;
            gy /= 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    (pairwise_sum(&sq) / n).sqrt()
}

/// Gradient magnitude similarity deviation and the similarity map.
pub fn gmsd(sr: &ImageTensor, hr: &ImageTensor, mode: ColorMode) -> Result<(f64, QualityMap)> {
    check_dims(sr, hr)?;
    let (h, w, _) = sr.dims();
    if h < 3 || w < 3 {
        return Err(Error::input(format!("GMSD needs at least 3x3 pixels, got {h}x{w}")));
    }
    let mut maps = Vec::new();
    let mut scores = Vec::new();
    for (a, b) in planes(sr, mode).iter().zip(planes(hr, mode).iter()) {
        let ga = gradient_magnitude(a, h, w);
        let gb = gradient_magnitude(b, h, w);
        let gms: Vec<f64> = ga
            .iter()
            .zip(&gb)
            .map(|(x, y)| (2.0 * x * y + GMSD_C) / (x * x + y * y + GMSD_C))
            .collect();
        scores.push(population_std(&gms));
        maps.push(gms);
    }
    let score = scores.iter().sum::<f64>() / scores.len() as f64;
    let map = QualityMap::new(MapKind::Gms, h - 2, w - 2, average_maps(maps), 1);
    Ok((score, map))
}

/// Taps and per-channel weights for the perceptual distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub taps: Vec<String>,
    /// Per-tap channel weights; missing taps weigh every channel 1.
    #[serde(default)]
    pub channel_weights: BTreeMap<String, Vec<f64>>,
}

impl PerceptualConfig {
    /// The last tap of every block.
    pub fn for_extractor(cfg: &ExtractorConfig) -> Self {
        PerceptualConfig {
            taps: cfg
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| format!("relu{}_{}", i + 1, b.len()))
                .collect(),
            channel_weights: BTreeMap::new(),
        }
    }
}

/// Sum over taps of the spatial mean of channel-weighted squared differences between
/// unit-normalised feature vectors.
pub fn perceptual_distance(
    sr: &ImageTensor,
    hr: &ImageTensor,
    extractor: &FeatureExtractor,
    cfg: &PerceptualConfig,
) -> Result<f64> {
    check_dims(sr, hr)?;
    if cfg.taps.is_empty() {
        return Err(Error::config("perceptual distance needs at least one tap"));
    }
    let taps: Vec<&str> = cfg.taps.iter().map(String::as_str).collect();
    let mut tape = Tape::new();
    let a = tape.constant(sr.to_nchw());
    let b = tape.constant(hr.to_nchw());
    let fa = extractor.forward(&mut tape, a, &taps)?;
    let fb = extractor.forward(&mut tape, b, &taps)?;
    let mut total = 0.0;
    for tap in &taps {
        let (x, y) = (tape.value(fa[*tap]), tape.value(fb[*tap]));
        let (_, c, h, w) = x.dims4();
        let weights = match cfg.channel_weights.get(*tap) {
            Some(v) if v.len() == c => v.clone(),
            Some(v) => {
                return Err(Error::config(format!(
                    "tap {tap} has {c} channels but {} weights",
                    v.len()
                )));
            }
            None => vec![1.0; c],
        };
        let plane = h * w;
        let mut per_pos = Vec::with_capacity(plane);
        for p in 0..plane {
            let na = (0..c).map(|k| x.data()[k * plane + p].powi(2)).sum::<f64>().sqrt() + LPIPS_EPS;
            let nb = (0..c).map(|k| y.data()[k * plane + p].powi(2)).sum::<f64>().sqrt() + LPIPS_EPS;
            let mut s = 0.0;
            for k in 0..c {
                let d = x.data()[k * plane + p] / na - y.data()[k * plane + p] / nb;
                s += weights[k] * d * d;
            }
            per_pos.push(s);
        }
        total += pairwise_sum(&per_pos) / plane as f64;
    }
    Ok(total)
}

/// The four metrics for one SR/HR pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
    pub lpips: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 4] = ["psnr", "ssim", "gmsd", "lpips"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "psnr" => Some(self.psnr),
            "ssim" => Some(self.ssim),
            "gmsd" => Some(self.gmsd),
            "lpips" => Some(self.lpips),
            _ => None,
        }
    }

    /// Whether a larger value of `name` means better quality.
    pub fn higher_is_better(name: &str) -> bool {
        matches!(name, "psnr" | "ssim")
    }
}

/// Everything needed to score images.
pub struct MetricContext<'e> {
    pub extractor: &'e FeatureExtractor,
    pub perceptual: PerceptualConfig,
    pub color: ColorMode,
    pub peak: f64,
}

impl<'e> MetricContext<'e> {
    pub fn new(extractor: &'e FeatureExtractor) -> Self {
        MetricContext {
            perceptual: PerceptualConfig::for_extractor(&extractor.config),
            extractor,
            color: ColorMode::Luminance,
            peak: 1.0,
        }
    }

    pub fn evaluate(&self, sr: &ImageTensor, hr: &ImageTensor) -> Result<(MetricReport, QualityMap, QualityMap)> {
        let (s, smap) = ssim(sr, hr, self.color)?;
        let (g, gmap) = gmsd(sr, hr, self.color)?;
        let report = MetricReport {
            psnr: psnr(sr, hr, self.peak)?,
            ssim: s,
            gmsd: g,
            lpips: perceptual_distance(sr, hr, self.extractor, &self.perceptual)?,
        };
        Ok((report, smap, gmap))
    }
}

/// Mean and sample standard deviation; infinite values propagate.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests;
