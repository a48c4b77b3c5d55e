use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imagecore::{save_png, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Ssim,
    Gms,
}

/// Per-pixel similarity over the valid region of a windowed metric.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityMap {
    pub kind: MapKind,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Pixels lost on each border relative to the input image.
    pub border: usize,
}

/// Jet colormap for `t` in [0, 1]: blue at 0, red at 1.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

impl QualityMap {
    pub fn new(kind: MapKind, height: usize, width: usize, values: Vec<f64>, border: usize) -> Self {
        QualityMap {
            kind,
            height,
            width,
            values,
            border,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Dissimilarity in [0, 1]: 0 where the images agree.
    fn dissimilarity(&self, v: f64) -> f64 {
        (1.0 - v).clamp(0.0, 1.0)
    }

    /// False-colour rendering padded back to the input size by edge replication.
    pub fn to_false_color(&self) -> ImageTensor {
        let b = self.border;
        let (h, w) = (self.height + 2 * b, self.width + 2 * b);
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            let yy = y.saturating_sub(b).min(self.height - 1);
            let xx = x.saturating_sub(b).min(self.width - 1);
            jet(self.dissimilarity(self.values[yy * self.width + xx]))[c]
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&self.to_false_color(), path)
    }

    /// `u32 height, u32 width` then `height × width` little-endian f32 values.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.raw_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
        let b = fs::read(path).map_err(|e| Error::io(path, e))?;
        if b.len() < 8 {
            return Err(Error::Format(format!("{}: truncated map", path.display())));
        }
        let h = u32::from_le_bytes(b[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
        if b.len() != 8 + 4 * h * w {
            return Err(Error::Format(format!("{}: size does not match header", path.display())));
        }
        let v = b[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((h, w, v))
    }
}
