use super::ImageTensor;
use crate::error::{Error, Result};

pub const CATMULL_ROM_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn catmull_rom(x: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and normalized weights for each output coordinate along one axis.
struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn new(in_len: usize, out_len: usize, antialias: bool) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let support = if antialias && scale > 1.0 { scale } else { 1.0 };
        let radius = 2.0 * support;
        let taps = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale - 0.5;
                let lo = (center - radius).floor() as isize;
                let hi = (center + radius).ceil() as isize;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
                let mut total = 0.0;
                for j in lo..=hi {
                    let w = catmull_rom((j as f64 - center) / support);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = j.clamp(0, in_len as isize - 1) as usize;
                    total += w;
                    match row.iter_mut().find(|(k, _)| *k == idx) {
                        Some(entry) => entry.1 += w,
                        None => row.push((idx, w)),
                    }
                }
                for entry in &mut row {
                    entry.1 /= total;
                }
                row
            })
            .collect();
        AxisWeights { taps }
    }
}

/// Separable Catmull-Rom resampling to `out_h x out_w`.
///
/// With `antialias` set, downscaling widens the kernel by the scale ratio. Edges replicate.
/// Output samples are clamped to `[0, 1]`.
pub fn resample_bicubic(
    img: &ImageTensor,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::input(format!("resample target {out_h}x{out_w} is empty")));
    }
    let (h, w, c) = img.dims();
    if h == 0 || w == 0 {
        return Err(Error::input("cannot resample an empty image"));
    }
    let rows = AxisWeights::new(h, out_h, antialias);
    let cols = AxisWeights::new(w, out_w, antialias);

    // Horizontal pass: h x out_w.
    let src = img.data();
    let mut tmp = vec![0.0; h * out_w * c];
    for y in 0..h {
        for (x, taps) in cols.taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sx, wt) in taps {
                    acc += wt * src[(y * w + sx) * c + ch];
                }
                tmp[(y * out_w + x) * c + ch] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, taps) in rows.taps.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sy, wt) in taps {
                    acc += wt * tmp[(sy * out_w + x) * c + ch];
                }
                out[(y * out_w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, out)
}

/// Bicubic upscaling by an integer factor; the baseline every model is compared against.
pub fn bicubic_upscale(lr: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    resample_bicubic(lr, lr.height() * scale, lr.width() * scale, true)
}
