use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use super::ImageTensor;
use crate::error::{Error, Result};

/// Reads an 8-bit image as RGB (or grayscale for single-channel files), scaled by 1/255.
pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if matches!(dynimg.color(), image::ColorType::L8 | image::ColorType::L16) {
        let g = dynimg.to_luma8();
        let (w, h) = g.dimensions();
        let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        return ImageTensor::new(h as usize, w as usize, 1, data);
    }
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[0, 1]` image as an 8-bit PNG.
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let (h, w, c) = img.dims();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let res = if c == 1 {
        ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, bytes)
            .expect("buffer sized from dims")
            .save_with_format(path, image::ImageFormat::Png)
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, bytes)
            .expect("buffer sized from dims")
            .save_with_format(path, image::ImageFormat::Png)
    };
    res.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
