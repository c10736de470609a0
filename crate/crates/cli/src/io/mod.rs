//! File formats: kernels, checkpoints, manifests, config files and PNG images.

pub mod checkpoint;
pub mod config;
pub mod kernel;
pub mod manifest;
pub mod model;

use std::fs;
use std::path::Path;

use caduf::error::{Error, Result};
use caduf::tensor::Tensor;

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::io(path, source)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Reads an 8-bit image as a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            what: "image",
            detail: format!("{}: {e}", path.display()),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[p * 3 + c]) / 255.0
    }))
}

/// Quantizes an `(1, 3, H, W)` tensor to 8 bits, clipping to `[0, 1]`.
pub fn to_rgb8(x: &Tensor) -> Result<image::RgbImage> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("expected one RGB image, got {:?}", x.shape())));
    }
    let d = x.data();
    let mut raw = vec![0u8; h * w * 3];
    for (p, px) in raw.chunks_exact_mut(3).enumerate() {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions"))
}

pub fn write_png(path: &Path, x: &Tensor) -> Result<()> {
    to_rgb8(x)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            what: "image",
            detail: format!("{}: {e}", path.display()),
        })
}
