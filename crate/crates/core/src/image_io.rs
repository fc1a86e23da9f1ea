//! PNG/PPM decoding to `[3, H, W]` tensors in `[0, 1]`, and PNG output.

use std::path::Path;

use image::{imageops, DynamicImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest evaluation resolution; bigger images are shrunk to fit.
pub const EVAL_MAX: (usize, usize) = (480, 360);

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_dynamic(&img))
}

fn from_dynamic(img: &DynamicImage) -> Tensor {
    // Grayscale inputs come back with the luma replicated.
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (ch, p) = (i / (w * h), i % (w * h));
        f64::from(raw[p * 3 + ch])
    })
}

fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        [1, h, w] => (h, w),
        ref s => return Err(Error::shape("save_png", format!("expected [3|1, H, W], got {s:?}"))),
    };
    let c = image.shape()[0];
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = image.data()[(ch.min(c - 1) * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Writes PNG or PPM depending on the extension (PNG otherwise).
pub fn save_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rgb = to_rgb8(image)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    rgb.save_with_format(path, format).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Shrinks `image` to fit inside `max` (w, h), keeping aspect ratio; smaller
/// images are returned unchanged. Returns the image and the applied factor.
pub fn fit_within(image: &Tensor, max: (usize, usize)) -> (Tensor, f64) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if w <= max.0 && h <= max.1 {
        return (image.clone(), 1.0);
    }
    let f = (max.0 as f64 / w as f64).min(max.1 as f64 / h as f64);
    let (nw, nh) = (((w as f64 * f).round() as usize).max(1), ((h as f64 * f).round() as usize).max(1));
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| image.data()[(ch * h + y as usize) * w + x as usize] as f32;
        Rgb([at(0), at(1), at(2)])
    });
    let small = imageops::resize(&buf, nw as u32, nh as u32, imageops::FilterType::Triangle);
    let out = from_dynamic(&DynamicImage::ImageRgb32F(small));
    (out, f)
}
