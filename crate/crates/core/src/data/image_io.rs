//! PNG frames (RGB, `[0, 1]`) and masks (8-bit gray, nonzero = foreground).

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::Mask;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn frame_to_image(frame: &Tensor) -> RgbImage {
    let (_, h, w) = frame.dims3();
    let to8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to8(frame.at(0, y, x)), to8(frame.at(1, y, x)), to8(frame.at(2, y, x))])
    })
}

pub fn image_to_frame(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, f64::from(p.0[c]) / 255.0);
        }
    }
    t
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(image_to_frame(&img))
}

pub fn write_frame(frame: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    frame_to_image(frame).save(path).map_err(|e| image_err(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Mask::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0[0] != 0))
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.shape();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    img.save(path).map_err(|e| image_err(path, e))
}

/// Round values to the nearest 8-bit level so PNG storage is lossless.
pub fn quantize(frame: &mut Tensor) {
    for v in frame.data_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

/// Blend `color` over the foreground of `mask` with opacity `alpha`.
pub fn overlay_mask(frame: &Tensor, mask: &Mask, color: [f64; 3], alpha: f64) -> Tensor {
    let mut out = frame.clone();
    if alpha == 0.0 {
        return out;
    }
    let (_, h, w) = frame.dims3();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                for (c, &col) in color.iter().enumerate() {
                    out.set(c, y, x, (1.0 - alpha) * frame.at(c, y, x) + alpha * col);
                }
            }
        }
    }
    out
}

pub fn write_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save(path).map_err(|e| image_err(path, e))
}
