//! Raster image helpers: crops, nearest-neighbour resizing, and PNG I/O.
//!
//! Images are `H x W x 3` float arrays with values in `[0, 1]`.

use ndarray::{Array2, Array3};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImgError {
    #[error("empty crop region")]
    EmptyCrop,
    #[error("crop out of bounds: {0}")]
    OutOfBounds(String),
    #[error("image codec error: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Center-aligned nearest-neighbour resize of a 2-D array.
///
/// Complementary masks stay complementary under this mapping because every
/// output cell reads the same source cell in both masks.
pub fn resize_nearest(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0, "resize_nearest on empty array");
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let si = (((i as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sj = (((j as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        src[[si, sj]]
    })
}

/// Nearest-neighbour resize of a 3-channel image to `out_h x out_w`.
pub fn resize_rgb(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    assert_eq!(c, 3, "resize_rgb expects 3 channels");
    assert!(h > 0 && w > 0, "resize_rgb on empty image");
    Array3::from_shape_fn((out_h, out_w, 3), |(i, j, ch)| {
        let si = (((i as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sj = (((j as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        src[[si, sj, ch]]
    })
}

/// Extracts the pixel region `[y0, y1) x [x0, x1)`.
pub fn crop_rgb(
    image: &Array3<f32>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
) -> Result<Array3<f32>, ImgError> {
    let (h, w, _) = image.dim();
    if x0 >= x1 || y0 >= y1 {
        return Err(ImgError::EmptyCrop);
    }
    if x1 > w || y1 > h {
        return Err(ImgError::OutOfBounds(format!(
            "crop ({x0},{y0})-({x1},{y1}) exceeds {h}x{w}"
        )));
    }
    Ok(Array3::from_shape_fn(
        (y1 - y0, x1 - x0, 3),
        |(i, j, c)| image[[y0 + i, x0 + j, c]],
    ))
}

/// Writes an image as 8-bit RGB PNG, clamping values into `[0, 1]`.
pub fn save_rgb_png(path: &Path, image: &Array3<f32>) -> Result<(), ImgError> {
    let (h, w, c) = image.dim();
    assert_eq!(c, 3, "save_rgb_png expects 3 channels");
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                buf.push((image[[i, j, ch]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    img.save(path).map_err(|e| ImgError::Codec(e.to_string()))
}

/// Writes a 2-D array as 8-bit grayscale PNG, clamping into `[0, 1]`.
pub fn save_gray_png(path: &Path, values: &Array2<f32>) -> Result<(), ImgError> {
    let (h, w) = values.dim();
    let mut buf = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            buf.push((values[[i, j]].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    img.save(path).map_err(|e| ImgError::Codec(e.to_string()))
}

/// Loads a PNG as an `H x W x 3` float image in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<Array3<f32>, ImgError> {
    let img = image::open(path)
        .map_err(|e| ImgError::Codec(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        img.get_pixel(j as u32, i as u32).0[c] as f32 / 255.0
    }))
}
