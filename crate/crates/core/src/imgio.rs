//! Grayscale PNG round-tripping between `[1,H,W]` float tensors in `[0,1]`
//! and lossless 8-bit files.

use std::path::Path;

use image::{GrayImage, ImageReader};
use ndarray::{ArrayD, IxDyn};

use crate::tensor::Scalar;
use crate::{Error, Result};

/// Quantizes to the 8-bit grid used on disk: `round(clamp(v) * 255) / 255`.
pub fn quantize8<E: Scalar>(v: E) -> E {
    let x = v.as_f64().clamp(0.0, 1.0);
    E::from_f64((x * 255.0).round() / 255.0)
}

pub fn to_u8_row_major<E: Scalar>(img: &ArrayD<E>) -> Result<(u32, u32, Vec<u8>)> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::shape("[1, H, W]", format!("{shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let bytes = img
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((w as u32, h as u32, bytes))
}

pub fn save_png<E: Scalar>(path: &Path, img: &ArrayD<E>) -> Result<()> {
    let (w, h, bytes) = to_u8_row_major(img)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = GrayImage::from_raw(w, h, bytes).expect("sized buffer");
    buf.save(path).map_err(Error::from)?;
    Ok(())
}

pub fn load_png<E: Scalar>(path: &Path) -> Result<ArrayD<E>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(Error::from)?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<E> = img.into_raw().into_iter().map(|b| E::from_f64(b as f64 / 255.0)).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[1, h, w]), data).expect("sized buffer"))
}
