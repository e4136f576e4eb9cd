//! Binary PPM (P6) output and the prediction overlay: correct cells green,
//! missing cells blue, wrong cells red over a gray background; ignored
//! cells dimmed.

use std::fs;
use std::io::Write;
use std::path::Path;

use bevfuse_core::diff::{sigmoid, Tensor};
use bevfuse_core::sensor::Image;

use crate::FormatError;

/// Write interleaved RGB rows as binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), FormatError> {
    if rgb.len() != 3 * width * height {
        return Err(FormatError::Corrupt(format!(
            "ppm payload is {} bytes, expected {}",
            rgb.len(),
            3 * width * height
        )));
    }
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write!(&mut out, "P6\n{width} {height}\n255\n")?;
    out.extend_from_slice(rgb);
    fs::write(path, out)?;
    Ok(())
}

/// Planar sensor image to PPM.
pub fn image_to_ppm(path: &Path, image: &Image) -> Result<(), FormatError> {
    let plane = image.height * image.width;
    let mut rgb = vec![0u8; 3 * plane];
    for i in 0..plane {
        rgb[3 * i] = image.data[i];
        rgb[3 * i + 1] = image.data[plane + i];
        rgb[3 * i + 2] = image.data[2 * plane + i];
    }
    write_ppm(path, image.width, image.height, &rgb)
}

pub const OVERLAY_CORRECT: [u8; 3] = [40, 200, 70];
pub const OVERLAY_MISSING: [u8; 3] = [60, 90, 230];
pub const OVERLAY_WRONG: [u8; 3] = [230, 60, 50];
pub const OVERLAY_BACKGROUND: [u8; 3] = [235, 235, 235];
pub const OVERLAY_IGNORED: [u8; 3] = [150, 150, 150];

/// Classify each BEV cell of a prediction against the ground truth and
/// paint it `scale`x`scale` pixels large.
pub fn prediction_overlay(
    pred_logits: &Tensor,
    gt: &Tensor,
    ignore: Option<&Tensor>,
    threshold: f64,
    scale: usize,
) -> (usize, usize, Vec<u8>) {
    let shape = pred_logits.shape();
    let (h, w) = (shape[1], shape[2]);
    let scale = scale.max(1);
    let (oh, ow) = (h * scale, w * scale);
    let mut rgb = vec![0u8; 3 * oh * ow];
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let p = sigmoid(pred_logits.data()[idx]) >= threshold;
            let t = gt.data()[idx] >= 0.5;
            let ignored = ignore.map(|m| m.data()[idx] != 0.0).unwrap_or(false);
            let color = if ignored {
                OVERLAY_IGNORED
            } else if p && t {
                OVERLAY_CORRECT
            } else if !p && t {
                OVERLAY_MISSING
            } else if p && !t {
                OVERLAY_WRONG
            } else {
                OVERLAY_BACKGROUND
            };
            for di in 0..scale {
                for dj in 0..scale {
                    let px = (i * scale + di) * ow + j * scale + dj;
                    rgb[3 * px..3 * px + 3].copy_from_slice(&color);
                }
            }
        }
    }
    (ow, oh, rgb)
}
