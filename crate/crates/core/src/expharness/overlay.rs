//! Prediction/truth overlays.
//!
//! The base image is converted to luminance and contrast-stretched to
//! `[0, 254]`. Marked pixels are drawn at half that grey level with `+128`
//! on one channel: green where prediction and truth agree on panel, red
//! where only the prediction has panel, blue where only the truth has.
//! Background agreement stays grey, so every marked pixel has exactly one
//! channel above the other two.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::{ExperimentError, Result};
use crate::imagery::{ImageTile, ImageryError, MaskTile};

/// Added to the halved grey of true-positive pixels.
pub const AGREE_TINT: [u8; 3] = [0, 128, 0];
/// Added to the halved grey of false-positive pixels.
pub const PRED_ONLY_TINT: [u8; 3] = [128, 0, 0];
/// Added to the halved grey of false-negative pixels.
pub const TRUTH_ONLY_TINT: [u8; 3] = [0, 0, 128];

pub fn overlay_image(image: &ImageTile, pred: &MaskTile, truth: &MaskTile) -> Result<RgbImage> {
    let (w, h) = (image.width(), image.height());
    for m in [pred, truth] {
        if !m.same_dims(image) {
            return Err(ExperimentError::Imagery(ImageryError::DimensionMismatch {
                path: "overlay".into(),
                image_w: w,
                image_h: h,
                mask_w: m.width(),
                mask_h: m.height(),
            }));
        }
    }
    let luma: Vec<f32> = image
        .pixels()
        .iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let lo = luma.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = luma.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let grey = |v: f32| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 254.0).round() as u8
        } else {
            127
        }
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let g = grey(luma[y * w + x]);
        let tint = match (pred.get(x, y), truth.get(x, y)) {
            (1, 1) => AGREE_TINT,
            (1, 0) => PRED_ONLY_TINT,
            (0, 1) => TRUTH_ONLY_TINT,
            _ => return Rgb([g, g, g]),
        };
        let half = g / 2;
        Rgb([half + tint[0], half + tint[1], half + tint[2]])
    }))
}

/// Writes [`overlay_image`] as a PNG.
pub fn export_overlay(
    image: &ImageTile,
    pred: &MaskTile,
    truth: &MaskTile,
    path: &Path,
) -> Result<()> {
    overlay_image(image, pred, truth)?.save(path).map_err(|e| {
        ExperimentError::Imagery(ImageryError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    })
}
