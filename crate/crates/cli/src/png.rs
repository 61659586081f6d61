//! 8-bit PNG frame grids for inspection.

use std::path::Path;

use image::{Rgb, RgbImage};
use vsr_core::{Error, Result, VideoBatch};

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Frames of a single clip laid out left to right.
pub fn frame_grid(clip: &VideoBatch<f32>) -> Result<RgbImage> {
    let (b, f, c, h, w) = clip.dim();
    if b != 1 || c != 3 {
        return Err(Error::Shape(format!("frame grids need one RGB clip, got {:?}", clip.dim())));
    }
    Ok(RgbImage::from_fn((f * w) as u32, h as u32, |x, y| {
        let (fi, xi, yi) = (x as usize / w, x as usize % w, y as usize);
        Rgb([0, 1, 2].map(|ci| to_u8(clip.data[[0, fi, ci, yi, xi]])))
    }))
}

pub fn write_frame_grid(path: &Path, clip: &VideoBatch<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    frame_grid(clip)?
        .save(path)
        .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))
}
