use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use nalgebra::DMatrix;
use pfa_core::{PfaError, Result};

const CELL: u32 = 12;
const POSITIVE: [u8; 3] = [205, 91, 69];
const NEGATIVE: [u8; 3] = [139, 10, 80];

/// White at zero, shading linearly in `|v| / max|v|` toward coral for
/// positive and deep pink for negative entries. Non-finite cells are grey.
pub fn colour(v: f64, scale: f64) -> [u8; 3] {
    if !v.is_finite() {
        return [128, 128, 128];
    }
    let t = if scale > 0.0 {
        (v.abs() / scale).min(1.0)
    } else {
        0.0
    };
    let target = if v >= 0.0 { POSITIVE } else { NEGATIVE };
    target.map(|c| (255.0 - t * (255.0 - c as f64)).round() as u8)
}

pub fn render_png(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let scale = m
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let (rows, cols) = m.shape();
    let img = RgbImage::from_fn(cols as u32 * CELL, rows as u32 * CELL, |x, y| {
        Rgb(colour(m[((y / CELL) as usize, (x / CELL) as usize)], scale))
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| PfaError::Io(std::io::Error::other(e)))?;
    Ok(buf.into_inner())
}
