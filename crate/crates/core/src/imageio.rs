//! Plain image and grid dumps for inspection.
//!
//! Binary PGM (`P5`) for single-channel maps, binary PPM (`P6`) for RGB
//! images, and full-precision text grids whose numbers round-trip exactly
//! through parsing (shortest-representation formatting).

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<BufWriter<std::fs::File>> {
    Ok(BufWriter::new(std::fs::File::create(path)?))
}

/// Write one channel as an 8-bit grayscale PGM, linearly mapping
/// `[lo, hi]` to `[0, 255]`.  Pass the channel's own extrema to normalize,
/// or fixed bounds to compare dumps across files.
pub fn write_pgm(path: &Path, values: &[f32], h: usize, w: usize, lo: f32, hi: f32) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Config(format!(
            "pgm payload {} does not match {h}x{w}",
            values.len()
        )));
    }
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "pgm range [{lo}, {hi}] is empty"
        )));
    }
    let mut out = open(path)?;
    write!(out, "P5\n{w} {h}\n255\n")?;
    let scale = 255.0 / (hi - lo);
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| ((v - lo) * scale).clamp(0.0, 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Write a `3 x h x w` tensor with values in `[0, 1]` as a binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.shape().as_chw("write_ppm")?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "write_ppm",
            shape: image.shape().to_string(),
            reason: "expected exactly 3 channels".into(),
        });
    }
    let values = image.value_vec();
    let mut out = open(path)?;
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * h * w);
    for pix in 0..h * w {
        for ch in 0..3 {
            bytes.push((values[ch * h * w + pix] * 255.0).clamp(0.0, 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Write a label grid as a PGM, spreading ids over the gray range so
/// distinct classes are visually separable.
pub fn write_label_pgm(path: &Path, labels: &LabelMap, max_id: u16) -> Result<()> {
    let values: Vec<f32> = labels.data().iter().map(|&v| v as f32).collect();
    write_pgm(
        path,
        &values,
        labels.height(),
        labels.width(),
        0.0,
        max_id.max(1) as f32,
    )
}

/// Write one channel as a whitespace-separated text grid at full `f32`
/// precision: parsing every number back yields the original bit pattern.
pub fn write_text_grid(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Config(format!(
            "grid payload {} does not match {h}x{w}",
            values.len()
        )));
    }
    let mut out = open(path)?;
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{}", values[y * w + x])).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    out.flush()?;
    Ok(())
}
