//! Dense integer label grids.
//!
//! Class ids are small unsigned integers with `0` reserved for background.
//! A [`LabelMap`] is a row-major `height x width` grid of ids; it carries no
//! gradient machinery and is the common currency between data generation,
//! pseudo-labeling, loss masking, and evaluation.

use crate::error::{Error, Result};

/// The reserved background id.
pub const BACKGROUND: u16 = 0;

/// A row-major grid of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    /// Build from existing row-major data.
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<LabelMap> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "label map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Config(format!(
                "label map data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    /// A grid filled with one id.
    pub fn filled(height: usize, width: usize, id: u16) -> LabelMap {
        LabelMap {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u16) {
        self.data[y * self.width + x] = id;
    }

    /// Copy with every id outside `keep` (and outside background) replaced
    /// by background.  This is how full annotations collapse to a single
    /// step's view of the world.
    pub fn remap_keep(&self, keep: &[u16]) -> LabelMap {
        let data = self
            .data
            .iter()
            .map(|&id| {
                if id == BACKGROUND || keep.contains(&id) {
                    id
                } else {
                    BACKGROUND
                }
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Number of pixels carrying `id`.
    pub fn count(&self, id: u16) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }

    /// Sorted list of distinct ids present in the grid.
    pub fn present_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.data.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
