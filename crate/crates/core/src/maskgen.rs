//! Depth-validity masks and their per-stage nearest-neighbour pyramid.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::types::{DepthImage, Mask, MaskPyramid, NUM_STAGES};

/// 1 where the depth reading is positive, 0 where it is missing.
pub fn generate_mask(depth: &DepthImage) -> Result<Mask> {
    depth.validate()?;
    let data = depth.data().iter().map(|&v| (v > 0.0) as u8).collect();
    Mask::new(depth.height(), depth.width(), data)
}

/// Source index for target index `t` when resampling `src` cells onto `dst`.
///
/// `floor(t · src / dst)`, evaluated in integers.
#[inline]
pub fn nearest_source_index(t: usize, src: usize, dst: usize) -> usize {
    t * src / dst
}

/// Nearest-neighbour resample to `height × width`; values are copied, never blended.
pub fn downsample_nearest(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("target shape must be positive"));
    }
    if height > mask.height() || width > mask.width() {
        return Err(Error::invalid(format!(
            "cannot downsample a {}x{} mask to the larger shape {height}x{width}",
            mask.height(),
            mask.width()
        )));
    }
    let rows: Vec<usize> = (0..height).map(|t| nearest_source_index(t, mask.height(), height)).collect();
    let cols: Vec<usize> = (0..width).map(|t| nearest_source_index(t, mask.width(), width)).collect();
    let mut data = Vec::with_capacity(height * width);
    for &sy in &rows {
        for &sx in &cols {
            data.push(mask.get(sy, sx));
        }
    }
    Mask::new(height, width, data)
}

/// Downsample `mask` to each of the five encoder stage shapes.
pub fn build_pyramid(mask: &Mask, stage_shapes: &[(usize, usize); NUM_STAGES]) -> Result<MaskPyramid> {
    for pair in stage_shapes.windows(2) {
        if pair[1].0 >= pair[0].0 || pair[1].1 >= pair[0].1 {
            return Err(Error::invalid(format!(
                "stage shapes must strictly decrease, got {:?} then {:?}",
                pair[0], pair[1]
            )));
        }
    }
    let mut levels = Vec::with_capacity(NUM_STAGES);
    for &(h, w) in stage_shapes {
        levels.push(downsample_nearest(mask, h, w)?);
    }
    let levels: [Mask; NUM_STAGES] = levels.try_into().expect("five levels");
    Ok(MaskPyramid::from_levels(levels))
}

/// Encoder stage resolutions for an input of `height × width`
/// (strides 2, 4, 8, 16, 32). Both sides must be divisible by 32.
pub fn stage_shapes(height: usize, width: usize) -> Result<[(usize, usize); NUM_STAGES]> {
    if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
        return Err(Error::invalid(format!(
            "input resolution {height}x{width} must be positive and divisible by 32"
        )));
    }
    Ok(core::array::from_fn(|i| (height >> (i + 1), width >> (i + 1))))
}
