//! Image, depth, mask and label grids shared across the crate.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Shape, Tensor};

/// Number of segmentation classes: background, drivable road, negative obstacle.
pub const NUM_CLASSES: usize = 3;

/// Number of encoder stages (and masks in a pyramid).
pub const NUM_STAGES: usize = 5;

fn check_dims(height: usize, width: usize, len: usize, per_pixel: usize, what: &str) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("{what} must have positive height and width")));
    }
    if len != height * width * per_pixel {
        return Err(Error::invalid(format!(
            "{what} of {height}x{width} needs {} values, got {len}",
            height * width * per_pixel
        )));
    }
    Ok(())
}

/// Three-channel image, channels-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, data.len(), 3, "rgb image")?;
        if let Some(index) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid(format!("rgb value {} at element {index} outside [0,1]", data[index])));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn from_u8_interleaved(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        check_dims(height, width, rgb.len(), 3, "rgb image")?;
        let plane = height * width;
        let mut data = alloc::vec![0.0f32; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_feature_map(&self) -> FeatureMap<f32> {
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), self.data.clone()).expect("validated size")
    }

    pub fn flip_horizontal(&self) -> Self {
        RgbImage {
            height: self.height,
            width: self.width,
            data: flip_planes(&self.data, self.width),
        }
    }
}

/// Raw single-channel depth readings. Zero means "no measurement".
///
/// Values are only checked for count at construction; operations that
/// consume depth reject negative or non-finite readings.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, data.len(), 1, "depth image")?;
        Ok(DepthImage { height, width, data })
    }

    pub fn from_u16(height: usize, width: usize, raw: &[u16]) -> Result<Self> {
        Self::new(height, width, raw.iter().map(|&v| v as f32).collect())
    }

    /// Readings rounded and saturated to 16 bits.
    pub fn to_u16(&self) -> Vec<u16> {
        self.data.iter().map(|&v| v.round().clamp(0.0, 65535.0) as u16).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn flip_horizontal(&self) -> Self {
        DepthImage {
            height: self.height,
            width: self.width,
            data: flip_planes(&self.data, self.width),
        }
    }

    /// Reject negative or non-finite readings.
    pub fn validate(&self) -> Result<()> {
        for (index, &value) in self.data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { what: "depth", index });
            }
            if value < 0.0 {
                return Err(Error::NegativeDepth { index, value });
            }
        }
        Ok(())
    }
}

/// Binary validity map; every element is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, data.len(), 1, "mask")?;
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryMask { index, value: data[index] });
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: alloc::vec![value as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_feature_map(&self) -> FeatureMap<f32> {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("validated size")
    }
}

/// Masks M1..M5 at the spatial shapes of the five encoder stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPyramid {
    levels: [Mask; NUM_STAGES],
}

impl MaskPyramid {
    pub(crate) fn from_levels(levels: [Mask; NUM_STAGES]) -> Self {
        MaskPyramid { levels }
    }

    pub fn level(&self, stage: StageIndex) -> &Mask {
        &self.levels[stage.zero_based()]
    }

    pub fn levels(&self) -> &[Mask; NUM_STAGES] {
        &self.levels
    }
}

/// Per-pixel class indices in `{0, 1, 2}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, data.len(), 1, "label map")?;
        if let Some(index) = data.iter().position(|&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel { index, value: data[index] });
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn flip_horizontal(&self) -> Self {
        LabelMap {
            height: self.height,
            width: self.width,
            data: flip_planes(&self.data, self.width),
        }
    }
}

/// Encoder stage number, 1 through 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageIndex(u8);

impl StageIndex {
    pub fn new(n: usize) -> Result<Self> {
        if (1..=NUM_STAGES).contains(&n) {
            Ok(StageIndex(n as u8))
        } else {
            Err(Error::invalid(format!("stage index {n} outside 1..=5")))
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    pub fn zero_based(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl DoubleEndedIterator<Item = StageIndex> + ExactSizeIterator {
        (1..=NUM_STAGES as u8).map(StageIndex)
    }
}

impl core::fmt::Display for StageIndex {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn flip_planes<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Scale raw depth into `[0, 1]` by `divisor`, clamping far readings.
///
/// Zero readings map to exactly zero.
pub fn normalize_depth(raw: &DepthImage, divisor: f32) -> Result<FeatureMap<f32>> {
    if !(divisor.is_finite() && divisor > 0.0) {
        return Err(Error::invalid(format!("depth divisor must be positive, got {divisor}")));
    }
    if let Some(index) = raw.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "depth", index });
    }
    let data = raw.data.iter().map(|&v| (v / divisor).clamp(0.0, 1.0)).collect();
    Tensor::from_vec(Shape::new(1, 1, raw.height, raw.width), data)
}
