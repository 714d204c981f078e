//! PNG codecs for the four grid types.

use std::path::Path;

use amfnet_core::types::{DepthImage, LabelMap, Mask, RgbImage};
use image::{GrayImage, ImageBuffer, Luma, RgbImage as RgbBuffer};

use crate::error::{Error, Result};

/// Class colors for overlays: background, drivable road, negative obstacle.
pub const PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [128, 64, 128], [220, 20, 60]];

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn dims(w: usize, h: usize) -> (u32, u32) {
    (w as u32, h as u32)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::file(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let img = img.into_rgb8();
    Ok(RgbImage::from_u8_interleaved(img.height() as usize, img.width() as usize, img.as_raw())?)
}

pub fn write_rgb(path: &Path, rgb: &RgbImage) -> Result<()> {
    let (w, h) = dims(rgb.width(), rgb.height());
    let buf = RgbBuffer::from_raw(w, h, rgb.to_u8_interleaved()).expect("buffer size matches dimensions");
    save(path, &buf)
}

/// 16-bit single-channel depth; 0 marks a missing reading.
pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let img = open(path)?;
    if img.color() != image::ColorType::L16 {
        return Err(Error::file(path, format!("expected 16-bit grayscale depth, found {:?}", img.color())));
    }
    let img = img.into_luma16();
    Ok(DepthImage::from_u16(img.height() as usize, img.width() as usize, img.as_raw())?)
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    let (w, h) = dims(depth.width(), depth.height());
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, depth.to_u16()).expect("buffer size matches dimensions");
    save(path, &buf)
}

/// 8-bit class indices in {0, 1, 2}.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::file(path, format!("expected 8-bit indexed labels, found {:?}", img.color())));
    }
    let img = img.into_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, img.into_raw()).map_err(|e| Error::file(path, e.to_string()))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (w, h) = dims(labels.width(), labels.height());
    save(path, &GrayImage::from_raw(w, h, labels.data().to_vec()).expect("buffer size matches dimensions"))
}

/// Valid pixels white, missing depth black.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (w, h) = dims(mask.width(), mask.height());
    let data = mask.data().iter().map(|&v| v * 255).collect();
    save(path, &GrayImage::from_raw(w, h, data).expect("buffer size matches dimensions"))
}

/// Grayscale heat map of values in `[0, 1]`.
pub fn write_gray(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let data = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = dims(width, height);
    save(path, &GrayImage::from_raw(w, h, data).expect("buffer size matches dimensions"))
}

/// Class colors blended over the input image.
pub fn write_overlay(path: &Path, rgb: &RgbImage, labels: &LabelMap, alpha: f32) -> Result<()> {
    let base = rgb.to_u8_interleaved();
    let mut out = Vec::with_capacity(base.len());
    for (px, &l) in base.chunks(3).zip(labels.data()) {
        let color = PALETTE[l as usize];
        for c in 0..3 {
            let v = if l == 0 {
                px[c] as f32
            } else {
                (1.0 - alpha) * px[c] as f32 + alpha * color[c] as f32
            };
            out.push(v.round() as u8);
        }
    }
    let (w, h) = dims(labels.width(), labels.height());
    save(path, &RgbBuffer::from_raw(w, h, out).expect("buffer size matches dimensions"))
}
