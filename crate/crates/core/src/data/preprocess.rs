//! Resizing a sample to the network input and normalizing it.

use image::imageops::{resize, FilterType};

use super::{DataError, Level, Sample};
use crate::geometry::{PolygonSet, RasterMask};
use crate::model::normalize_image;
use crate::nn::Tensor;

/// A sample at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    /// Normalized `[3, H, W]` reference image.
    pub reference: Tensor,
    /// Binary prompt at network resolution, row-major.
    pub prompt: Vec<f64>,
    /// Normalized `[3, H, W]` target image.
    pub target: Tensor,
    /// Target instances in network coordinates.
    pub target_polygons: PolygonSet,
    pub level: Level,
    pub pair_id: String,
    /// Original target `(height, width)`.
    pub target_size: (usize, usize),
}

fn rgb_tensor(img: &image::RgbImage, height: usize, width: usize) -> Tensor {
    let resized = if img.dimensions() == (width as u32, height as u32) {
        img.clone()
    } else {
        resize(img, width as u32, height as u32, FilterType::Triangle)
    };
    normalize_image(resized.as_raw(), height, width)
}

/// Bilinear image resize, nearest-neighbour prompt resize and vertex scaling
/// of the target polygons by `(W'/W, H'/H)`.
pub fn preprocess(sample: &Sample, size: (usize, usize)) -> Result<PreparedPair, DataError> {
    let (h, w) = size;
    let (rw, rh) = sample.reference_image.dimensions();
    let (tw, th) = sample.target_image.dimensions();
    if h == 0 || w == 0 || rw == 0 || rh == 0 || tw == 0 || th == 0 {
        return Err(DataError::InvalidSample("zero-sized image".into()));
    }
    let mask: RasterMask = sample.reference_mask.resize_nearest(h, w)?;
    let sx = w as f64 / f64::from(tw);
    let sy = h as f64 / f64::from(th);
    let target_polygons = if sx == 1.0 && sy == 1.0 {
        sample.target_polygons.clone()
    } else {
        sample.target_polygons.filter_map(|p| p.scale_xy(sx, sy).ok())
    };
    Ok(PreparedPair {
        reference: rgb_tensor(&sample.reference_image, h, w),
        prompt: mask.data().iter().map(|&v| f64::from(u8::from(v != 0))).collect(),
        target: rgb_tensor(&sample.target_image, h, w),
        target_polygons,
        level: sample.level,
        pair_id: sample.pair_id.clone(),
        target_size: (th as usize, tw as usize),
    })
}
