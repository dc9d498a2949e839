//! Single-pair matching at original image resolution.

use image::RgbImage;

use crate::data::{preprocess, DataError, Level, Sample};
use crate::geometry::{GeometryError, PolygonSet, RasterMask};
use crate::model::{ModelError, RoiMatcher};
use crate::postprocess::{decode, BoundingBox, DecodeConfig, DecodeError, InstanceSummary, MatchResult};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("network produced non-finite values")]
    NonFinite,
}

/// Matches mapped back to the target image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Instances with boxes and areas in target pixel coordinates.
    pub instances: Vec<InstanceSummary>,
    /// Merged mask at target resolution.
    pub mask: RasterMask,
    /// Decoded result at network resolution.
    pub network_result: MatchResult,
}

/// Maps an inclusive box between resolutions so it covers every source
/// pixel.
pub fn scale_box(b: &BoundingBox, sx: f64, sy: f64) -> [usize; 4] {
    [
        (b.x0 as f64 * sx).floor() as usize,
        (b.y0 as f64 * sy).floor() as usize,
        (((b.x1 + 1) as f64 * sx).ceil() as usize).saturating_sub(1),
        (((b.y1 + 1) as f64 * sy).ceil() as usize).saturating_sub(1),
    ]
}

/// Resizes the pair to the network input, runs the model, decodes and maps
/// the result back to the target's size.
pub fn match_images(
    model: &RoiMatcher,
    decode_config: &DecodeConfig,
    reference_image: &RgbImage,
    reference_mask: &RasterMask,
    target_image: &RgbImage,
) -> Result<Prediction, InferenceError> {
    let sample = Sample {
        reference_image: reference_image.clone(),
        reference_mask: reference_mask.clone(),
        target_image: target_image.clone(),
        target_polygons: PolygonSet::new(),
        level: Level::I,
        pair_id: String::new(),
    };
    sample.validate().map_err(|e| InferenceError::Input(e.to_string()))?;
    let pair = preprocess(&sample, model.config().input_size)?;
    let out = model.predict(&pair.reference, &pair.prompt, &pair.target)?;
    if !out.is_finite() {
        return Err(InferenceError::NonFinite);
    }
    let result = decode(&out, decode_config)?;
    let (tw, th) = target_image.dimensions();
    let (h, w) = model.config().input_size;
    let (sx, sy) = (f64::from(tw) / w as f64, f64::from(th) / h as f64);
    let mask = result.merged.resize_nearest(th as usize, tw as usize)?;
    let mut instances = result.summaries();
    for (s, inst) in instances.iter_mut().zip(&result.instances) {
        s.bbox = scale_box(&inst.bbox, sx, sy);
        s.area = (inst.area as f64 * sx * sy).round() as usize;
    }
    Ok(Prediction { instances, mask, network_result: result })
}
