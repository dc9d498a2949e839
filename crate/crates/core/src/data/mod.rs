//! Dataset layer: samples, manifests, preprocessing, augmentation and the
//! synthetic document-pair generator.

mod augment;
mod manifest;
mod preprocess;
mod synth;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, PolygonSet, RasterMask};

pub use augment::{augment, augment_with, AugmentParams, AugmentProbabilities};
pub use manifest::{
    assign_splits, load_manifest, load_sample, write_dataset, Manifest, ManifestRecord, Split, MANIFEST_VERSION,
};
pub use preprocess::{preprocess, PreparedPair};
pub use synth::{synth_pair, synth_pair_sized, Archetype, Rect, SynthInfo, DEFAULT_CANVAS};

/// Benchmark difficulty tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    /// Similar appearance, similar position.
    I,
    /// Similar appearance, different position.
    II,
    /// Different appearance and position.
    III,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::I, Level::II, Level::III];

    pub fn name(self) -> &'static str {
        match self {
            Level::I => "I",
            Level::II => "II",
            Level::III => "III",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Level {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" | "1" => Ok(Level::I),
            "II" | "2" => Ok(Level::II),
            "III" | "3" => Ok(Level::III),
            _ => Err(DataError::Schema(format!("unknown level {s:?}"))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest schema violation: {0}")]
    Schema(String),
    #[error("record {pair_id}: missing file {path}")]
    DanglingPath { pair_id: String, path: String },
    #[error("pair id {0} appears more than once")]
    SplitLeak(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

/// One reference/target pair with its prompt and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub reference_image: RgbImage,
    /// Binary prompt on the reference image.
    pub reference_mask: RasterMask,
    pub target_image: RgbImage,
    pub target_polygons: PolygonSet,
    pub level: Level,
    pub pair_id: String,
}

impl Sample {
    /// Checks the sample invariants: mask matches the reference, mask is
    /// binary and non-empty, target polygons lie inside the target.
    pub fn validate(&self) -> Result<(), DataError> {
        let (rw, rh) = self.reference_image.dimensions();
        let (tw, th) = self.target_image.dimensions();
        if rw == 0 || rh == 0 || tw == 0 || th == 0 {
            return Err(DataError::InvalidSample("zero-sized image".into()));
        }
        if self.reference_mask.dims() != (rh as usize, rw as usize) {
            return Err(DataError::InvalidSample("mask and reference dims differ".into()));
        }
        if !self.reference_mask.is_binary() || self.reference_mask.count_nonzero() == 0 {
            return Err(DataError::InvalidSample("prompt mask must be binary and non-empty".into()));
        }
        for ip in self.target_polygons.iter() {
            let (x0, y0, x1, y1) = ip.polygon.bounds();
            if x0 < 0.0 || y0 < 0.0 || x1 > f64::from(tw) || y1 > f64::from(th) {
                return Err(DataError::InvalidSample(format!("polygon {} leaves the target", ip.id)));
            }
        }
        Ok(())
    }
}
