//! Pair manifests and on-disk datasets.
//!
//! A manifest is JSON:
//! `{"version": 1, "records": [{"pair_id", "split", "level", "ref_image",
//! "ref_mask", "tgt_image", "tgt_polygons"}]}` with paths relative to the
//! manifest's directory. Masks are 0/255 greyscale images, polygons use the
//! geometry JSON schema.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Level, Sample};
use crate::geometry::{PolygonSet, RasterMask};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::Schema(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub split: Split,
    pub level: Level,
    pub ref_image: String,
    pub ref_mask: String,
    pub tgt_image: String,
    pub tgt_polygons: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

/// Splits `pair_ids` 80/10/10: ids are ordered by the SHA-256 of the id; the
/// first tenth (rounded) goes to test, the next to val, the rest to train.
pub fn assign_splits(pair_ids: &[String]) -> Vec<Split> {
    let n = pair_ids.len();
    let tenth = (n as f64 * 0.1).round() as usize;
    let mut order: Vec<(Vec<u8>, usize)> =
        pair_ids.iter().enumerate().map(|(i, id)| (Sha256::digest(id.as_bytes()).to_vec(), i)).collect();
    order.sort();
    let mut splits = vec![Split::Train; n];
    for (rank, (_, i)) in order.into_iter().enumerate() {
        splits[i] = if rank < tenth {
            Split::Test
        } else if rank < 2 * tenth {
            Split::Val
        } else {
            Split::Train
        };
    }
    splits
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// Writes every sample's artifacts under `out_dir` and a `manifest.json`
/// with hash-based splits. Returns the manifest.
pub fn write_dataset(samples: &[Sample], out_dir: &Path) -> Result<Manifest, DataError> {
    for sub in ["images", "masks", "polygons"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| DataError::io(&d, e))?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.pair_id.clone()).collect();
    if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
        let mut seen = HashSet::new();
        let dup = ids.iter().find(|id| !seen.insert(*id)).expect("duplicate exists");
        return Err(DataError::SplitLeak(dup.clone()));
    }
    let splits = assign_splits(&ids);
    let mut records = Vec::with_capacity(samples.len());
    for (s, split) in samples.iter().zip(splits) {
        s.validate()?;
        let id = &s.pair_id;
        let rec = ManifestRecord {
            pair_id: id.clone(),
            split,
            level: s.level,
            ref_image: format!("images/{id}_ref.png"),
            ref_mask: format!("masks/{id}_mask.png"),
            tgt_image: format!("images/{id}_tgt.png"),
            tgt_polygons: format!("polygons/{id}.json"),
        };
        s.reference_image.save(out_dir.join(&rec.ref_image))?;
        s.target_image.save(out_dir.join(&rec.tgt_image))?;
        let (h, w) = s.reference_mask.dims();
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if s.reference_mask.get(y as usize, x as usize) != 0 { 255 } else { 0 }])
        });
        mask.save(out_dir.join(&rec.ref_mask))?;
        let json = serde_json::to_string(&s.target_polygons).expect("polygons serialize");
        write_file(&out_dir.join(&rec.tgt_polygons), json.as_bytes())?;
        records.push(rec);
    }
    let manifest = Manifest { version: MANIFEST_VERSION, records, base_dir: out_dir.to_path_buf() };
    write_file(&out_dir.join("manifest.json"), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

/// Reads and validates a manifest: schema, version, unique pair ids and
/// existence of every referenced file.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::Schema(format!("unsupported manifest version {}", manifest.version)));
    }
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    for r in &manifest.records {
        if !seen.insert(r.pair_id.as_str()) {
            return Err(DataError::SplitLeak(r.pair_id.clone()));
        }
        for p in [&r.ref_image, &r.ref_mask, &r.tgt_image, &r.tgt_polygons] {
            if !manifest.base_dir.join(p).is_file() {
                return Err(DataError::DanglingPath { pair_id: r.pair_id.clone(), path: p.clone() });
            }
        }
    }
    Ok(manifest)
}

/// Loads the artifacts of one record.
pub fn load_sample(manifest: &Manifest, record: &ManifestRecord) -> Result<Sample, DataError> {
    let base = &manifest.base_dir;
    let reference_image = image::open(base.join(&record.ref_image))?.to_rgb8();
    let target_image = image::open(base.join(&record.tgt_image))?.to_rgb8();
    let mask = image::open(base.join(&record.ref_mask))?.to_luma8();
    let (w, h) = mask.dimensions();
    let bits: Vec<bool> = mask.pixels().map(|p| p[0] >= 128).collect();
    let reference_mask = RasterMask::from_bools(h as usize, w as usize, &bits)?;
    let poly_path = base.join(&record.tgt_polygons);
    let text = fs::read_to_string(&poly_path).map_err(|e| DataError::io(&poly_path, e))?;
    let target_polygons: PolygonSet = serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))?;
    let sample = Sample {
        reference_image,
        reference_mask,
        target_image,
        target_polygons,
        level: record.level,
        pair_id: record.pair_id.clone(),
    };
    sample.validate()?;
    Ok(sample)
}
