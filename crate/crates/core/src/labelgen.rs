//! Supervision targets for the segmentation head.
//!
//! Every ground-truth polygon yields a region mask and a kernel mask (the
//! polygon shrunk by its own offset). Per-instance masks are kept alongside
//! the merged maps because overlapping instances make an id map lossy.

use std::fs;
use std::path::Path;

use image::{GrayAlphaImage, LumaA, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    rasterize_polygon, shrink_offset, shrink_polygon, GeometryError, PolygonSet, RasterMask,
};

/// Default shrink ratio for kernels.
pub const DEFAULT_SHRINK_RATIO: f64 = 0.4;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unknown instance id {0}")]
    UnknownInstance(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("malformed target cache: {0}")]
    Cache(String),
}

/// Training labels for one target image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTargets {
    pub region: RasterMask,
    pub kernel: RasterMask,
    pub region_instances: RasterMask,
    pub kernel_instances: RasterMask,
    /// Ids of the instances that produced labels, ascending.
    pub instance_ids: Vec<u32>,
    pub per_instance_region: Vec<RasterMask>,
    pub per_instance_kernel: Vec<RasterMask>,
    /// Instances dropped for degenerate geometry or an empty raster.
    pub skipped: usize,
    /// Instances whose shrunk kernel vanished and got a one-pixel kernel.
    pub fallback_kernels: usize,
}

impl SegTargets {
    pub fn height(&self) -> usize {
        self.region.height()
    }

    pub fn width(&self) -> usize {
        self.region.width()
    }

    pub fn num_instances(&self) -> usize {
        self.instance_ids.len()
    }

    fn slot(&self, id: u32) -> Result<usize, LabelError> {
        self.instance_ids
            .iter()
            .position(|&i| i == id)
            .ok_or(LabelError::UnknownInstance(id))
    }

    /// Flat indices of the kernel pixels of instance slot `k`.
    pub fn kernel_pixels(&self, k: usize) -> Vec<usize> {
        nonzero_indices(&self.per_instance_kernel[k])
    }

    /// Flat indices of region-but-not-kernel pixels of instance slot `k`.
    pub fn ring_pixels(&self, k: usize) -> Vec<usize> {
        let region = self.per_instance_region[k].data();
        let kernel = self.per_instance_kernel[k].data();
        (0..region.len())
            .filter(|&i| region[i] != 0 && kernel[i] == 0)
            .collect()
    }

    /// Writes the merged maps as one RGBA image, per-instance masks as
    /// grey+alpha images and a JSON sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), LabelError> {
        fs::create_dir_all(dir)?;
        let (h, w) = self.region.dims();
        let merged = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgba([
                (self.region.get(y, x) * 255) as u8,
                (self.kernel.get(y, x) * 255) as u8,
                self.region_instances.get(y, x).min(255) as u8,
                self.kernel_instances.get(y, x).min(255) as u8,
            ])
        });
        merged.save(dir.join(format!("{stem}_targets.png")))?;
        for (k, id) in self.instance_ids.iter().enumerate() {
            let img = GrayAlphaImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                LumaA([
                    (self.per_instance_region[k].get(y, x) * 255) as u8,
                    (self.per_instance_kernel[k].get(y, x) * 255) as u8,
                ])
            });
            img.save(dir.join(format!("{stem}_inst_{id}.png")))?;
        }
        let sidecar = Sidecar {
            height: h,
            width: w,
            instance_ids: self.instance_ids.clone(),
            skipped: self.skipped,
            fallback_kernels: self.fallback_kernels,
        };
        fs::write(
            dir.join(format!("{stem}_targets.json")),
            serde_json::to_string_pretty(&sidecar).map_err(|e| LabelError::Cache(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, LabelError> {
        let text = fs::read_to_string(dir.join(format!("{stem}_targets.json")))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| LabelError::Cache(e.to_string()))?;
        let (h, w) = (sidecar.height, sidecar.width);
        let merged = image::open(dir.join(format!("{stem}_targets.png")))?.to_rgba8();
        if merged.dimensions() != (w as u32, h as u32) {
            return Err(LabelError::Cache("merged map dimensions differ from sidecar".into()));
        }
        let channel = |c: usize, binary: bool| -> Result<RasterMask, LabelError> {
            let data = merged
                .pixels()
                .map(|p| if binary { u32::from(p.0[c] > 127) } else { u32::from(p.0[c]) })
                .collect();
            Ok(RasterMask::from_vec(h, w, data)?)
        };
        let mut per_instance_region = Vec::new();
        let mut per_instance_kernel = Vec::new();
        for id in &sidecar.instance_ids {
            let img = image::open(dir.join(format!("{stem}_inst_{id}.png")))?.to_luma_alpha8();
            let r = img.pixels().map(|p| u32::from(p.0[0] > 127)).collect();
            let k = img.pixels().map(|p| u32::from(p.0[1] > 127)).collect();
            per_instance_region.push(RasterMask::from_vec(h, w, r)?);
            per_instance_kernel.push(RasterMask::from_vec(h, w, k)?);
        }
        Ok(Self {
            region: channel(0, true)?,
            kernel: channel(1, true)?,
            region_instances: channel(2, false)?,
            kernel_instances: channel(3, false)?,
            instance_ids: sidecar.instance_ids,
            per_instance_region,
            per_instance_kernel,
            skipped: sidecar.skipped,
            fallback_kernels: sidecar.fallback_kernels,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    height: usize,
    width: usize,
    instance_ids: Vec<u32>,
    skipped: usize,
    fallback_kernels: usize,
}

fn nonzero_indices(mask: &RasterMask) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v != 0).then_some(i))
        .collect()
}

/// Region pixel nearest to the region's pixel centroid (ties go to the lower
/// raster index).
fn centroid_pixel(region: &RasterMask) -> Option<usize> {
    let w = region.width();
    let idx = nonzero_indices(region);
    if idx.is_empty() {
        return None;
    }
    let n = idx.len() as f64;
    let cy = idx.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
    let cx = idx.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
    idx.into_iter().min_by(|&a, &b| {
        let d = |i: usize| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (y - cy).powi(2) + (x - cx).powi(2)
        };
        d(a).total_cmp(&d(b)).then(a.cmp(&b))
    })
}

/// Builds region/kernel supervision for `polygons` on an `height × width`
/// canvas.
pub fn generate_targets(
    polygons: &PolygonSet,
    height: usize,
    width: usize,
    shrink_ratio: f64,
) -> Result<SegTargets, LabelError> {
    if !(shrink_ratio > 0.0 && shrink_ratio <= 1.0) {
        return Err(GeometryError::BadShrinkRatio(shrink_ratio).into());
    }
    let mut region = RasterMask::zeros(height, width)?;
    let mut kernel = RasterMask::zeros(height, width)?;
    let mut region_instances = RasterMask::zeros(height, width)?;
    let mut kernel_instances = RasterMask::zeros(height, width)?;
    let mut instance_ids = Vec::new();
    let mut per_instance_region = Vec::new();
    let mut per_instance_kernel = Vec::new();
    let mut skipped = 0;
    let mut fallback_kernels = 0;

    let mut ordered: Vec<_> = polygons.iter().collect();
    ordered.sort_by_key(|p| p.id);
    for item in ordered {
        let Ok(offset) = shrink_offset(&item.polygon, shrink_ratio) else {
            skipped += 1;
            continue;
        };
        let region_mask = rasterize_polygon(&item.polygon, height, width)?;
        if region_mask.count_nonzero() == 0 {
            skipped += 1;
            continue;
        }
        let mut kernel_mask = match shrink_polygon(&item.polygon, offset)? {
            Some(shrunk) => rasterize_polygon(&shrunk, height, width)?,
            None => RasterMask::zeros(height, width)?,
        };
        for (k, &r) in kernel_mask.data_mut().iter_mut().zip(region_mask.data()) {
            *k &= r;
        }
        if kernel_mask.count_nonzero() == 0 {
            let i = centroid_pixel(&region_mask).expect("region is non-empty");
            kernel_mask.data_mut()[i] = 1;
            fallback_kernels += 1;
        }
        for i in 0..height * width {
            if region_mask.data()[i] != 0 {
                region.data_mut()[i] = 1;
                region_instances.data_mut()[i] = item.id;
            }
            if kernel_mask.data()[i] != 0 {
                kernel.data_mut()[i] = 1;
                kernel_instances.data_mut()[i] = item.id;
            }
        }
        instance_ids.push(item.id);
        per_instance_region.push(region_mask);
        per_instance_kernel.push(kernel_mask);
    }
    Ok(SegTargets {
        region,
        kernel,
        region_instances,
        kernel_instances,
        instance_ids,
        per_instance_region,
        per_instance_kernel,
        skipped,
        fallback_kernels,
    })
}

/// Pixels `(row, col)` of instance `id` that lie in its region but not in its
/// kernel.
pub fn valid_pixels(targets: &SegTargets, id: u32) -> Result<Vec<(usize, usize)>, LabelError> {
    let k = targets.slot(id)?;
    let w = targets.width();
    Ok(targets.ring_pixels(k).into_iter().map(|i| (i / w, i % w)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{label_components, Connectivity, Polygon};

    fn square_set(x: f64, y: f64, side: f64) -> PolygonSet {
        PolygonSet::from_polygons(vec![Polygon::rect(x, y, x + side, y + side).unwrap()])
    }

    #[test]
    fn square_region_and_kernel_areas() {
        let t = generate_targets(&square_set(50.0, 50.0, 100.0), 200, 200, 0.4).unwrap();
        assert_eq!(t.region.count_nonzero(), 10_000);
        assert_eq!(t.kernel.count_nonzero(), 58 * 58);
        assert_eq!(valid_pixels(&t, 1).unwrap().len(), 10_000 - 3364);
    }

    #[test]
    fn ratio_one_kernel_equals_region() {
        let t = generate_targets(&square_set(3.5, 4.25, 20.0), 40, 40, 1.0).unwrap();
        assert_eq!(t.kernel, t.region);
        assert!(valid_pixels(&t, 1).unwrap().is_empty());
    }

    #[test]
    fn tiny_instance_gets_single_pixel_kernel() {
        // a 2×0.6 sliver: its shrunk polygon misses every pixel center
        let set = PolygonSet::from_polygons(vec![Polygon::rect(4.0, 4.0, 6.0, 4.6).unwrap()]);
        let t = generate_targets(&set, 10, 10, 0.4).unwrap();
        assert_eq!(t.fallback_kernels, 1);
        assert_eq!(t.region.count_nonzero(), 2);
        assert_eq!(t.kernel.count_nonzero(), 1);
        assert_eq!(valid_pixels(&t, 1).unwrap().len(), t.region.count_nonzero() - 1);
    }

    #[test]
    fn overlapping_regions_keep_disjoint_kernels() {
        // 50×50 squares overlapping by 10 px (20% of the width)
        let set = PolygonSet::from_polygons(vec![
            Polygon::rect(10.0, 10.0, 60.0, 60.0).unwrap(),
            Polygon::rect(50.0, 10.0, 100.0, 60.0).unwrap(),
        ]);
        let t = generate_targets(&set, 80, 120, 0.4).unwrap();
        let r1 = &t.per_instance_region[0];
        let r2 = &t.per_instance_region[1];
        let overlap = r1.data().iter().zip(r2.data()).filter(|(a, b)| **a != 0 && **b != 0).count();
        assert_eq!(overlap, 10 * 50);
        assert_eq!(r1.count_nonzero(), 2500);
        assert_eq!(r2.count_nonzero(), 2500);
        let k1 = &t.per_instance_kernel[0];
        let k2 = &t.per_instance_kernel[1];
        assert!(k1.data().iter().zip(k2.data()).all(|(a, b)| *a == 0 || *b == 0));
        let (_, n) = label_components(&t.kernel.to_bools(), 80, 120, Connectivity::Four);
        assert_eq!(n, 2);
    }

    #[test]
    fn unknown_id_and_bad_ratio() {
        let t = generate_targets(&square_set(0.0, 0.0, 8.0), 10, 10, 0.4).unwrap();
        assert!(matches!(valid_pixels(&t, 7), Err(LabelError::UnknownInstance(7))));
        assert!(generate_targets(&PolygonSet::new(), 10, 10, 0.0).is_err());
    }

    #[test]
    fn off_canvas_polygon_is_skipped() {
        let t = generate_targets(&square_set(100.0, 100.0, 5.0), 10, 10, 0.4).unwrap();
        assert_eq!(t.skipped, 1);
        assert_eq!(t.num_instances(), 0);
    }

    #[test]
    fn cache_round_trip() {
        let set = PolygonSet::from_polygons(vec![
            Polygon::rect(2.0, 2.0, 20.0, 14.0).unwrap(),
            Polygon::rect(15.0, 10.0, 30.0, 28.0).unwrap(),
        ]);
        let t = generate_targets(&set, 32, 32, 0.4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path(), "pair7").unwrap();
        let back = SegTargets::load(dir.path(), "pair7").unwrap();
        assert_eq!(back, t);
    }
}
