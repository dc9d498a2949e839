//! Decoding network output into region instances.
//!
//! Kernel components fix the number of instances. Every other pixel above the
//! region threshold joins the kernel whose similarity centroid is nearest,
//! provided it is close enough; a single pass makes the result independent of
//! visiting order.

use serde::{Deserialize, Serialize};

use crate::geometry::{label_components, Connectivity, RasterMask};
use crate::model::{SegOutput, SIMILARITY_DIM};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("malformed output: {0}")]
    Output(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub kernel_threshold: f64,
    pub region_threshold: f64,
    pub assign_distance: f64,
    pub min_area_px: usize,
    pub connectivity: Connectivity,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            kernel_threshold: 0.5,
            region_threshold: 0.5,
            assign_distance: 6.0,
            min_area_px: 16,
            connectivity: Connectivity::Four,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let in_unit = |t: f64| t > 0.0 && t < 1.0;
        if !in_unit(self.kernel_threshold) || !in_unit(self.region_threshold) {
            return Err(DecodeError::Config("thresholds must lie in (0, 1)".into()));
        }
        if !(self.assign_distance > 0.0) {
            return Err(DecodeError::Config("assign_distance must be positive".into()));
        }
        Ok(())
    }
}

/// Inclusive pixel bounds `(x0, y0)`–`(x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    /// Tight box of the non-zero pixels, `None` for an empty mask.
    pub fn of_mask(mask: &RasterMask) -> Option<Self> {
        let w = mask.width();
        let mut b: Option<Self> = None;
        for (i, _) in mask.data().iter().enumerate().filter(|(_, &v)| v != 0) {
            let (y, x) = (i / w, i % w);
            b = Some(match b {
                None => Self { x0: x, y0: y, x1: x, y1: y },
                Some(b) => Self { x0: b.x0.min(x), y0: b.y0.min(y), x1: b.x1.max(x), y1: b.y1.max(y) },
            });
        }
        b
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// Rank of the seeding kernel among the kernels that passed the area
    /// filter, starting at 1.
    pub id: u32,
    pub mask: RasterMask,
    pub bbox: BoundingBox,
    pub area: usize,
    /// Mean region probability over the mask.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub instances: Vec<Instance>,
    /// Union of the instance masks.
    pub merged: RasterMask,
}

/// Serializable summary of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    pub area: usize,
    pub score: f64,
}

impl MatchResult {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            instances: Vec::new(),
            merged: RasterMask::zeros(height, width).expect("non-zero dims"),
        }
    }

    pub fn summaries(&self) -> Vec<InstanceSummary> {
        self.instances
            .iter()
            .map(|i| InstanceSummary { id: i.id, bbox: i.bbox.as_array(), area: i.area, score: i.score })
            .collect()
    }

    /// Label map with each instance's id at its pixels.
    pub fn label_map(&self) -> RasterMask {
        let mut m = RasterMask::zeros(self.merged.height(), self.merged.width()).expect("non-zero dims");
        for inst in &self.instances {
            for (o, &v) in m.data_mut().iter_mut().zip(inst.mask.data()) {
                if v != 0 {
                    *o = inst.id;
                }
            }
        }
        m
    }
}

/// Tight boxes of every instance, in instance order.
pub fn boxes_from_masks(result: &MatchResult) -> Vec<BoundingBox> {
    result.instances.iter().filter_map(|i| BoundingBox::of_mask(&i.mask)).collect()
}

fn squared_distance(a: &[f64; SIMILARITY_DIM], b: &[f64; SIMILARITY_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn decode(output: &SegOutput, config: &DecodeConfig) -> Result<MatchResult, DecodeError> {
    config.validate()?;
    let (h, w) = (output.height, output.width);
    let n = h * w;
    if n == 0 || output.region.len() != n || output.kernel.len() != n || output.similarity.len() != SIMILARITY_DIM * n {
        return Err(DecodeError::Output(format!("channel sizes do not match {h}x{w}")));
    }
    if !output.is_finite() {
        return Err(DecodeError::Output("non-finite values".into()));
    }
    let fg: Vec<bool> = output.kernel.iter().map(|&k| k > config.kernel_threshold).collect();
    let (labels, count) = label_components(&fg, h, w, config.connectivity);
    let mut areas = vec![0usize; count as usize + 1];
    for &l in &labels {
        areas[l as usize] += 1;
    }
    // Old component label → surviving kernel rank (0 = dropped).
    let mut rank = vec![0u32; count as usize + 1];
    let mut kept = 0u32;
    for l in 1..=count as usize {
        if areas[l] >= config.min_area_px {
            kept += 1;
            rank[l] = kept;
        }
    }
    let k = kept as usize;
    let mut sums = vec![[0.0; SIMILARITY_DIM]; k];
    let mut sizes = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        let r = rank[l as usize];
        if r > 0 {
            let v = output.similarity_at(i);
            for c in 0..SIMILARITY_DIM {
                sums[r as usize - 1][c] += v[c];
            }
            sizes[r as usize - 1] += 1;
        }
    }
    let centroids: Vec<[f64; SIMILARITY_DIM]> =
        sums.iter().zip(&sizes).map(|(s, &c)| s.map(|v| v / c as f64)).collect();
    let limit = config.assign_distance * config.assign_distance;
    let mut assign = vec![0u32; n];
    for i in 0..n {
        let own = rank[labels[i] as usize];
        if own > 0 {
            assign[i] = own;
            continue;
        }
        if output.region[i] <= config.region_threshold || k == 0 {
            continue;
        }
        let v = output.similarity_at(i);
        let mut best = (f64::INFINITY, 0u32);
        for (j, c) in centroids.iter().enumerate() {
            let d = squared_distance(&v, c);
            if d < best.0 {
                best = (d, j as u32 + 1);
            }
        }
        if best.0 < limit {
            assign[i] = best.1;
        }
    }
    let mut instances = Vec::new();
    let mut merged = RasterMask::zeros(h, w).expect("non-zero dims");
    for id in 1..=kept {
        let mut mask = RasterMask::zeros(h, w).expect("non-zero dims");
        let mut area = 0;
        let mut score = 0.0;
        for i in (0..n).filter(|&i| assign[i] == id) {
            mask.data_mut()[i] = 1;
            area += 1;
            score += output.region[i];
        }
        if area < config.min_area_px || area == 0 {
            continue;
        }
        for (o, &v) in merged.data_mut().iter_mut().zip(mask.data()) {
            *o |= v;
        }
        let bbox = BoundingBox::of_mask(&mask).expect("non-empty mask");
        instances.push(Instance { id, mask, bbox, area, score: score / area as f64 });
    }
    Ok(MatchResult { instances, merged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(h: usize, w: usize) -> SegOutput {
        SegOutput::zeros(h, w)
    }

    fn fill(v: &mut [f64], w: usize, y0: usize, y1: usize, x0: usize, x1: usize, value: f64) {
        for y in y0..y1 {
            for x in x0..x1 {
                v[y * w + x] = value;
            }
        }
    }

    #[test]
    fn all_zero_scores_give_empty_result() {
        let r = decode(&blank(16, 16), &DecodeConfig::default()).unwrap();
        assert!(r.instances.is_empty());
        assert_eq!(r.merged.count_nonzero(), 0);
        assert!(boxes_from_masks(&r).is_empty());
    }

    #[test]
    fn region_equal_to_kernel_returns_kernel() {
        let mut o = blank(32, 32);
        fill(&mut o.kernel, 32, 4, 12, 6, 20, 0.9);
        fill(&mut o.region, 32, 4, 12, 6, 20, 0.9);
        let r = decode(&o, &DecodeConfig::default()).unwrap();
        assert_eq!(r.instances.len(), 1);
        assert_eq!(r.instances[0].area, 8 * 14);
        assert_eq!(r.instances[0].bbox, BoundingBox { x0: 6, y0: 4, x1: 19, y1: 11 });
        assert!((r.instances[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn small_kernels_are_filtered() {
        let mut o = blank(32, 32);
        fill(&mut o.kernel, 32, 0, 3, 0, 3, 1.0);
        fill(&mut o.region, 32, 0, 10, 0, 10, 1.0);
        assert!(decode(&o, &DecodeConfig::default()).unwrap().instances.is_empty());
        let cfg = DecodeConfig { min_area_px: 9, ..Default::default() };
        assert_eq!(decode(&o, &cfg).unwrap().instances[0].area, 100);
    }

    #[test]
    fn l_shaped_box() {
        let mut mask = RasterMask::zeros(10, 10).unwrap();
        for y in 2..8 {
            mask.set(y, 3, 1);
        }
        for x in 3..9 {
            mask.set(7, x, 1);
        }
        assert_eq!(BoundingBox::of_mask(&mask).unwrap().as_array(), [3, 2, 8, 7]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = DecodeConfig { region_threshold: 1.0, ..Default::default() };
        assert!(decode(&blank(4, 4), &cfg).is_err());
    }
}
