//! Random flip, small rotation and brightness/contrast jitter.
//!
//! Each side of a pair (reference image with its prompt, target image with
//! its polygons) draws its own transform. Geometric transforms move an image
//! and its own labels together; photometric ones touch only pixels.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::geometry::{Point, PolygonSet, RasterMask};

/// Probability of each transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentProbabilities {
    pub flip: f64,
    pub rotate: f64,
    pub photometric: f64,
}

impl Default for AugmentProbabilities {
    fn default() -> Self {
        Self { flip: 0.5, rotate: 0.5, photometric: 0.5 }
    }
}

impl AugmentProbabilities {
    pub fn none() -> Self {
        Self { flip: 0.0, rotate: 0.0, photometric: 0.0 }
    }
}

/// Transform magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    /// Maximum brightness shift as a fraction of full scale.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { max_rotation_deg: 10.0, brightness: 0.2, contrast: 0.2 }
    }
}

/// Colour used for pixels rotated in from outside the page.
const FILL: [u8; 3] = [245, 245, 245];

#[derive(Debug, Clone, Copy)]
struct SideTransform {
    flip: bool,
    angle: Option<f64>,
    photometric: Option<(f64, f64)>,
}

impl SideTransform {
    fn draw(rng: &mut ChaCha8Rng, probs: &AugmentProbabilities, params: &AugmentParams) -> Self {
        let flip = rng.random_bool(probs.flip.clamp(0.0, 1.0));
        let rotate = rng.random_bool(probs.rotate.clamp(0.0, 1.0));
        let angle = rng.random_range(-1.0..=1.0) * params.max_rotation_deg.to_radians();
        let photo = rng.random_bool(probs.photometric.clamp(0.0, 1.0));
        let b = rng.random_range(-1.0..=1.0) * params.brightness;
        let c = 1.0 + rng.random_range(-1.0..=1.0) * params.contrast;
        Self { flip, angle: rotate.then_some(angle), photometric: photo.then_some((b, c)) }
    }
}

/// Augments with the default probabilities and magnitudes.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    augment_with(sample, seed, &AugmentProbabilities::default(), &AugmentParams::default())
}

pub fn augment_with(sample: &Sample, seed: u64, probs: &AugmentProbabilities, params: &AugmentParams) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ref_t = SideTransform::draw(&mut rng, probs, params);
    let tgt_t = SideTransform::draw(&mut rng, probs, params);
    let mut out = sample.clone();

    if ref_t.flip {
        out.reference_image = image::imageops::flip_horizontal(&out.reference_image);
        out.reference_mask = out.reference_mask.flip_horizontal();
    }
    if let Some(a) = ref_t.angle {
        let mask = rotate_mask(&out.reference_mask, a);
        // A prompt rotated entirely off the page would be useless; keep the
        // unrotated side instead.
        if mask.count_nonzero() > 0 {
            out.reference_image = rotate_image(&out.reference_image, a);
            out.reference_mask = mask;
        }
    }
    if let Some((b, c)) = ref_t.photometric {
        photometric(&mut out.reference_image, b, c);
    }

    let (tw, th) = out.target_image.dimensions();
    if tgt_t.flip {
        out.target_image = image::imageops::flip_horizontal(&out.target_image);
        out.target_polygons = flip_polygons(&out.target_polygons, f64::from(tw));
    }
    if let Some(a) = tgt_t.angle {
        out.target_image = rotate_image(&out.target_image, a);
        out.target_polygons = rotate_polygons(&out.target_polygons, a, f64::from(tw), f64::from(th));
    }
    if let Some((b, c)) = tgt_t.photometric {
        photometric(&mut out.target_image, b, c);
    }
    out
}

fn flip_polygons(set: &PolygonSet, width: f64) -> PolygonSet {
    set.filter_map(|p| p.map_points(|q| Point::new(width - q.x, q.y)).ok())
}

fn rotate_polygons(set: &PolygonSet, angle: f64, width: f64, height: f64) -> PolygonSet {
    let (cx, cy) = (0.5 * width, 0.5 * height);
    let (s, c) = angle.sin_cos();
    set.filter_map(|p| {
        p.map_points(|q| {
            let (dx, dy) = (q.x - cx, q.y - cy);
            Point::new(cx + c * dx - s * dy, cy + s * dx + c * dy)
        })
        .ok()
        .and_then(|r| r.clip_to_rect(width, height))
    })
}

/// Source position of output pixel `(x, y)` under a rotation by `angle`
/// about the image centre.
fn source_of(x: u32, y: u32, angle: f64, width: f64, height: f64) -> (f64, f64) {
    let (cx, cy) = (0.5 * width, 0.5 * height);
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy);
    (cx + c * dx + s * dy, cy - s * dx + c * dy)
}

fn rotate_image(img: &RgbImage, angle: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let (wf, hf) = (f64::from(w), f64::from(h));
    RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = source_of(x, y, angle, wf, hf);
        if sx < 0.0 || sy < 0.0 || sx >= wf || sy >= hf {
            return Rgb(FILL);
        }
        // bilinear on pixel centres, clamped at the border
        let fx = (sx - 0.5).clamp(0.0, wf - 1.0);
        let fy = (sy - 0.5).clamp(0.0, hf - 1.0);
        let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = (fx - f64::from(x0), fy - f64::from(y0));
        let mut out = [0u8; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let p = |xx: u32, yy: u32| f64::from(img.get_pixel(xx, yy)[ch]);
            let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
            let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
            *o = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

fn rotate_mask(mask: &RasterMask, angle: f64) -> RasterMask {
    let (h, w) = mask.dims();
    let mut out = RasterMask::zeros(h, w).expect("non-empty mask");
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x as u32, y as u32, angle, w as f64, h as f64);
            if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                out.set(y, x, mask.get(sy as usize, sx as usize));
            }
        }
    }
    out
}

/// `v ↦ (v − 128)·contrast + 128 + brightness·255`, clamped.
fn photometric(img: &mut RgbImage, brightness: f64, contrast: f64) {
    for px in img.pixels_mut() {
        for v in px.0.iter_mut() {
            let f = (f64::from(*v) - 128.0) * contrast + 128.0 + brightness * 255.0;
            *v = f.round().clamp(0.0, 255.0) as u8;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_pair, Level};
    use crate::geometry::rasterize;

    fn only(flip: f64, rotate: f64, photometric: f64) -> AugmentProbabilities {
        AugmentProbabilities { flip, rotate, photometric }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = synth_pair(Level::II, 3);
        assert_eq!(augment(&s, 9), augment(&s, 9));
    }

    #[test]
    fn double_flip_is_identity() {
        let s = synth_pair(Level::I, 4);
        let once = augment_with(&s, 1, &only(1.0, 0.0, 0.0), &AugmentParams::default());
        assert_ne!(once.reference_image, s.reference_image);
        let twice = augment_with(&once, 2, &only(1.0, 0.0, 0.0), &AugmentParams::default());
        assert_eq!(twice.reference_image, s.reference_image);
        assert_eq!(twice.reference_mask, s.reference_mask);
        assert_eq!(twice.target_polygons, s.target_polygons);
    }

    #[test]
    fn flip_preserves_area_and_rotation_nearly() {
        for seed in 0..10 {
            let s = synth_pair(Level::III, seed);
            let area = s.reference_mask.count_nonzero() as f64;
            let f = augment_with(&s, seed, &only(1.0, 0.0, 0.0), &AugmentParams::default());
            assert_eq!(f.reference_mask.count_nonzero() as f64, area);
            let r = augment_with(&s, seed, &only(0.0, 1.0, 0.0), &AugmentParams::default());
            let ra = r.reference_mask.count_nonzero() as f64;
            assert!((ra - area).abs() <= 0.05 * area, "seed {seed}: {area} → {ra}");
        }
    }

    #[test]
    fn rotated_polygons_track_rotated_pixels() {
        let s = synth_pair(Level::II, 5);
        let angle = 8f64.to_radians();
        let before = rasterize(&s.target_polygons, 256, 256).unwrap().binarize();
        let moved = rotate_polygons(&s.target_polygons, angle, 256.0, 256.0);
        let from_polygons = rasterize(&moved, 256, 256).unwrap().binarize();
        let from_pixels = rotate_mask(&before, angle);
        let (mut inter, mut union) = (0, 0);
        for (a, b) in from_polygons.data().iter().zip(from_pixels.data()) {
            inter += usize::from(*a != 0 && *b != 0);
            union += usize::from(*a != 0 || *b != 0);
        }
        assert!(inter as f64 / union as f64 > 0.95, "{inter}/{union}");
    }

    #[test]
    fn photometric_leaves_labels_untouched() {
        let s = synth_pair(Level::I, 6);
        let p = augment_with(&s, 3, &only(0.0, 0.0, 1.0), &AugmentParams::default());
        assert_eq!(p.reference_mask, s.reference_mask);
        assert_eq!(p.target_polygons, s.target_polygons);
        assert_ne!(p.target_image, s.target_image);
    }
}
