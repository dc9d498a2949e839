use image::RgbImage;
use roimatcher::data::{synth_pair_sized, Level, Rect, DEFAULT_CANVAS};

fn diagonal() -> f64 {
    (DEFAULT_CANVAS.0 as f64).hypot(DEFAULT_CANVAS.1 as f64)
}

fn center_offset(a: &Rect, b: &Rect) -> f64 {
    let ((ax, ay), (bx, by)) = (a.center(), b.center());
    (ax - bx).hypot(ay - by)
}

fn grey_crop(img: &RgbImage, r: &Rect) -> Vec<f64> {
    let mut out = Vec::new();
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let p = img.get_pixel(x as u32, y as u32).0;
            out.push(0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]));
        }
    }
    out
}

/// Single-window structural similarity of two equally sized crops.
fn ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

#[test]
fn level_one_keeps_the_roi_in_place() {
    let (h, w) = DEFAULT_CANVAS;
    for seed in 0..100 {
        let (_, info) = synth_pair_sized(Level::I, seed, h, w);
        let nearest = info.target_boxes.iter().map(|t| center_offset(&info.reference_box, t)).fold(f64::INFINITY, f64::min);
        assert!(nearest <= 0.05 * diagonal(), "seed {seed}: offset {nearest}");
        assert!(info.same_renderer);
    }
}

#[test]
fn level_two_moves_an_identical_rendering() {
    let (h, w) = DEFAULT_CANVAS;
    let mut moved = 0;
    for seed in 0..100 {
        let (sample, info) = synth_pair_sized(Level::II, seed, h, w);
        let first = &info.target_boxes[0];
        if center_offset(&info.reference_box, first) > 0.15 * diagonal() {
            moved += 1;
        }
        assert!(info.same_renderer);
        assert_eq!((first.width(), first.height()), (info.reference_box.width(), info.reference_box.height()));
        let s = ssim(
            &grey_crop(&sample.reference_image, &info.reference_box),
            &grey_crop(&sample.target_image, first),
        );
        assert!(s > 0.8, "seed {seed}: crop similarity {s}");
    }
    assert!(moved >= 90, "only {moved}/100 pairs moved far enough");
}

#[test]
fn level_three_restyles_and_moves() {
    let (h, w) = DEFAULT_CANVAS;
    for seed in 0..50 {
        let (sample, info) = synth_pair_sized(Level::III, seed, h, w);
        assert!(!info.same_renderer);
        assert!((1..=3).contains(&sample.target_polygons.len()));
    }
}

#[test]
fn same_level_and_seed_is_byte_identical() {
    for level in Level::ALL {
        let (a, _) = synth_pair_sized(level, 9, 128, 160);
        let (b, _) = synth_pair_sized(level, 9, 128, 160);
        assert_eq!(a.reference_image.as_raw(), b.reference_image.as_raw());
        assert_eq!(a.target_image.as_raw(), b.target_image.as_raw());
        assert_eq!(a, b);
    }
}
