use histospace::imageprep::{
    extract_spot_patch, lab_to_rgb_pixel, remove_color_cast, rgb_to_lab, rgb_to_lab_pixel, stain_normalize, standardize, tile_image,
    RgbImage, StainReference,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(h: usize, w: usize, base: [f64; 3], spread: f64, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..h * w).flat_map(|_| base.map(|b| (b + rng.gen_range(-spread..spread)).clamp(0.0, 1.0))).collect();
    RgbImage::new(h, w, px).unwrap()
}

fn max_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Straight-line sRGB -> XYZ (D65) -> Lab, written out independently.
fn lab_oracle(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) });
    let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
    let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
    let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    let f = |t: f64| if t > 216.0 / 24389.0 { t.cbrt() } else { (24389.0 / 27.0 * t + 16.0) / 116.0 };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[test]
fn lab_matches_independent_formula() {
    let gray = rgb_to_lab_pixel([0.5; 3]);
    assert!((gray[0] - 53.39).abs() < 0.01, "{gray:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let rgb = [rng.gen::<f64>(), rng.gen(), rng.gen()];
        let (ours, oracle) = (rgb_to_lab_pixel(rgb), lab_oracle(rgb));
        for c in 0..3 {
            assert!((ours[c] - oracle[c]).abs() < 2e-3, "{rgb:?}: {ours:?} vs {oracle:?}");
        }
        let back = lab_to_rgb_pixel(ours);
        for c in 0..3 {
            assert!((back[c] - rgb[c]).abs() < 1e-6);
        }
    }
}

#[test]
fn color_cast_removal_is_idempotent_without_clipping() {
    let img = noisy(40, 50, [0.55, 0.45, 0.4], 0.1, 1);
    let once = remove_color_cast(&img);
    let twice = remove_color_cast(&once);
    assert!(max_diff(&once, &twice) < 1e-6);
    let m = once.channel_means();
    assert!((m[0] - m[1]).abs() < 1e-6 && (m[1] - m[2]).abs() < 1e-6);
}

#[test]
fn stain_normalization_is_idempotent_and_matches_reference() {
    let reference = StainReference::from_image(&noisy(60, 60, [0.8, 0.5, 0.7], 0.15, 2));
    let img = noisy(50, 70, [0.6, 0.55, 0.75], 0.1, 3);
    let once = stain_normalize(&img, &reference);
    let twice = stain_normalize(&once, &reference);
    assert!(max_diff(&once, &twice) <= 1e-3);
    let (mean, std) = rgb_to_lab(&once).stats();
    for c in 0..3 {
        assert!((mean[c] - reference.lab_mean[c]).abs() < 1e-3);
        assert!((std[c] - reference.lab_std[c]).abs() < 1e-3);
    }
}

#[test]
fn standardized_outputs_stay_in_range() {
    let reference = StainReference::from_image(&noisy(30, 30, [0.9, 0.3, 0.6], 0.4, 4));
    for seed in 0..5 {
        let out = standardize(&noisy(30, 40, [0.2, 0.8, 0.5], 0.5, seed), &reference);
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn stain_reference_file_is_six_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let r = StainReference::from_image(&noisy(10, 10, [0.5, 0.4, 0.6], 0.2, 5));
    let p = dir.path().join("ref.json");
    r.save(&p).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(v.as_object().unwrap().len(), 2);
    assert_eq!(v["lab_mean"].as_array().unwrap().len(), 3);
    assert_eq!(StainReference::load(&p).unwrap(), r);
    std::fs::write(&p, r#"{"lab_mean": [1, 2, 3], "lab_std": [1, 1, 1], "extra": 0}"#).unwrap();
    assert!(StainReference::load(&p).is_err());
}

#[test]
fn png_round_trip_quantizes_to_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let img = noisy(9, 7, [0.5, 0.5, 0.5], 0.5, 6);
    let p = dir.path().join("x.png");
    img.save_png(&p).unwrap();
    let back = RgbImage::load_png(&p).unwrap();
    assert_eq!((back.height(), back.width()), (9, 7));
    assert!(max_diff(&img, &back) <= 0.5 / 255.0 + 1e-12);
    back.save_png(&p).unwrap();
    assert_eq!(RgbImage::load_png(&p).unwrap(), back);
}

#[test]
fn spot_patches_on_the_grid_do_not_overlap() {
    let img = noisy(600, 600, [0.5; 3], 0.1, 7);
    let a = extract_spot_patch(&img, (100, 100), 128, "s").unwrap();
    let b = extract_spot_patch(&img, (100, 300), 128, "s").unwrap();
    let c = extract_spot_patch(&img, (300, 100), 128, "s").unwrap();
    assert_eq!(a.origin, (36, 36));
    assert!(a.origin.1 + 128 <= b.origin.1);
    assert!(a.origin.0 + 128 <= c.origin.0);
    assert!(extract_spot_patch(&img, (10, 10), 128, "s").is_err());
    assert!(extract_spot_patch(&img, (540, 300), 128, "s").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn tile_count_is_floor_product(h in 1usize..90, w in 1usize..90, size in 1usize..40) {
        let img = RgbImage::filled(h, w, [0.2, 0.4, 0.6]).unwrap();
        let tiles = tile_image(&img, size, "x").unwrap();
        prop_assert_eq!(tiles.len(), (h / size) * (w / size));
        for (i, t) in tiles.iter().enumerate() {
            prop_assert_eq!(t.origin, ((i / (w / size)) * size, (i % (w / size)) * size));
            prop_assert_eq!(t.size(), size);
        }
    }
}
