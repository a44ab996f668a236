mod common;

use common::{lcg_image, random_image};
use proptest::prelude::*;
use resdiff_core::metrics::*;
use resdiff_core::Image;

/// `(h, w, seed_a, seed_b, mix, ssim)` from scikit-image 0.25
/// `structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
/// use_sample_covariance=False, data_range=1.0)` with `b = (1 - mix) a + mix n`.
const SKIMAGE_REFERENCE: [(usize, usize, u64, u64, f64, f64); 10] = [
    (24, 32, 100, 200, 0.0, 1.0),
    (26, 33, 101, 201, 0.1, 0.9878228991699345),
    (28, 34, 102, 202, 0.2, 0.9474051587314222),
    (30, 35, 103, 203, 0.30000000000000004, 0.8704366153874777),
    (32, 36, 104, 204, 0.4, 0.7738772606402637),
    (34, 37, 105, 205, 0.5, 0.6278113322541511),
    (36, 38, 106, 206, 0.6000000000000001, 0.5065004794461716),
    (38, 39, 107, 207, 0.7000000000000001, 0.332412901445455),
    (40, 40, 108, 208, 0.8, 0.19058503328717186),
    (42, 41, 109, 209, 0.9, 0.05423101330469378),
];

#[test]
fn ssim_matches_skimage() {
    for (h, w, sa, sb, mix, expected) in SKIMAGE_REFERENCE {
        let a = lcg_image(h, w, sa);
        let n = lcg_image(h, w, sb);
        let b = a.zip_map(&n, |x, y| (1.0 - mix) * x + mix * y).unwrap();
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-4, "{h}x{w}: {got} vs {expected}");
    }
}

#[test]
fn psnr_spot_checks() {
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
    assert!((psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-12);
    assert!((psnr_from_mse(0.01 * 255.0 * 255.0, 255.0) - 20.0).abs() < 1e-9);
    let a = Image::filled(8, 8, 3, 0.2f64);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert!((psnr(&a, &a.map(|v| v + 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn ssim_self_comparison_is_one() {
    let a = random_image(20, 24, 3, 1).map(|v| (v + 1.0) / 2.0);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let scores = score(&random_image(16, 16, 3, 2), &random_image(16, 16, 3, 2)).unwrap();
    assert_eq!(scores.psnr_rgb, f64::INFINITY);
    assert_eq!(scores.ssim_luma, 1.0);
}

#[test]
fn mean_scores_is_arithmetic_mean() {
    let rows = [
        Scores { psnr_rgb: 20.0, ssim_luma: 0.5 },
        Scores { psnr_rgb: 30.0, ssim_luma: 0.7 },
        Scores { psnr_rgb: 31.5, ssim_luma: 0.9 },
    ];
    let m = mean_scores(&rows).unwrap();
    assert!((m.psnr_rgb - 81.5 / 3.0).abs() < 1e-9);
    assert!((m.ssim_luma - 0.7).abs() < 1e-9);
    assert!(mean_scores(&[]).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn psnr_symmetric_and_decreasing(s1 in any::<u64>(), s2 in any::<u64>(), k in 1.01f64..4.0) {
        let a = random_image(12, 12, 3, s1);
        let b = random_image(12, 12, 3, s2);
        prop_assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
        let m = mse(&a, &b).unwrap();
        prop_assert!(psnr_from_mse(m * k, 1.0) < psnr_from_mse(m, 1.0));
    }

    #[test]
    fn ssim_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_image(16, 16, 3, s1).map(|v| (v + 1.0) / 2.0);
        let b = random_image(16, 16, 3, s2).map(|v| (v + 1.0) / 2.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
