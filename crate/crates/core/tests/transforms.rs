mod common;

use common::random_image;
use proptest::prelude::*;
use resdiff_core::freq::{dwt_haar, fft2d, gaussian_highpass, highpass_image, idwt_haar, ifft2d};
use resdiff_core::Image;
use rustfft::num_complex::Complex;

fn naive_dft(im: &Image<f64>, c: usize) -> Vec<Complex<f64>> {
    let (h, w, _) = im.dims();
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = -std::f64::consts::TAU * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += Complex::from_polar(im.get(y, x, c), phase);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

#[test]
fn fft_matches_naive_dft() {
    for seed in 0..100 {
        let im = random_image(8, 8, 2, seed);
        let spec = fft2d(&im).unwrap();
        for c in 0..2 {
            let oracle = naive_dft(&im, c);
            for (a, b) in spec.plane(c).iter().zip(&oracle) {
                assert!((a - b).norm() < 1e-6, "seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn fft_on_small_and_odd_sizes() {
    for (h, w) in [(1, 1), (2, 3), (5, 4), (7, 7)] {
        let im = random_image(h, w, 1, (h * 10 + w) as u64);
        let spec = fft2d(&im).unwrap();
        for (a, b) in spec.plane(0).iter().zip(&naive_dft(&im, 0)) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(ifft2d(&spec).unwrap().max_abs_diff(&im) < 1e-12);
    }
}

#[test]
fn dft_reference_examples() {
    let delta = Image::from_fn(4, 4, 1, |y, x, _| if y == 0 && x == 0 { 1.0 } else { 0.0 });
    assert!(fft2d(&delta).unwrap().plane(0).iter().all(|z| (z - Complex::new(1.0, 0.0)).norm() < 1e-12));
    let ones = Image::filled(4, 4, 1, 1.0);
    let spec = fft2d(&ones).unwrap();
    assert!((spec.dc(0) - Complex::new(16.0, 0.0)).norm() < 1e-12);
    assert!(spec.plane(0)[1..].iter().all(|z| z.norm() < 1e-12));
}

#[test]
fn dwt_perfect_reconstruction() {
    for seed in 0..100 {
        let im = random_image(64, 64, 1, 1000 + seed);
        let back = idwt_haar(&dwt_haar(&im, 3).unwrap()).unwrap();
        assert!(back.max_abs_diff(&im) < 1e-6, "seed {seed}");
    }
}

#[test]
fn parseval_and_wavelet_energy() {
    for seed in 0..20 {
        let im = random_image(16, 32, 3, 2000 + seed);
        let e: f64 = im.data().iter().map(|v| v * v).sum();
        let spec = fft2d(&im).unwrap();
        let spectral = spec.energy() / (16.0 * 32.0);
        assert!((spectral - e).abs() <= 1e-5 * e);
        let wav = dwt_haar(&im, 4).unwrap().energy();
        assert!((wav - e).abs() <= 1e-5 * e);
    }
}

#[test]
fn dwt_rejects_incompatible_sizes() {
    assert!(dwt_haar(&Image::<f64>::zeros(12, 16, 1), 3).is_err());
    assert!(dwt_haar(&Image::<f64>::zeros(16, 16, 1), 0).is_err());
}

#[test]
fn highpass_filter_properties() {
    for (h, w) in [(8, 8), (16, 12), (9, 7), (64, 64)] {
        for sigma in [0.3, 1.0, 4.0, 32.0] {
            let f = gaussian_highpass::<f64>(h, w, sigma).unwrap();
            assert_eq!(f.at(h / 2, w / 2), 0.0);
            assert!(f.response().iter().all(|&v| (0.0..1.0).contains(&v)));
            // Monotone along rays from the DC position.
            let (cu, cv) = ((h / 2) as i64, (w / 2) as i64);
            for (du, dv) in [(0i64, 1i64), (1, 0), (1, 1), (-1, 1), (-1, -1), (0, -1), (-1, 0), (1, -1)] {
                let mut prev = 0.0;
                let mut k = 1;
                loop {
                    let (u, v) = (cu + du * k, cv + dv * k);
                    if u < 0 || v < 0 || u >= h as i64 || v >= w as i64 {
                        break;
                    }
                    let val = f.at(u as usize, v as usize);
                    assert!(val >= prev, "{h}x{w} sigma {sigma} ray ({du},{dv}) step {k}");
                    prev = val;
                    k += 1;
                }
            }
        }
    }
    assert!(gaussian_highpass::<f64>(8, 8, 0.0).is_err());
    assert!(gaussian_highpass::<f64>(8, 8, -1.0).is_err());
}

#[test]
fn highpass_of_constant_is_zero() {
    for v in [-0.7f64, 0.0, 0.25, 1.0] {
        let x = highpass_image(&Image::filled(16, 16, 3, v), 2.0).unwrap();
        assert!(x.data().iter().all(|p| p.abs() < 1e-5));
    }
}

#[test]
fn highpass_reference_value() {
    // 1 - exp(-D^2 / (2 sigma^2)) with D = 5, sigma = 2
    let f = gaussian_highpass::<f64>(16, 16, 2.0).unwrap();
    let expected = 1.0 - (-25.0f64 / 8.0).exp();
    assert!((f.at(8 + 3, 8 + 4) - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fft_roundtrip(seed in any::<u64>(), hp in 1usize..6, wp in 1usize..6) {
        let im = random_image(hp * 2, wp * 3, 2, seed);
        prop_assert!(ifft2d(&fft2d(&im).unwrap()).unwrap().max_abs_diff(&im) < 1e-9);
    }

    #[test]
    fn dwt_roundtrip_any_level(seed in any::<u64>(), levels in 1usize..4) {
        let n = 1 << levels;
        let im = random_image(n * 2, n * 3, 1, seed);
        let back = idwt_haar(&dwt_haar(&im, levels).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&im) < 1e-9);
    }

    #[test]
    fn highpass_in_unit_interval(h in 1usize..20, w in 1usize..20, sigma in 0.01f64..100.0) {
        let f = gaussian_highpass::<f64>(h, w, sigma).unwrap();
        prop_assert_eq!(f.at(h / 2, w / 2), 0.0);
        prop_assert!(f.response().iter().all(|&v| (0.0..1.0).contains(&v)));
    }
}
