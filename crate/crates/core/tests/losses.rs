mod common;

use common::random_image;
use proptest::prelude::*;
use resdiff_core::losses::*;
use resdiff_core::{Error, Image};

type GradFn = fn(&Image<f64>, &Image<f64>) -> (f64, Image<f64>);

fn fd_check(name: &str, f: GradFn) {
    for seed in 0..5 {
        let target = random_image(4, 4, 3, 100 + seed);
        let pred = random_image(4, 4, 3, 200 + seed);
        let (_, grad) = f(&pred, &target);
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut p = pred.clone();
            p.data_mut()[i] += h;
            let up = f(&p, &target).0;
            p.data_mut()[i] -= 2.0 * h;
            let down = f(&p, &target).0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(rel < 1e-4, "{name} seed {seed} elem {i}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    fd_check("gt", |p, t| loss_gt_with_grad(p, t).unwrap());
    fd_check("fft", |p, t| loss_fft_with_grad(p, t).unwrap());
    fd_check("dwt", |p, t| loss_dwt_with_grad(p, t, 2).unwrap());
    fd_check("cnn", |p, t| {
        let (b, g) = loss_cnn_with_grad(p, t, &LossWeights { alpha: 0.1, beta: 0.3, dwt_levels: 2 }).unwrap();
        (b.total, g)
    });
}

#[test]
fn zero_on_identical_pairs() {
    let a = random_image(8, 8, 3, 1);
    assert_eq!(loss_gt(&a, &a).unwrap(), 0.0);
    assert_eq!(loss_fft(&a, &a).unwrap(), 0.0);
    assert_eq!(loss_dwt(&a, &a, 3).unwrap(), 0.0);
    assert_eq!(loss_cnn(&a, &a, &LossWeights::default()).unwrap().total, 0.0);
}

#[test]
fn reference_values() {
    let zero = Image::<f64>::zeros(4, 4, 3);
    let half = Image::filled(4, 4, 3, 0.5);
    assert!((loss_gt(&half, &zero).unwrap() - 0.25).abs() < 1e-15);
    // Only DC differs: |16 * 0.5| = 8 in one of 16 bins per channel.
    assert!((loss_fft(&half, &zero).unwrap() - 64.0 / 16.0).abs() < 1e-12);
    assert!(loss_dwt(&half, &zero, 2).unwrap().abs() < 1e-15);
}

#[test]
fn gt_loss_matches_loop_oracle() {
    let (a, b) = (random_image(5, 7, 3, 3), random_image(5, 7, 3, 4));
    let mut acc = 0.0;
    for y in 0..5 {
        for x in 0..7 {
            for c in 0..3 {
                acc += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
            }
        }
    }
    assert!((loss_gt(&a, &b).unwrap() - acc / 105.0).abs() < 1e-7);
}

#[test]
fn fft_loss_is_shift_invariant() {
    for seed in 0..10 {
        let (a, b) = (random_image(8, 16, 3, 10 + seed), random_image(8, 16, 3, 20 + seed));
        assert!(loss_fft(&a.roll(3, 5), &a).unwrap() < 1e-6);
        let base = loss_fft(&a, &b).unwrap();
        assert!((loss_fft(&a.roll(1, 7), &b).unwrap() - base).abs() < 1e-6);
    }
}

#[test]
fn dwt_loss_ignores_constant_offset() {
    for seed in 0..10 {
        let (a, b) = (random_image(16, 16, 3, 30 + seed), random_image(16, 16, 3, 40 + seed));
        let base = loss_dwt(&a, &b, 2).unwrap();
        let shifted = loss_dwt(&a.map(|v| v + 0.37), &b, 2).unwrap();
        assert!((shifted - base).abs() < 1e-6);
    }
}

#[test]
fn combined_loss_is_linear_in_weights() {
    let (a, b) = (random_image(16, 16, 3, 5), random_image(16, 16, 3, 6));
    let parts = loss_cnn(&a, &b, &LossWeights::gt_only(2)).unwrap();
    for (alpha, beta) in [(0.0, 0.0), (0.1, 0.1), (1e-4, 0.1), (2.0, 0.5), (0.3, 7.0)] {
        let l = loss_cnn(&a, &b, &LossWeights { alpha, beta, dwt_levels: 2 }).unwrap();
        let expected = parts.gt + alpha * parts.fft + beta * parts.dwt;
        assert!((l.total - expected).abs() < 1e-7);
    }
}

#[test]
fn error_cases() {
    let (a, b) = (Image::<f64>::zeros(8, 8, 3), Image::<f64>::zeros(8, 4, 3));
    assert!(matches!(loss_gt(&a, &b), Err(Error::Dimension(_))));
    assert!(matches!(loss_fft(&a, &b), Err(Error::Dimension(_))));
    assert!(loss_dwt(&Image::<f64>::zeros(6, 6, 1), &Image::<f64>::zeros(6, 6, 1), 2).is_err());
    assert!(loss_cnn(&a, &a, &LossWeights { alpha: -0.1, beta: 0.0, dwt_levels: 1 }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn losses_are_non_negative(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (random_image(8, 8, 3, s1), random_image(8, 8, 3, s2));
        prop_assert!(loss_gt(&a, &b).unwrap() >= 0.0);
        prop_assert!(loss_fft(&a, &b).unwrap() >= 0.0);
        prop_assert!(loss_dwt(&a, &b, 3).unwrap() >= 0.0);
    }
}
