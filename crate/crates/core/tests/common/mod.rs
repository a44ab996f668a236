#![allow(dead_code)]

use rand::Rng;
use resdiff_core::rng::generator;
use resdiff_core::Image;

/// Uniform `[-1, 1)` image.
pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
    let mut r = generator(seed);
    Image::from_fn(h, w, c, |_, _, _| r.random_range(-1.0..1.0))
}

/// Same 64-bit LCG as the reference script that produced the frozen SSIM values.
pub fn lcg_image(h: usize, w: usize, seed: u64) -> Image<f64> {
    let mut s = seed;
    Image::from_fn(h, w, 1, |_, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}
