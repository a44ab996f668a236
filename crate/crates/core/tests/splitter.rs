mod common;

use rand::Rng;
use resdiff_core::autograd::Graph;
use resdiff_core::freq::fft2d;
use resdiff_core::nn::ParamStore;
use resdiff_core::rng::{generator, normal_tensor};
use resdiff_core::splitter::*;
use resdiff_core::unet::{HfCrossAttention, HfGuidance};
use resdiff_core::{Image, Tensor};

#[test]
fn sigma_stays_in_clamp_range() {
    let mut r = generator(11);
    let mut hit_low = 0;
    let mut hit_high = 0;
    let splitters: Vec<(ParamStore<f64>, FdInfoSplitter)> = (0..5)
        .map(|s| {
            let mut p = ParamStore::new();
            let sp = FdInfoSplitter::new(&mut p, "s", 3, DEFAULT_REDUCTION, &mut generator(s));
            (p, sp)
        })
        .collect();
    for i in 0..1000 {
        let size = [4, 8, 16][i % 3];
        let amplitude = match i % 5 {
            0 => 0.0,
            1 => 1e-6,
            2 => 0.05,
            3 => 1.0,
            _ => 1e3,
        };
        let im = Image::from_fn(size, size, 3, |_, _, _| amplitude * r.random_range(-1.0..1.0));
        let (p, sp) = &splitters[i % splitters.len()];
        let sigma = sp.adaptive_sigma(p, &fft2d(&im).unwrap()).unwrap();
        let l = size as f64;
        assert!(sigma >= l / 2.0 && sigma <= l, "input {i}: sigma {sigma} outside [{}, {l}]", l / 2.0);
        hit_low += (sigma == l / 2.0) as usize;
        hit_high += (sigma == l) as usize;
    }
    assert!(hit_low > 0 && hit_high > 0, "low {hit_low} high {hit_high}");
}

#[test]
fn clamp_formula_examples() {
    for l in [4usize, 16, 64] {
        let lf = l as f64;
        assert_eq!(sigma_from_reduced(0.0, l), lf / 2.0);
        assert_eq!(sigma_from_reduced(lf / 4.0, l), 0.75 * lf);
        assert_eq!(sigma_from_reduced(lf / 2.0, l), lf);
        assert_eq!(sigma_from_reduced(10.0 * lf, l), lf);
    }
}

#[test]
fn splitter_output_layout() {
    let mut p = ParamStore::<f64>::new();
    let sp = FdInfoSplitter::new(&mut p, "s", 3, 4, &mut generator(1));
    let x_cnn = normal_tensor::<f64>(&[2, 3, 8, 8], &mut generator(2)).map(|v| v.clamp(-1.0, 1.0));
    let x_t = normal_tensor::<f64>(&[2, 3, 8, 8], &mut generator(3));
    let out = sp.split(&p, &x_cnn, &x_t, &[1, 40]).unwrap();
    assert_eq!(out.stacked.shape(), &[2, 15, 8, 8]);
    // Channel blocks: x_hf, x_lf, x_t', x_cnn, x_t.
    let per = 3 * 64;
    for n in 0..2 {
        let item = out.stacked.item(n);
        assert_eq!(&item[0..per], out.x_hf.item(n));
        assert_eq!(&item[per..2 * per], out.x_lf.item(n));
        assert_eq!(&item[2 * per..3 * per], out.x_t_denoised.item(n));
        assert_eq!(&item[3 * per..4 * per], x_cnn.item(n));
        assert_eq!(&item[4 * per..], x_t.item(n));
    }
}

fn attention_setup(c: usize, h: usize, w: usize, seed: u64) -> (ParamStore<f64>, HfCrossAttention, Tensor<f64>, Tensor<f64>) {
    let mut p = ParamStore::new();
    let ca = HfCrossAttention::new(&mut p, "ca", c, &mut generator(seed));
    let feats = normal_tensor(&[2, c, h, w], &mut generator(seed + 1));
    let guide = normal_tensor(&[2, 1, h, w], &mut generator(seed + 2));
    (p, ca, feats, guide)
}

#[test]
fn attention_rows_sum_to_one_and_shape_is_kept() {
    for (c, h, w) in [(4, 4, 4), (8, 2, 6), (3, 8, 8)] {
        let (p, ca, feats, guide) = attention_setup(c, h, w, (c * h) as u64);
        let mut g = Graph::inference();
        let f = g.constant(feats);
        let gd = g.constant(guide);
        let (out, weights) = ca.forward(&mut g, &p, f, gd).unwrap();
        assert_eq!(g.shape(out), &[2, c, h, w]);
        assert_eq!(g.shape(weights), &[2, h * w, h * w]);
        for row in g.value(weights).data().chunks(h * w) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_query_mixes_values_uniformly() {
    let (mut p, ca, feats, guide) = attention_setup(4, 4, 4, 9);
    let wq = p.get(ca.query.weight).shape().to_vec();
    let bq = p.get(ca.query.bias).shape().to_vec();
    *p.get_mut(ca.query.weight) = Tensor::zeros(&wq);
    *p.get_mut(ca.query.bias) = Tensor::zeros(&bq);
    let mut g = Graph::inference();
    let f = g.constant(feats.clone());
    let gd = g.constant(guide);
    let (out, weights) = ca.forward(&mut g, &p, f, gd).unwrap();
    assert!(g.value(weights).data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-12));
    // Oracle: per-channel mean of the value projection, broadcast, plus the input.
    let (wv, bv) = (p.get(ca.value.weight).data(), p.get(ca.value.bias).data());
    for n in 0..2 {
        let x = feats.item(n);
        for c in 0..4 {
            let mean: f64 = (0..16)
                .map(|pos| bv[c] + (0..4).map(|ci| wv[c * 4 + ci] * x[ci * 16 + pos]).sum::<f64>())
                .sum::<f64>()
                / 16.0;
            for pos in 0..16 {
                let got = g.value(out).item(n)[c * 16 + pos];
                assert!((got - (mean + x[c * 16 + pos])).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn guidance_matches_wavelet_details() {
    let x = normal_tensor::<f64>(&[1, 3, 16, 16], &mut generator(4));
    let guide = HfGuidance::from_batch(&x, 3).unwrap();
    let pyr = resdiff_core::freq::dwt_haar(&Image::unbatch(&x)[0], 3).unwrap();
    for lvl in 1..=3 {
        let t = guide.level(lvl).unwrap();
        let size = 16 >> lvl;
        assert_eq!(t.shape(), &[1, 1, size, size]);
        let bands = pyr.level(lvl).unwrap().sum();
        for y in 0..size {
            for xx in 0..size {
                let expected: f64 = (0..3).map(|c| bands.get(y, xx, c)).sum();
                assert!((t.data()[y * size + xx] - expected).abs() < 1e-12);
            }
        }
    }
    assert!(guide.level(0).is_none() && guide.level(4).is_none());
}
