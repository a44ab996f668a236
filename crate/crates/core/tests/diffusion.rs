use rand::Rng;
use resdiff_core::autograd::Graph;
use resdiff_core::baselines::InitialPredictor;
use resdiff_core::data::PatchDataset;
use resdiff_core::diffusion::*;
use resdiff_core::rng::{generator, normal_tensor};
use resdiff_core::unet::UNetConfig;
use resdiff_core::{Error, Tensor};

fn toy_config(splitter: bool) -> DenoiserConfig {
    DenoiserConfig {
        channels: 3,
        splitter,
        se_reduction: 4,
        unet: UNetConfig {
            depth: 2,
            base_channels: 8,
            channel_mults: vec![1, 2, 2],
            attention_levels: vec![2],
            hf_cross_attention: true,
        },
    }
}

/// Untrained denoisers predict exactly zero; randomize the output layer.
fn toy_model<T: resdiff_core::Scalar>(splitter: bool, seed: u64) -> Denoiser<T> {
    let mut m = Denoiser::<T>::new(toy_config(splitter), seed).unwrap();
    let conv = m.unet().output_conv().clone();
    let mut r = generator(seed + 100);
    for id in [conv.weight, conv.bias] {
        let t = m.params_mut().get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = T::of(r.random_range(-0.1..0.1)));
    }
    m
}

#[test]
fn r0_reconstruction_at_every_t() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let r0 = normal_tensor::<f32>(&[1, 3, 8, 8], &mut generator(0)).map(|v| v.clamp(-1.0, 1.0));
    for t in 1..=1000 {
        let eps = normal_tensor::<f32>(r0.shape(), &mut generator(t as u64));
        let rt = q_sample(&r0, &[t], &eps, &s).unwrap();
        let back = predict_r0(&rt, &[t], &eps, &s).unwrap();
        // f32 rounding of r_t is amplified by 1 / sqrt(abar_t).
        let tol = 1e-5f32.max(4.0 * f32::EPSILON / s.alpha_bar(t).sqrt() as f32 * 4.0);
        assert!(back.max_abs_diff(&r0) <= tol, "t={t}: {}", back.max_abs_diff(&r0));
    }
    let r0 = Tensor::new(r0.shape(), r0.data().iter().map(|&v| v as f64).collect()).unwrap();
    for t in 1..=1000 {
        let eps = normal_tensor::<f64>(r0.shape(), &mut generator(t as u64));
        let back = predict_r0(&q_sample(&r0, &[t], &eps, &s).unwrap(), &[t], &eps, &s).unwrap();
        assert!(back.max_abs_diff(&r0) < 1e-5);
    }
}

#[test]
fn alpha_bar_is_monotone() {
    for (steps, b0, b1) in [(1000, 1e-4, 0.02), (200, 1e-4, 0.02), (50, 1e-3, 0.3), (2, 0.1, 0.1)] {
        let s = make_schedule(steps, b0, b1).unwrap();
        assert!(s.alpha_bar(1) < 1.0);
        for t in 2..=steps {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) >= s.beta(t - 1));
        }
    }
    assert!(matches!(make_schedule(0, 1e-4, 0.02), Err(Error::Domain(_))));
    assert!(matches!(make_schedule(10, 0.0, 0.02), Err(Error::Domain(_))));
    assert!(matches!(make_schedule(10, 1e-4, 1.0), Err(Error::Domain(_))));
}

#[test]
fn single_step_oracle_sampling() {
    let s = make_schedule(1, 1e-4, 0.02).unwrap();
    for seed in 0..10 {
        let r0 = normal_tensor::<f64>(&[2, 3, 8, 8], &mut generator(seed)).map(|v| (0.4 * v).clamp(-1.0, 1.0));
        let eps = normal_tensor::<f64>(r0.shape(), &mut generator(seed + 50));
        let x1 = q_sample(&r0, &[1, 1], &eps, &s).unwrap();
        let out = ancestral_sample(&s, x1, &mut [generator(0), generator(1)], |_, t| {
            assert_eq!(t, 1);
            Ok(eps.clone())
        })
        .unwrap();
        assert!(out.max_abs_diff(&r0) < 1e-4);
    }
}

#[test]
fn sampling_is_seeded_and_diverse() {
    let data = PatchDataset::<f32>::synthetic(10, 16, 2, 3).unwrap();
    let model = toy_model::<f32>(true, 1);
    let pred = InitialPredictor::Bilinear { scale: 2 };
    let s = make_schedule(8, 1e-3, 0.2).unwrap();
    let frame = ResidualFrame::for_predictor(&pred, 2.0);
    let pairs = &data.val()[..1];
    let a = sample_pairs(pairs, &pred, &model, &s, frame, 42, 2).unwrap();
    let b = sample_pairs(pairs, &pred, &model, &s, frame, 42, 2).unwrap();
    assert_eq!(a, b);
    let seeds = [1u64, 2, 3];
    let outs: Vec<_> = seeds.iter().map(|&sd| sample_pairs(pairs, &pred, &model, &s, frame, sd, 1).unwrap()).collect();
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            assert!(outs[i][0].max_abs_diff(&outs[j][0]) > 0.0);
        }
    }
    let leak = data.with_scrambled_targets(9);
    assert_eq!(sample_pairs(&leak.val()[..1], &pred, &model, &s, frame, 42, 2).unwrap(), a);
}

#[test]
fn predict_noise_gradient_matches_finite_differences() {
    for splitter in [false, true] {
        let model = toy_model::<f64>(splitter, 5);
        let cond = normal_tensor::<f64>(&[1, 3, 16, 16], &mut generator(6)).map(|v| (0.5 * v).clamp(-1.0, 1.0));
        let x = normal_tensor::<f64>(&[1, 3, 16, 16], &mut generator(7));
        let t = [17];
        let mean_out = |x: &Tensor<f64>| {
            let y = model.predict_noise(&cond, x, &t).unwrap();
            y.data().iter().sum::<f64>() / y.len() as f64
        };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = model.forward(&mut g, &cond, xv, &t).unwrap();
        let m = g.mean_all(y);
        let grads = g.backward(m);
        let analytic = grads.get(xv).unwrap();
        for &pixel in &[0usize, 137, 255, 300, 511, 767] {
            let h = 1e-5;
            let mut xp = x.clone();
            xp.data_mut()[pixel] += h;
            let up = mean_out(&xp);
            xp.data_mut()[pixel] -= 2.0 * h;
            let down = mean_out(&xp);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[pixel];
            let rel = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-3, "splitter={splitter} pixel {pixel}: {a} vs {numeric}");
        }
    }
}

/// Empirical Lipschitz constant of `predict_noise` in `x_t` on the toy
/// config. The bound is a regression guard, not a property of the method.
#[test]
fn predict_noise_lipschitz_regression() {
    let model = toy_model::<f64>(true, 8);
    let cond = normal_tensor::<f64>(&[1, 3, 16, 16], &mut generator(9)).map(|v| (0.5 * v).clamp(-1.0, 1.0));
    let x = normal_tensor::<f64>(&[1, 3, 16, 16], &mut generator(10));
    let base = model.predict_noise(&cond, &x, &[50]).unwrap();
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut k: f64 = 0.0;
    for trial in 0..8 {
        let dir = normal_tensor::<f64>(x.shape(), &mut generator(100 + trial));
        let delta = 1e-3 / norm(&dir);
        let xp = x.zip_map(&dir, |a, d| a + delta * d);
        let out = model.predict_noise(&cond, &xp, &[50]).unwrap();
        k = k.max(norm(&out.zip_map(&base, |a, b| a - b)) / 1e-3);
    }
    println!("empirical Lipschitz constant K = {k:.4}");
    assert!(k.is_finite() && k > 0.0 && k < LIPSCHITZ_BOUND, "K = {k}");
}

const LIPSCHITZ_BOUND: f64 = 2.0;

#[test]
fn training_checkpoint_resume_is_exact() {
    let data = PatchDataset::<f32>::synthetic(12, 16, 2, 0).unwrap();
    let cfg = DiffusionTrainConfig {
        batch_size: 2,
        schedule: ScheduleConfig { steps: 20, beta_start: 1e-3, beta_end: 0.2 },
        ..Default::default()
    };
    let fresh = || {
        DiffusionTrainer::new(Denoiser::<f32>::new(toy_config(true), 1).unwrap(), InitialPredictor::Bilinear { scale: 2 }, cfg, 3)
            .unwrap()
    };
    let mut straight = fresh();
    straight.run(&data, 4).unwrap();
    let mut first = fresh();
    first.run(&data, 2).unwrap();
    let ck = first.checkpoint();
    let mut resumed = fresh();
    resumed.resume(&ck).unwrap();
    resumed.run(&data, 2).unwrap();
    assert_eq!(resumed.history(), &straight.history()[2..]);
    assert_eq!(resumed.checkpoint(), straight.checkpoint());
}
