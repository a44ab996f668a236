//! Residual diffusion: DDPM algebra over `r0 = (y - x_cnn) / gain`, the
//! conditional denoiser (splitter + U-net), training and ancestral sampling.

use crate::autograd::Graph;
use crate::baselines::InitialPredictor;
use crate::checkpoint::{Manifest, ModelCheckpoint};
use crate::data::{PatchDataset, PatchPair};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::rng::{self, Generator};
use crate::scalar::Scalar;
use crate::splitter::{FdInfoSplitter, DEFAULT_REDUCTION};
use crate::tensor::Tensor;
use crate::unet::{HfGuidance, UNet, UNetConfig};

/// Linear beta schedule and its derived arrays, indexed by `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variance: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Domain("diffusion needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Domain(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let posterior_variance = (0..steps)
        .map(|i| if i == 0 { 0.0 } else { betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) })
        .collect();
    Ok(DiffusionSchedule { betas, alphas, alpha_bars, posterior_variance })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `beta~_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    /// Coefficients of `x0` and `x_t` in the posterior mean.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = if t == 1 { 1.0 } else { self.alpha_bar(t - 1) };
        let c0 = self.beta(t) * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * self.alpha(t).sqrt() / (1.0 - ab);
        (c0, ct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// `r0 = (y - base) / gain`, so `y = base + gain * r0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTarget<T> {
    pub r0: Tensor<T>,
    pub gain: T,
}

impl<T: Scalar> ResidualTarget<T> {
    pub fn new(y: &Tensor<T>, base: &Tensor<T>, gain: T) -> Result<Self> {
        if y.shape() != base.shape() {
            return Err(Error::Dimension(format!("target {:?} vs base {:?}", y.shape(), base.shape())));
        }
        Ok(ResidualTarget { r0: y.zip_map(base, |a, b| (a - b) / gain), gain })
    }

    pub fn reconstruct(&self, base: &Tensor<T>) -> Tensor<T> {
        base.zip_map(&self.r0, |b, r| b + self.gain * r)
    }
}

fn per_item<T: Scalar>(x: &Tensor<T>, t: &[usize], f: impl Fn(usize, T, T) -> T, other: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let per = x.len() / n;
    Tensor::from_fn(x.shape(), |i| f(t[i / per], x.data()[i], other.data()[i]))
}

fn check_batch<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, t: &[usize], schedule: &DiffusionSchedule) -> Result<()> {
    if a.shape() != b.shape() || a.rank() == 0 || a.shape()[0] != t.len() {
        return Err(Error::Dimension(format!(
            "shapes {:?} / {:?} with {} timesteps",
            a.shape(),
            b.shape(),
            t.len()
        )));
    }
    t.iter().try_for_each(|&s| schedule.check_t(s))
}

/// `r_t = sqrt(abar_t) r0 + sqrt(1 - abar_t) eps`, one `t` per batch item.
pub fn q_sample<T: Scalar>(r0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    check_batch(r0, eps, t, schedule)?;
    Ok(per_item(
        r0,
        t,
        |s, r, e| {
            let ab = schedule.alpha_bar(s);
            T::of(ab.sqrt()) * r + T::of((1.0 - ab).sqrt()) * e
        },
        eps,
    ))
}

/// Inverts [`q_sample`] for `r0` given the noise.
pub fn predict_r0<T: Scalar>(r_t: &Tensor<T>, t: &[usize], eps: &Tensor<T>, schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    check_batch(r_t, eps, t, schedule)?;
    Ok(per_item(
        r_t,
        t,
        |s, x, e| {
            let ab = schedule.alpha_bar(s);
            (x - T::of((1.0 - ab).sqrt()) * e) / T::of(ab.sqrt())
        },
        eps,
    ))
}

/// Ancestral sampling from `x_T`. `predict(x_t, t)` returns the noise
/// estimate; item `i` draws its noise from `rngs[i]`. The `r0` estimate is
/// clipped to `[-1, 1]` at every step; no noise is added at `t = 1`.
pub fn ancestral_sample<T: Scalar>(
    schedule: &DiffusionSchedule,
    x_big_t: Tensor<T>,
    rngs: &mut [Generator],
    mut predict: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = x_big_t.shape()[0];
    if rngs.len() != n {
        return Err(Error::Dimension(format!("{} generators for {n} images", rngs.len())));
    }
    let per = x_big_t.len() / n;
    let item_shape = &x_big_t.shape()[1..].to_vec();
    let mut x = x_big_t;
    for t in (1..=schedule.steps()).rev() {
        let eps = predict(&x, t)?;
        let ts = vec![t; n];
        let x0 = predict_r0(&x, &ts, &eps, schedule)?.map(|v| v.max(-T::one()).min(T::one()));
        let (c0, ct) = schedule.posterior_mean_coefs(t);
        let (c0, ct) = (T::of(c0), T::of(ct));
        let mut next = x0.zip_map(&x, |a, b| c0 * a + ct * b);
        if t > 1 {
            let sd = T::of(schedule.posterior_variance(t).sqrt());
            for (i, r) in rngs.iter_mut().enumerate() {
                let z = rng::normal_tensor::<T>(item_shape, r);
                for (dst, &zv) in next.data_mut()[i * per..(i + 1) * per].iter_mut().zip(z.data()) {
                    *dst += sd * zv;
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::Numeric { location: format!("sampling step t={t}") });
        }
        x = next;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub splitter: bool,
    pub se_reduction: usize,
    pub unet: UNetConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { channels: 3, splitter: true, se_reduction: DEFAULT_REDUCTION, unet: UNetConfig::default() }
    }
}

impl DenoiserConfig {
    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("channels", self.channels).set("splitter", self.splitter).set("se_reduction", self.se_reduction);
        m.merge_prefixed("unet.", &self.unet.to_manifest());
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(DenoiserConfig {
            channels: m.parse("channels")?,
            splitter: m.parse("splitter")?,
            se_reduction: m.parse("se_reduction")?,
            unet: UNetConfig::from_manifest(&m.section("unet."))?,
        })
    }
}

/// Noise predictor conditioned on the initial prediction.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    splitter: Option<FdInfoSplitter>,
    unet: UNet,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::Config("denoiser needs at least one channel".into()));
        }
        let r = &mut rng::generator(seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let splitter = config.splitter.then(|| FdInfoSplitter::new(&mut params, "splitter", c, config.se_reduction, r));
        let in_ch = if config.splitter { 5 * c } else { 2 * c };
        let unet = UNet::new(&mut params, "unet", in_ch, c, &config.unet, r)?;
        Ok(Denoiser { config, params, splitter, unet })
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let config = DenoiserConfig::from_manifest(&ck.manifest.section("arch."))?;
        let mut m = Self::new(config, 0)?;
        m.load_checkpoint(ck)?;
        Ok(m)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn splitter(&self) -> Option<&FdInfoSplitter> {
        self.splitter.as_ref()
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut ck = ModelCheckpoint::new(Manifest::new());
        ck.set_architecture("denoiser", &self.config.to_manifest());
        ck.add_params(&self.params);
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &ModelCheckpoint) -> Result<()> {
        ck.check_architecture("denoiser", &self.config.to_manifest())?;
        ck.load_params(&mut self.params)
    }

    fn guidance(&self, x_cond: &Tensor<T>) -> Result<HfGuidance<T>> {
        let u = &self.config.unet;
        if !u.hf_cross_attention || u.depth < 2 {
            return Ok(HfGuidance { levels: Vec::new() });
        }
        HfGuidance::from_batch(x_cond, u.depth - 1)
    }

    /// Noise estimate on `g`; `x_t` may carry gradients.
    pub fn forward(&self, g: &mut Graph<T>, x_cond: &Tensor<T>, x_t: crate::autograd::Var, t: &[usize]) -> Result<crate::autograd::Var> {
        if x_cond.shape() != g.shape(x_t) {
            return Err(Error::Config(format!(
                "conditioning {:?} does not match the diffused tensor {:?}",
                x_cond.shape(),
                g.shape(x_t)
            )));
        }
        let guidance = self.guidance(x_cond)?;
        let input = match &self.splitter {
            Some(s) => s.forward_graph(g, &self.params, x_cond, x_t, t)?.stacked,
            None => {
                let c = g.constant(x_cond.clone());
                g.concat(&[c, x_t])
            }
        };
        self.unet.forward(g, &self.params, input, t, &guidance)
    }

    pub fn predict_noise(&self, x_cond: &Tensor<T>, x_t: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x_t.clone());
        let out = self.forward(&mut g, x_cond, xv, t)?;
        Ok(g.into_value(out))
    }
}

/// How `y` maps into diffusion space for a given predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualFrame {
    /// Whether the conditioning image is subtracted from `y`.
    pub subtract_condition: bool,
    pub gain: f64,
}

impl ResidualFrame {
    pub fn for_predictor<T: Scalar>(p: &InitialPredictor<T>, residual_gain: f64) -> Self {
        if p.is_residual() {
            ResidualFrame { subtract_condition: true, gain: residual_gain }
        } else {
            ResidualFrame { subtract_condition: false, gain: 1.0 }
        }
    }

    pub fn target<T: Scalar>(&self, y: &Tensor<T>, cond: &Tensor<T>) -> Result<ResidualTarget<T>> {
        let base = if self.subtract_condition { cond.clone() } else { Tensor::zeros(cond.shape()) };
        ResidualTarget::new(y, &base, T::of(self.gain))
    }

    pub fn reconstruct<T: Scalar>(&self, r0: &Tensor<T>, cond: &Tensor<T>) -> Tensor<T> {
        let g = T::of(self.gain);
        if self.subtract_condition {
            cond.zip_map(r0, |c, r| (c + g * r).max(-T::one()).min(T::one()))
        } else {
            r0.map(|r| (g * r).max(-T::one()).min(T::one()))
        }
    }
}

/// Samples HR images for an `[N, C, h, w]` LR batch. Item `i` uses the
/// generator seeded with `derive_seed(seed, first_index + i)`.
pub fn sample<T: Scalar>(
    lr: &Tensor<T>,
    predictor: &InitialPredictor<T>,
    model: &Denoiser<T>,
    schedule: &DiffusionSchedule,
    frame: ResidualFrame,
    seed: u64,
    first_index: u64,
) -> Result<Tensor<T>> {
    let cond = predictor.condition(lr)?;
    if cond.shape()[1] != model.config().channels {
        return Err(Error::Config(format!(
            "predictor gives {} channels, denoiser expects {}",
            cond.shape()[1],
            model.config().channels
        )));
    }
    let n = cond.shape()[0];
    let mut rngs: Vec<Generator> = (0..n).map(|i| rng::generator(rng::derive_seed(seed, first_index + i as u64))).collect();
    let item_shape = cond.shape()[1..].to_vec();
    let mut init = Vec::with_capacity(cond.len());
    for r in rngs.iter_mut() {
        init.extend(rng::normal_tensor::<T>(&item_shape, r).into_data());
    }
    let x_big_t = Tensor::new(cond.shape(), init)?;
    let r0 = ancestral_sample(schedule, x_big_t, &mut rngs, |x, t| model.predict_noise(&cond, x, &vec![t; n]))?;
    Ok(frame.reconstruct(&r0, &cond))
}

/// Samples every pair's LR image in chunks of `batch`; results do not
/// depend on `batch`. Never reads the HR side.
pub fn sample_pairs<T: Scalar>(
    pairs: &[PatchPair<T>],
    predictor: &InitialPredictor<T>,
    model: &Denoiser<T>,
    schedule: &DiffusionSchedule,
    frame: ResidualFrame,
    seed: u64,
    batch: usize,
) -> Result<Vec<Image<T>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (k, chunk) in pairs.chunks(batch.max(1)).enumerate() {
        let lrs: Vec<Image<T>> = chunk.iter().map(|p| p.lr.clone()).collect();
        let hr = sample(&Image::batch(&lrs)?, predictor, model, schedule, frame, seed, (k * batch.max(1)) as u64)?;
        out.extend(Image::unbatch(&hr));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub residual_gain: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 20_000,
            batch_size: 8,
            adam: AdamConfig { clip_norm: Some(1.0), ..Default::default() },
            schedule: ScheduleConfig::default(),
            residual_gain: 2.0,
        }
    }
}

/// Trains a [`Denoiser`] against a frozen predictor.
pub struct DiffusionTrainer<T> {
    pub model: Denoiser<T>,
    pub predictor: InitialPredictor<T>,
    pub schedule: DiffusionSchedule,
    pub frame: ResidualFrame,
    config: DiffusionTrainConfig,
    adam: Adam<T>,
    rng: Generator,
    step: u64,
    seed: u64,
    history: Vec<(u64, f64)>,
    cond_cache: Option<Vec<Image<T>>>,
}

impl<T: Scalar> DiffusionTrainer<T> {
    pub fn new(model: Denoiser<T>, predictor: InitialPredictor<T>, config: DiffusionTrainConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(config.residual_gain > 0.0) {
            return Err(Error::Config(format!("residual gain must be positive, got {}", config.residual_gain)));
        }
        let schedule = config.schedule.build()?;
        let adam = Adam::new(config.adam, model.params());
        let frame = ResidualFrame::for_predictor(&predictor, config.residual_gain);
        Ok(DiffusionTrainer {
            model,
            predictor,
            schedule,
            frame,
            config,
            adam,
            rng: rng::generator(rng::derive_seed(seed, 0xd1ff)),
            step: 0,
            seed,
            history: Vec::new(),
            cond_cache: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[(u64, f64)] {
        &self.history
    }

    fn conditioned_batch(&mut self, data: &PatchDataset<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let draws = data.draw(&mut self.rng, self.config.batch_size);
        if let Some((_, lr_all)) = data.fixed_train_pairs() {
            if self.cond_cache.is_none() {
                let mut cache = Vec::with_capacity(lr_all.len());
                for chunk in lr_all.chunks(16) {
                    cache.extend(Image::unbatch(&self.predictor.condition(&Image::batch(chunk)?)?));
                }
                self.cond_cache = Some(cache);
            }
            let cache = self.cond_cache.as_ref().expect("filled above");
            let mut hrs = Vec::with_capacity(draws.len());
            let mut conds = Vec::with_capacity(draws.len());
            for d in draws {
                hrs.push(data.patch(d)?.0);
                conds.push(cache[d.0].clone());
            }
            return Ok((Image::batch(&hrs)?, Image::batch(&conds)?));
        }
        let mut hrs = Vec::with_capacity(draws.len());
        let mut lrs = Vec::with_capacity(draws.len());
        for d in draws {
            let (hr, lr) = data.patch(d)?;
            hrs.push(hr);
            lrs.push(lr);
        }
        Ok((Image::batch(&hrs)?, self.predictor.condition(&Image::batch(&lrs)?)?))
    }

    /// One update; returns the noise-prediction MSE.
    pub fn step(&mut self, data: &PatchDataset<T>) -> Result<f64> {
        let step = self.step + 1;
        let (hr, cond) = self.conditioned_batch(data)?;
        let target = self.frame.target(&hr, &cond)?;
        let n = hr.shape()[0];
        let t: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut self.rng, 1..=self.schedule.steps())).collect();
        let eps = rng::normal_tensor::<T>(hr.shape(), &mut self.rng);
        let r_t = q_sample(&target.r0, &t, &eps, &self.schedule)?;
        let mut g = Graph::new();
        let xv = g.constant(r_t);
        let pred = self.model.forward(&mut g, &cond, xv, &t).map_err(|e| match e {
            Error::Numeric { location } => Error::Numeric { location: format!("{location} at diffusion step {step}") },
            other => other,
        })?;
        let ev = g.constant(eps);
        let loss = g.mse(pred, ev);
        let value = g.value(loss).data()[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Numeric { location: format!("diffusion loss at step {step}") });
        }
        let grads = g.backward(loss);
        self.adam.update(self.model.params_mut(), &grads.into_params());
        if self.model.params().iter().any(|(_, _, w)| !w.is_finite()) {
            return Err(Error::Numeric { location: format!("denoiser weights after step {step}") });
        }
        self.step = step;
        self.history.push((step, value));
        Ok(value)
    }

    pub fn run(&mut self, data: &PatchDataset<T>, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step(data)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        let mut ck = self.model.to_checkpoint();
        ck.add_optimizer(self.model.params(), &self.adam);
        ck.set_generator("train.rng", &self.rng);
        let s = &self.config.schedule;
        ck.manifest
            .set("train.step", self.step)
            .set("train.seed", self.seed)
            .set("train.batch_size", self.config.batch_size)
            .set("diffusion.steps", s.steps)
            .set("diffusion.beta_start", s.beta_start)
            .set("diffusion.beta_end", s.beta_end)
            .set("diffusion.gain", self.frame.gain)
            .set("diffusion.subtract_condition", self.frame.subtract_condition)
            .set("cond.kind", self.predictor.kind());
        ck
    }

    pub fn resume(&mut self, ck: &ModelCheckpoint) -> Result<()> {
        self.model.load_checkpoint(ck)?;
        ck.load_optimizer(self.model.params(), &mut self.adam)?;
        self.rng = ck.generator("train.rng")?;
        self.step = ck.manifest.parse("train.step")?;
        Ok(())
    }
}

/// Schedule and frame stored in a denoiser checkpoint.
pub fn sampling_setup(ck: &ModelCheckpoint) -> Result<(DiffusionSchedule, ResidualFrame)> {
    let m = &ck.manifest;
    let schedule = make_schedule(m.parse("diffusion.steps")?, m.parse("diffusion.beta_start")?, m.parse("diffusion.beta_end")?)?;
    let frame = ResidualFrame { subtract_condition: m.parse("diffusion.subtract_condition")?, gain: m.parse("diffusion.gain")? };
    Ok((schedule, frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{generator, normal_tensor};

    #[test]
    fn schedule_basics() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.posterior_variance(1), 0.0);
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.posterior_variance(t) > 0.0 && s.posterior_variance(t) <= s.beta(t));
        }
        assert!(matches!(make_schedule(10, 0.02, 1e-4), Err(Error::Domain(_))));
        assert!(matches!(s.check_t(0), Err(Error::Range(_))));
    }

    #[test]
    fn q_sample_inverts() {
        let s = make_schedule(50, 1e-4, 0.05).unwrap();
        let r0 = normal_tensor::<f64>(&[2, 3, 4, 4], &mut generator(0));
        let eps = normal_tensor::<f64>(&[2, 3, 4, 4], &mut generator(1));
        let rt = q_sample(&r0, &[3, 50], &eps, &s).unwrap();
        let back = predict_r0(&rt, &[3, 50], &eps, &s).unwrap();
        assert!(back.max_abs_diff(&r0) < 1e-10);
        let zero = q_sample(&r0, &[3, 50], &Tensor::zeros(r0.shape()), &s).unwrap();
        assert!((zero.data()[0] - s.alpha_bar(3).sqrt() * r0.data()[0]).abs() < 1e-15);
        assert!(matches!(q_sample(&r0, &[0, 1], &eps, &s), Err(Error::Range(_))));
    }

    #[test]
    fn single_step_oracle_recovers_r0() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        let r0 = normal_tensor::<f64>(&[1, 3, 8, 8], &mut generator(3)).map(|v| (v * 0.3).clamp(-1.0, 1.0));
        let eps = normal_tensor::<f64>(r0.shape(), &mut generator(4));
        let x1 = q_sample(&r0, &[1], &eps, &s).unwrap();
        let out = ancestral_sample(&s, x1, &mut [generator(0)], |_, _| Ok(eps.clone())).unwrap();
        assert!(out.max_abs_diff(&r0) < 1e-4);
    }

    #[test]
    fn residual_target_roundtrip() {
        let y = normal_tensor::<f64>(&[1, 3, 4, 4], &mut generator(0));
        let base = normal_tensor::<f64>(&[1, 3, 4, 4], &mut generator(1));
        let r = ResidualTarget::new(&y, &base, 2.0).unwrap();
        assert!(r.reconstruct(&base).max_abs_diff(&y) < 1e-15);
    }

    fn tiny_denoiser(splitter: bool) -> DenoiserConfig {
        DenoiserConfig {
            channels: 3,
            splitter,
            se_reduction: 16,
            unet: UNetConfig {
                depth: 2,
                base_channels: 8,
                channel_mults: vec![1, 1, 2],
                attention_levels: vec![2],
                hf_cross_attention: true,
            },
        }
    }

    #[test]
    fn training_starts_near_unit_loss_and_is_deterministic() {
        let data = PatchDataset::<f32>::synthetic(12, 16, 2, 0).unwrap();
        let cfg = DiffusionTrainConfig {
            batch_size: 4,
            schedule: ScheduleConfig { steps: 20, beta_start: 1e-3, beta_end: 0.2 },
            ..Default::default()
        };
        let run = || {
            let m = Denoiser::<f32>::new(tiny_denoiser(true), 1).unwrap();
            let mut tr = DiffusionTrainer::new(m, InitialPredictor::Bilinear { scale: 2 }, cfg, 5).unwrap();
            tr.run(&data, 3).unwrap();
            (tr.history().to_vec(), tr.checkpoint())
        };
        let (h1, c1) = run();
        let (h2, c2) = run();
        assert_eq!(h1, h2);
        assert_eq!(c1, c2);
        assert!((0.5..2.0).contains(&h1[0].1), "initial loss {}", h1[0].1);
    }

    #[test]
    fn sampling_shapes_seeds_and_batch_independence() {
        let data = PatchDataset::<f32>::synthetic(12, 16, 2, 0).unwrap();
        let model = Denoiser::<f32>::new(tiny_denoiser(false), 1).unwrap();
        let pred = InitialPredictor::Bilinear { scale: 2 };
        let s = make_schedule(5, 1e-3, 0.2).unwrap();
        let frame = ResidualFrame::for_predictor(&pred, 2.0);
        let pairs = data.val();
        let a = sample_pairs(pairs, &pred, &model, &s, frame, 7, 1).unwrap();
        let b = sample_pairs(pairs, &pred, &model, &s, frame, 7, 4).unwrap();
        let c = sample_pairs(pairs, &pred, &model, &s, frame, 8, 1).unwrap();
        assert_eq!(a[0].dims(), (16, 16, 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
