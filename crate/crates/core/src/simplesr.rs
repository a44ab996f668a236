//! SimpleSR: a small residual CNN that produces the initial HR estimate,
//! and its pretraining loop under the frequency-domain CNN loss.

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Manifest, ModelCheckpoint};
use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{loss_cnn_with_grad, LossWeights};
use crate::nn::{Adam, AdamConfig, Conv2d, ParamStore};
use crate::resample::{upscale, Kernel};
use crate::rng::{self, Generator};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rearranges `[H, W, C*s*s]` into `[H*s, W*s, C]`:
/// `out[y*s+dy, x*s+dx, c] = in[y, x, c*s*s + dy*s + dx]`.
pub fn pixel_shuffle<T: Scalar>(image: &Image<T>, s: usize) -> Result<Image<T>> {
    let (h, w, cin) = image.dims();
    if s == 0 || cin % (s * s) != 0 {
        return Err(Error::Dimension(format!("{cin} channels cannot be shuffled by factor {s}")));
    }
    let c = cin / (s * s);
    Ok(Image::from_fn(h * s, w * s, c, |y, x, ch| image.get(y / s, x / s, ch * s * s + (y % s) * s + x % s)))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(image: &Image<T>, s: usize) -> Result<Image<T>> {
    let (h, w, c) = image.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Dimension(format!("{h}x{w} image cannot be unshuffled by factor {s}")));
    }
    Ok(Image::from_fn(h / s, w / s, c * s * s, |y, x, ch| {
        let (c0, r) = (ch / (s * s), ch % (s * s));
        image.get(y * s + r / s, x * s + r % s, c0)
    }))
}

/// Bicubic upscaling of every item of an `[N, C, h, w]` batch.
pub fn bicubic_batch<T: Scalar>(lr: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    upscale_batch(lr, scale, Kernel::Bicubic)
}

pub fn upscale_batch<T: Scalar>(lr: &Tensor<T>, scale: usize, kernel: Kernel) -> Result<Tensor<T>> {
    let ups = Image::unbatch(lr).iter().map(|im| upscale(im, scale, kernel)).collect::<Result<Vec<_>>>()?;
    Image::batch(&ups)
}

fn clamp_unit<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(-T::one()).min(T::one()))
}

/// A trainable LR-to-HR predictor.
pub trait Upscaler<T: Scalar> {
    /// Short name stored in checkpoints (`simplesr`, `srcnn_mini`).
    fn kind(&self) -> &'static str;
    fn scale(&self) -> usize;
    fn channels(&self) -> usize;
    /// Architecture fields that must match when loading weights.
    fn architecture(&self) -> Manifest;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Unclamped prediction for an `[N, C, h, w]` LR batch.
    fn forward_graph(&self, g: &mut Graph<T>, lr: &Tensor<T>) -> Result<Var>;

    /// Inference on a batch, clamped to `[-1, 1]`.
    fn predict_batch(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let y = self.forward_graph(&mut g, lr)?;
        let out = g.into_value(y);
        if !out.is_finite() {
            return Err(Error::Numeric { location: format!("{} output", self.kind()) });
        }
        Ok(clamp_unit(out))
    }

    fn predict(&self, lr: &Image<T>) -> Result<Image<T>> {
        let out = self.predict_batch(&lr.to_tensor())?;
        Ok(Image::unbatch(&out).remove(0))
    }

    fn check_input(&self, lr: &Tensor<T>) -> Result<()> {
        if lr.rank() != 4 || lr.shape()[1] != self.channels() {
            return Err(Error::Dimension(format!(
                "{} expects [N, {}, h, w] input, got {:?}",
                self.kind(),
                self.channels(),
                lr.shape()
            )));
        }
        Ok(())
    }

    /// Checkpoint holding architecture and weights.
    fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut ck = ModelCheckpoint::new(Manifest::new());
        ck.set_architecture(self.kind(), &self.architecture());
        ck.add_params(self.params());
        ck
    }

    /// Loads weights after checking the stored architecture.
    fn load_checkpoint(&mut self, ck: &ModelCheckpoint) -> Result<()> {
        ck.check_architecture(self.kind(), &self.architecture())?;
        ck.load_params(self.params_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimpleSrConfig {
    pub scale: usize,
    pub channels: usize,
    pub base_channels: usize,
    pub res_blocks: usize,
}

impl Default for SimpleSrConfig {
    fn default() -> Self {
        SimpleSrConfig { scale: 4, channels: 3, base_channels: 64, res_blocks: 8 }
    }
}

impl SimpleSrConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::Config(format!("SimpleSR scale must be 2, 4 or 8, got {}", self.scale)));
        }
        if self.channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("SimpleSR channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("scale", self.scale)
            .set("channels", self.channels)
            .set("base_channels", self.base_channels)
            .set("res_blocks", self.res_blocks);
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let c = SimpleSrConfig {
            scale: m.parse("scale")?,
            channels: m.parse("channels")?,
            base_channels: m.parse("base_channels")?,
            res_blocks: m.parse("res_blocks")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Head conv, residual blocks, one conv + pixel-shuffle stage per factor of
/// two, a zero-initialized output conv, and a global bicubic skip. At
/// initialization the network therefore reproduces bicubic upscaling.
#[derive(Debug, Clone)]
pub struct SimpleSr<T> {
    config: SimpleSrConfig,
    params: ParamStore<T>,
    initialized: bool,
    head: Conv2d,
    blocks: Vec<ResBlock>,
    upsample: Vec<Conv2d>,
    tail: Conv2d,
}

impl<T: Scalar> SimpleSr<T> {
    pub fn new(config: SimpleSrConfig, seed: u64) -> Result<Self> {
        let mut model = Self::build(config, &mut rng::generator(seed))?;
        model.initialized = true;
        Ok(model)
    }

    /// The architecture without usable weights; inference fails until a
    /// checkpoint is loaded.
    pub fn uninitialized(config: SimpleSrConfig) -> Result<Self> {
        Self::build(config, &mut rng::generator(0))
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let config = SimpleSrConfig::from_manifest(&ck.manifest.section("arch."))?;
        let mut model = Self::uninitialized(config)?;
        model.load_checkpoint(ck)?;
        Ok(model)
    }

    fn build(config: SimpleSrConfig, r: &mut Generator) -> Result<Self> {
        config.validate()?;
        let (c, f) = (config.channels, config.base_channels);
        let mut p = ParamStore::new();
        let head = Conv2d::new(&mut p, "head", c, f, 3, 1, r);
        let blocks = (0..config.res_blocks)
            .map(|i| ResBlock {
                conv1: Conv2d::new(&mut p, &format!("body.{i}.conv1"), f, f, 3, 1, r),
                conv2: Conv2d::new(&mut p, &format!("body.{i}.conv2"), f, f, 3, 1, r),
            })
            .collect();
        let stages = config.scale.trailing_zeros() as usize;
        let upsample = (0..stages).map(|i| Conv2d::new(&mut p, &format!("up.{i}"), f, 4 * f, 3, 1, r)).collect();
        let tail = Conv2d::zeroed(&mut p, "tail", f, c, 3);
        Ok(SimpleSr { config, params: p, initialized: false, head, blocks, upsample, tail })
    }

    pub fn config(&self) -> &SimpleSrConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}

impl<T: Scalar> Upscaler<T> for SimpleSr<T> {
    fn kind(&self) -> &'static str {
        "simplesr"
    }

    fn scale(&self) -> usize {
        self.config.scale
    }

    fn channels(&self) -> usize {
        self.config.channels
    }

    fn architecture(&self) -> Manifest {
        self.config.to_manifest()
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_graph(&self, g: &mut Graph<T>, lr: &Tensor<T>) -> Result<Var> {
        if !self.initialized {
            return Err(Error::State("SimpleSR weights are not initialized".into()));
        }
        self.check_input(lr)?;
        let skip = g.constant(bicubic_batch(lr, self.config.scale)?);
        let x = g.constant(lr.clone());
        let p = &self.params;
        let mut h = self.head.forward(g, p, x);
        for b in &self.blocks {
            let t = b.conv1.forward(g, p, h);
            let t = g.relu(t);
            let t = b.conv2.forward(g, p, t);
            h = g.add(h, t);
        }
        for conv in &self.upsample {
            let t = conv.forward(g, p, h);
            let t = g.pixel_shuffle(t, 2);
            h = g.relu(t);
        }
        let out = self.tail.forward(g, p, h);
        Ok(g.add(out, skip))
    }

    fn load_checkpoint(&mut self, ck: &ModelCheckpoint) -> Result<()> {
        ck.check_architecture(self.kind(), &self.architecture())?;
        ck.load_params(&mut self.params)?;
        self.initialized = true;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 10_000,
            batch_size: 16,
            adam: AdamConfig { clip_norm: Some(1.0), ..Default::default() },
            weights: LossWeights::default(),
        }
    }
}

/// Mean losses over one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub gt: f64,
    pub fft: f64,
    pub dwt: f64,
    pub total: f64,
}

/// Stateful pretraining of an [`Upscaler`]; checkpoints include optimizer
/// moments and the batch generator so runs resume exactly.
pub struct CnnTrainer<T, M> {
    pub model: M,
    adam: Adam<T>,
    rng: Generator,
    step: u64,
    seed: u64,
    batch_size: usize,
    weights: LossWeights,
    history: Vec<LossRecord>,
}

impl<T: Scalar, M: Upscaler<T>> CnnTrainer<T, M> {
    pub fn new(model: M, config: &PretrainConfig, seed: u64) -> Result<Self> {
        config.weights.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let adam = Adam::new(config.adam, model.params());
        Ok(CnnTrainer {
            model,
            adam,
            rng: rng::generator(rng::derive_seed(seed, 0x5eed)),
            step: 0,
            seed,
            batch_size: config.batch_size,
            weights: config.weights,
            history: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    /// One optimizer update on a fresh minibatch.
    pub fn step(&mut self, data: &PatchDataset<T>) -> Result<LossRecord> {
        let step = self.step + 1;
        let batch = data.sample_batch(&mut self.rng, self.batch_size)?;
        let mut g = Graph::new();
        let y = self.model.forward_graph(&mut g, &batch.lr)?;
        let preds = Image::unbatch(g.value(y));
        let targets = Image::unbatch(&batch.hr);
        let n = T::of_usize(preds.len());
        let mut record = LossRecord { step, gt: 0.0, fft: 0.0, dwt: 0.0, total: 0.0 };
        let mut seed_grads = Vec::with_capacity(preds.len());
        for (p, t) in preds.iter().zip(&targets) {
            let (parts, grad) = loss_cnn_with_grad(p, t, &self.weights)?;
            record.gt += parts.gt.to_f64_lossy();
            record.fft += parts.fft.to_f64_lossy();
            record.dwt += parts.dwt.to_f64_lossy();
            record.total += parts.total.to_f64_lossy();
            seed_grads.push(grad.map(|v| v / n));
        }
        let k = preds.len() as f64;
        record.gt /= k;
        record.fft /= k;
        record.dwt /= k;
        record.total /= k;
        if !record.total.is_finite() {
            return Err(Error::Numeric { location: format!("pretrain loss at step {step}") });
        }
        let grads = g.backward_seeded(y, Image::batch(&seed_grads)?);
        self.adam.update(self.model.params_mut(), &grads.into_params());
        if self.model.params().iter().any(|(_, _, t)| !t.is_finite()) {
            return Err(Error::Numeric { location: format!("pretrain weights after step {step}") });
        }
        self.step = step;
        self.history.push(record);
        Ok(record)
    }

    pub fn run(&mut self, data: &PatchDataset<T>, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step(data)?;
        }
        Ok(())
    }

    /// Weights plus everything needed to resume.
    pub fn checkpoint(&self) -> ModelCheckpoint {
        let mut ck = self.model.to_checkpoint();
        ck.add_optimizer(self.model.params(), &self.adam);
        ck.set_generator("train.rng", &self.rng);
        ck.manifest
            .set("train.step", self.step)
            .set("train.seed", self.seed)
            .set("train.batch_size", self.batch_size)
            .set("loss.alpha", self.weights.alpha)
            .set("loss.beta", self.weights.beta)
            .set("loss.dwt_levels", self.weights.dwt_levels);
        ck
    }

    /// Restores weights, optimizer, step and generator from `ck`.
    pub fn resume(&mut self, ck: &ModelCheckpoint) -> Result<()> {
        self.model.load_checkpoint(ck)?;
        ck.load_optimizer(self.model.params(), &mut self.adam)?;
        self.rng = ck.generator("train.rng")?;
        self.step = ck.manifest.parse("train.step")?;
        Ok(())
    }
}

/// Pretrains `model` for `config.steps` updates and returns the final
/// checkpoint together with the per-step loss history.
pub fn pretrain_cnn<T: Scalar, M: Upscaler<T>>(
    model: M,
    data: &PatchDataset<T>,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(ModelCheckpoint, Vec<LossRecord>)> {
    let mut trainer = CnnTrainer::new(model, config, seed)?;
    trainer.run(data, config.steps)?;
    Ok((trainer.checkpoint(), trainer.history))
}
