//! Alternative initial predictors: interpolation and a three-layer SRCNN.

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Manifest, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::resample::Kernel;
use crate::rng;
use crate::scalar::Scalar;
use crate::simplesr::{upscale_batch, SimpleSr, Upscaler};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrcnnConfig {
    pub scale: usize,
    pub channels: usize,
    pub features: usize,
    pub mapped: usize,
}

impl Default for SrcnnConfig {
    fn default() -> Self {
        SrcnnConfig { scale: 4, channels: 3, features: 64, mapped: 32 }
    }
}

impl SrcnnConfig {
    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("scale", self.scale)
            .set("channels", self.channels)
            .set("features", self.features)
            .set("mapped", self.mapped);
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(SrcnnConfig {
            scale: m.parse("scale")?,
            channels: m.parse("channels")?,
            features: m.parse("features")?,
            mapped: m.parse("mapped")?,
        })
    }
}

/// 9x9 / 1x1 / 5x5 convolutions applied to the bicubic upscale, no skip.
#[derive(Debug, Clone)]
pub struct SrcnnMini<T> {
    config: SrcnnConfig,
    params: ParamStore<T>,
    convs: [Conv2d; 3],
}

impl<T: Scalar> SrcnnMini<T> {
    pub fn new(config: SrcnnConfig, seed: u64) -> Result<Self> {
        if config.scale == 0 || config.channels == 0 || config.features == 0 || config.mapped == 0 {
            return Err(Error::Config(format!("invalid SRCNN config {config:?}")));
        }
        let r = &mut rng::generator(seed);
        let mut p = ParamStore::new();
        let convs = [
            Conv2d::new(&mut p, "conv1", config.channels, config.features, 9, 1, r),
            Conv2d::new(&mut p, "conv2", config.features, config.mapped, 1, 1, r),
            Conv2d::new(&mut p, "conv3", config.mapped, config.channels, 5, 1, r),
        ];
        Ok(SrcnnMini { config, params: p, convs })
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let mut m = Self::new(SrcnnConfig::from_manifest(&ck.manifest.section("arch."))?, 0)?;
        m.load_checkpoint(ck)?;
        Ok(m)
    }
}

impl<T: Scalar> Upscaler<T> for SrcnnMini<T> {
    fn kind(&self) -> &'static str {
        "srcnn_mini"
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
        self.check_input(lr)?;
        let x = g.constant(upscale_batch(lr, self.config.scale, Kernel::Bicubic)?);
        let p = &self.params;
        let h = self.convs[0].forward(g, p, x);
        let h = g.relu(h);
        let h = self.convs[1].forward(g, p, h);
        let h = g.relu(h);
        Ok(self.convs[2].forward(g, p, h))
    }
}

/// The frozen predictor whose output conditions the diffusion model.
#[derive(Debug, Clone)]
pub enum InitialPredictor<T> {
    /// No predictor: the model is conditioned on the bicubic upscale and
    /// generates the HR image itself rather than a residual.
    None { scale: usize },
    Bilinear { scale: usize },
    Srcnn(SrcnnMini<T>),
    SimpleSr(SimpleSr<T>),
}

impl<T: Scalar> InitialPredictor<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            InitialPredictor::None { .. } => "none",
            InitialPredictor::Bilinear { .. } => "bilinear",
            InitialPredictor::Srcnn(_) => "srcnn_mini",
            InitialPredictor::SimpleSr(_) => "simplesr",
        }
    }

    pub fn scale(&self) -> usize {
        match self {
            InitialPredictor::None { scale } | InitialPredictor::Bilinear { scale } => *scale,
            InitialPredictor::Srcnn(m) => m.scale(),
            InitialPredictor::SimpleSr(m) => m.scale(),
        }
    }

    /// Whether diffusion models the residual `y - x_cnn` or `y` itself.
    pub fn is_residual(&self) -> bool {
        !matches!(self, InitialPredictor::None { .. })
    }

    /// Conditioning image for an `[N, C, h, w]` LR batch, in `[-1, 1]`.
    pub fn condition(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let clamp = |t: Tensor<T>| t.map(|v| v.max(-T::one()).min(T::one()));
        match self {
            InitialPredictor::None { scale } => Ok(clamp(upscale_batch(lr, *scale, Kernel::Bicubic)?)),
            InitialPredictor::Bilinear { scale } => Ok(clamp(upscale_batch(lr, *scale, Kernel::Bilinear)?)),
            InitialPredictor::Srcnn(m) => m.predict_batch(lr),
            InitialPredictor::SimpleSr(m) => m.predict_batch(lr),
        }
    }

    /// Architecture and weights; interpolation predictors store only
    /// their kind and scale.
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        match self {
            InitialPredictor::None { scale } | InitialPredictor::Bilinear { scale } => {
                let mut arch = Manifest::new();
                arch.set("scale", scale).set("channels", 3);
                let mut ck = ModelCheckpoint::new(Manifest::new());
                ck.set_architecture(self.kind(), &arch);
                ck
            }
            InitialPredictor::Srcnn(m) => m.to_checkpoint(),
            InitialPredictor::SimpleSr(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let kind = ck.manifest.require("model.kind")?;
        match kind {
            "none" => Ok(InitialPredictor::None { scale: ck.manifest.parse("arch.scale")? }),
            "bilinear" => Ok(InitialPredictor::Bilinear { scale: ck.manifest.parse("arch.scale")? }),
            "srcnn_mini" => Ok(InitialPredictor::Srcnn(SrcnnMini::from_checkpoint(ck)?)),
            "simplesr" => Ok(InitialPredictor::SimpleSr(SimpleSr::from_checkpoint(ck)?)),
            other => Err(Error::Config(format!("checkpoint holds a {other:?} model, not an initial predictor"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    #[test]
    fn srcnn_shapes_and_checkpoint() {
        let cfg = SrcnnConfig { scale: 2, channels: 3, features: 8, mapped: 4 };
        let m = SrcnnMini::<f32>::new(cfg, 1).unwrap();
        let out = m.predict(&Image::filled(6, 6, 3, 0.2)).unwrap();
        assert_eq!(out.dims(), (12, 12, 3));
        let back = SrcnnMini::<f32>::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.predict(&Image::filled(6, 6, 3, 0.2)).unwrap(), out);
    }

    #[test]
    fn interpolation_predictors() {
        let lr = Image::batch(&[Image::filled(4, 4, 3, 0.3f64)]).unwrap();
        for p in [InitialPredictor::<f64>::None { scale: 2 }, InitialPredictor::Bilinear { scale: 2 }] {
            let c = p.condition(&lr).unwrap();
            assert_eq!(c.shape(), &[1, 3, 8, 8]);
            assert!(c.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
        assert!(!InitialPredictor::<f64>::None { scale: 2 }.is_residual());
        assert!(InitialPredictor::<f64>::Bilinear { scale: 2 }.is_residual());
    }

    #[test]
    fn predictor_checkpoints_roundtrip() {
        let lr = Image::batch(&[crate::data::synthetic_image::<f32>(6, 1)]).unwrap();
        let srcnn = SrcnnMini::<f32>::new(SrcnnConfig { scale: 2, channels: 3, features: 4, mapped: 2 }, 3).unwrap();
        for p in [InitialPredictor::None { scale: 2 }, InitialPredictor::Bilinear { scale: 2 }, InitialPredictor::Srcnn(srcnn)] {
            let back = InitialPredictor::<f32>::from_checkpoint(&p.to_checkpoint()).unwrap();
            assert_eq!(back.kind(), p.kind());
            assert_eq!(back.condition(&lr).unwrap(), p.condition(&lr).unwrap());
        }
        let denoiser = ModelCheckpoint::new(Manifest::new());
        assert!(InitialPredictor::<f32>::from_checkpoint(&denoiser).is_err());
    }
}
