//! Run configuration: one TOML file, every field optional.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/example"
//!
//! [data]
//! dir = "data/div2k_patches"   # omit for the procedural corpus
//! hr_patch = 64
//! scale = 4
//!
//! [ablation]
//! cnn = "simplesr"             # none | bilinear | srcnn_mini | simplesr
//! splitter = "on"
//! hf_ca = "on"
//! cnn_loss = "full"            # full | gt_only
//! ```
//!
//! The resolved configuration (defaults filled in) is written beside every
//! run's outputs as `config.toml`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use resdiff_core::baselines::SrcnnConfig;
use resdiff_core::diffusion::{DenoiserConfig, DiffusionTrainConfig, ScheduleConfig};
use resdiff_core::losses::LossWeights;
use resdiff_core::nn::AdamConfig;
use resdiff_core::simplesr::{PretrainConfig, SimpleSrConfig};
use resdiff_core::unet::UNetConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub simplesr: SimpleSrSection,
    pub srcnn: SrcnnSection,
    pub loss: LossSection,
    pub pretrain: OptimSection,
    pub unet: UNetSection,
    pub diffusion: DiffusionSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub ablation: Toggles,
    pub ablate: AblateSection,
    pub checkpoints: CheckpointPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            simplesr: SimpleSrSection::default(),
            srcnn: SrcnnSection::default(),
            loss: LossSection::default(),
            pretrain: OptimSection { steps: 10_000, batch_size: 16, ..OptimSection::default() },
            unet: UNetSection::default(),
            diffusion: DiffusionSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            ablation: Toggles::default(),
            ablate: AblateSection::default(),
            checkpoints: CheckpointPaths::default(),
        }
    }
}

/// Image source. Without `dir`, a procedural corpus of `synthetic_count`
/// images of `synthetic_size` pixels is generated from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub hr_patch: usize,
    pub scale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: None, synthetic_count: 400, synthetic_size: 96, hr_patch: 64, scale: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimpleSrSection {
    pub base_channels: usize,
    pub res_blocks: usize,
}

impl Default for SimpleSrSection {
    fn default() -> Self {
        let d = SimpleSrConfig::default();
        SimpleSrSection { base_channels: d.base_channels, res_blocks: d.res_blocks }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrcnnSection {
    pub features: usize,
    pub mapped: usize,
}

impl Default for SrcnnSection {
    fn default() -> Self {
        let d = SrcnnConfig::default();
        SrcnnSection { features: d.features, mapped: d.mapped }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub dwt_levels: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossWeights::default();
        LossSection { alpha: d.alpha, beta: d.beta, dwt_levels: d.dwt_levels }
    }
}

/// Optimizer and loop settings shared by both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection { steps: 20_000, batch_size: 8, learning_rate: 2e-4, clip_norm: 1.0, checkpoint_every: 0 }
    }
}

impl OptimSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSection {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub se_reduction: usize,
}

impl Default for UNetSection {
    fn default() -> Self {
        let d = UNetConfig::default();
        UNetSection {
            depth: d.depth,
            base_channels: d.base_channels,
            channel_mults: d.channel_mults,
            attention_levels: d.attention_levels,
            se_reduction: resdiff_core::splitter::DEFAULT_REDUCTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub residual_gain: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        let t = DiffusionTrainConfig::default();
        let o = OptimSection::default();
        DiffusionSection {
            timesteps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            residual_gain: t.residual_gain,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: o.learning_rate,
            clip_norm: o.clip_norm,
            checkpoint_every: o.checkpoint_every,
        }
    }
}

impl DiffusionSection {
    pub fn optim(&self) -> OptimSection {
        OptimSection {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Samples per input, each under its own derived seed.
    pub variants: usize,
    /// `val` or `test` split of the dataset, used when `input_dir` is unset.
    pub split: String,
    /// Directory of LR PNGs to upscale instead of a dataset split.
    pub input_dir: Option<PathBuf>,
    pub batch_size: usize,
    /// Cap on the number of inputs; 0 means all.
    pub max_images: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { variants: 1, split: "val".into(), input_dir: None, batch_size: 8, max_images: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples_dir: Option<PathBuf>,
    pub hr_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnnKind {
    None,
    Bilinear,
    SrcnnMini,
    Simplesr,
}

impl CnnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CnnKind::None => "none",
            CnnKind::Bilinear => "bilinear",
            CnnKind::SrcnnMini => "srcnn_mini",
            CnnKind::Simplesr => "simplesr",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, CnnKind::SrcnnMini | CnnKind::Simplesr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }

    pub fn as_str(self) -> &'static str {
        if self.on() {
            "on"
        } else {
            "off"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnnLoss {
    Full,
    GtOnly,
}

impl CnnLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            CnnLoss::Full => "full",
            CnnLoss::GtOnly => "gt_only",
        }
    }
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub cnn: CnnKind,
    pub splitter: Switch,
    pub hf_ca: Switch,
    pub cnn_loss: CnnLoss,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { cnn: CnnKind::Simplesr, splitter: Switch::On, hf_ca: Switch::On, cnn_loss: CnnLoss::Full }
    }
}

impl Toggles {
    /// Directory-safe name such as `simplesr-split_on-ca_on-full`.
    pub fn label(&self) -> String {
        format!(
            "{}-split_{}-ca_{}-{}",
            self.cnn.as_str(),
            self.splitter.as_str(),
            self.hf_ca.as_str(),
            self.cnn_loss.as_str()
        )
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Toggles>,
    /// Split the variants are scored on.
    pub split: String,
    /// Steps between logged points of the windowed training-loss curves.
    pub log_every: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        let full = Toggles::default();
        AblateSection {
            variants: vec![
                full,
                Toggles { cnn: CnnKind::None, ..full },
                Toggles { cnn: CnnKind::Bilinear, ..full },
                Toggles { cnn: CnnKind::SrcnnMini, ..full },
                Toggles { splitter: Switch::Off, ..full },
                Toggles { hf_ca: Switch::Off, ..full },
                Toggles { cnn_loss: CnnLoss::GtOnly, ..full },
            ],
            split: "val".into(),
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    /// Predictor checkpoint consumed by `train-diffusion`.
    pub cnn: Option<PathBuf>,
    /// Run directory of `train-diffusion`, consumed by `sample`.
    pub diffusion: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.check().map_err(|e| match e {
            CliError::Core(e) => CliError::Config(e.to_string()),
            other => other,
        })
    }

    fn check(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.scale == 0 || self.data.hr_patch % self.data.scale != 0 {
            return bad(format!("hr_patch {} is not a multiple of scale {}", self.data.hr_patch, self.data.scale));
        }
        if self.data.dir.is_none() && (self.data.synthetic_count < 3 || self.data.synthetic_size < self.data.hr_patch) {
            return bad("synthetic corpus needs at least 3 images no smaller than hr_patch".into());
        }
        self.simplesr_config().validate()?;
        self.loss_weights().validate()?;
        resdiff_core::freq::check_dwt_compatible(self.data.hr_patch, self.data.hr_patch, self.loss.dwt_levels)
            .map_err(|e| CliError::Config(format!("loss.dwt_levels: {e}")))?;
        self.unet_config(true).validate()?;
        let unet_factor = 1usize << self.unet.depth;
        if self.data.hr_patch % unet_factor != 0 {
            return bad(format!("hr_patch {} is not divisible by 2^depth = {unet_factor}", self.data.hr_patch));
        }
        self.diffusion_train_config().schedule.build()?;
        for (name, o) in [("pretrain", self.pretrain.clone()), ("diffusion", self.diffusion.optim())] {
            if o.batch_size == 0 || !(o.learning_rate > 0.0) || !(o.clip_norm >= 0.0) {
                return bad(format!("{name}: batch_size and learning_rate must be positive, clip_norm non-negative"));
            }
        }
        if !(self.diffusion.residual_gain > 0.0) {
            return bad("diffusion.residual_gain must be positive".into());
        }
        if self.sample.variants == 0 || self.sample.batch_size == 0 {
            return bad("sample.variants and sample.batch_size must be positive".into());
        }
        for split in [&self.sample.split, &self.ablate.split] {
            if split != "val" && split != "test" {
                return bad(format!("unknown split {split:?}; use val or test"));
            }
        }
        if self.ablate.log_every == 0 {
            return bad("ablate.log_every must be positive".into());
        }
        Ok(())
    }

    pub fn simplesr_config(&self) -> SimpleSrConfig {
        SimpleSrConfig {
            scale: self.data.scale,
            channels: 3,
            base_channels: self.simplesr.base_channels,
            res_blocks: self.simplesr.res_blocks,
        }
    }

    pub fn srcnn_config(&self) -> SrcnnConfig {
        SrcnnConfig { scale: self.data.scale, channels: 3, features: self.srcnn.features, mapped: self.srcnn.mapped }
    }

    pub fn loss_weights(&self) -> LossWeights {
        match self.ablation.cnn_loss {
            CnnLoss::Full => LossWeights { alpha: self.loss.alpha, beta: self.loss.beta, dwt_levels: self.loss.dwt_levels },
            CnnLoss::GtOnly => LossWeights::gt_only(self.loss.dwt_levels),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            adam: self.pretrain.adam(),
            weights: self.loss_weights(),
        }
    }

    pub fn unet_config(&self, hf_ca: bool) -> UNetConfig {
        UNetConfig {
            depth: self.unet.depth,
            base_channels: self.unet.base_channels,
            channel_mults: self.unet.channel_mults.clone(),
            attention_levels: self.unet.attention_levels.clone(),
            hf_cross_attention: hf_ca,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: 3,
            splitter: self.ablation.splitter.on(),
            se_reduction: self.unet.se_reduction,
            unet: self.unet_config(self.ablation.hf_ca.on()),
        }
    }

    pub fn diffusion_train_config(&self) -> DiffusionTrainConfig {
        let d = &self.diffusion;
        DiffusionTrainConfig {
            steps: d.steps,
            batch_size: d.batch_size,
            adam: d.optim().adam(),
            schedule: ScheduleConfig { steps: d.timesteps, beta_start: d.beta_start, beta_end: d.beta_end },
            residual_gain: d.residual_gain,
        }
    }

    /// Copy with the ablation toggles replaced.
    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        RunConfig { ablation: toggles, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("seed = 7\n[ablation]\ncnn = \"none\"\nsplitter = \"off\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ablation.cnn, CnnKind::None);
        assert!(!cfg.denoiser_config().splitter);
        assert!(cfg.denoiser_config().unet.hf_cross_attention);
    }

    #[test]
    fn invalid_files_are_config_errors() {
        for text in [
            "seed = \"x\"",
            "unknown_key = 1",
            "[ablation]\ncnn = \"vgg\"",
            "[data]\nhr_patch = 30\nscale = 4",
            "[loss]\nalpha = -1.0",
            "[diffusion]\nbeta_start = 0.5\nbeta_end = 0.1",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn gt_only_zeroes_frequency_weights() {
        let cfg = RunConfig::default().with_toggles(Toggles { cnn_loss: CnnLoss::GtOnly, ..Toggles::default() });
        let w = cfg.loss_weights();
        assert_eq!((w.alpha, w.beta), (0.0, 0.0));
    }
}
