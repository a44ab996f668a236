//! The five subcommands. Every command that produces files writes the
//! resolved `config.toml` and a `seeds.txt` manifest into its output
//! directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use resdiff_core::baselines::{InitialPredictor, SrcnnMini};
use resdiff_core::checkpoint::{Manifest, ModelCheckpoint, MANIFEST_FILE};
use resdiff_core::data::{grid, read_png, write_png, PatchDataset};
use resdiff_core::diffusion::{sample as sample_batch, sampling_setup, Denoiser, DiffusionTrainer};
use resdiff_core::metrics::{mean_scores, score, Scores};
use resdiff_core::resample::{upscale, Kernel};
use resdiff_core::rng::derive_seed;
use resdiff_core::simplesr::{CnnTrainer, LossRecord, SimpleSr, Upscaler};
use resdiff_core::{Image, Image32};

use crate::config::{CnnKind, CnnLoss, RunConfig, Toggles};
use crate::error::{io_err, CliError, CliResult};
use crate::report::{self, EvalRow};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEEDS_FILE: &str = "seeds.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PREDICTOR_DIR: &str = "predictor";
pub const SPLITS_DIR: &str = "splits";

/// Seed streams derived from the run seed.
const CNN_INIT_STREAM: u64 = 1;
const DENOISER_INIT_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub resume: Option<PathBuf>,
    pub dry_run: bool,
}

/// Output directory of one command, with its seed manifest.
pub struct RunDir {
    pub path: PathBuf,
    seeds: Manifest,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &str) -> CliResult<Self> {
        let path = cfg.out_dir.clone();
        fs::create_dir_all(&path).map_err(io_err(&path))?;
        let cfg_path = path.join(CONFIG_FILE);
        fs::write(&cfg_path, format!("# resolved configuration of `resdiff {command}`\n{}", cfg.to_toml()))
            .map_err(io_err(&cfg_path))?;
        let mut seeds = Manifest::new();
        seeds
            .set("command", command)
            .set("seed", cfg.seed)
            .set("rng", resdiff_core::rng::GENERATOR_NAME)
            .set("data.split_seed", cfg.seed);
        let run = RunDir { path, seeds };
        run.write_seeds()?;
        Ok(run)
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.seeds.set(key, value);
    }

    pub fn write_seeds(&self) -> CliResult<()> {
        let p = self.path.join(SEEDS_FILE);
        fs::write(&p, self.seeds.to_text()).map_err(io_err(&p))
    }

    fn subdir(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.path.join(name);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
        Ok(p)
    }
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<PatchDataset<f32>> {
    let d = &cfg.data;
    match &d.dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::Data(format!("data directory {} does not exist", dir.display())));
            }
            Ok(PatchDataset::from_dir(dir, d.hr_patch, d.scale, cfg.seed)?)
        }
        None => Ok(PatchDataset::synthetic_scenes(d.synthetic_count, d.synthetic_size, d.hr_patch, d.scale, cfg.seed)?),
    }
}

/// Accepts a checkpoint directory or a run directory containing one.
pub fn resolve_checkpoint(path: &Path) -> CliResult<PathBuf> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join(MANIFEST_FILE).is_file() {
        return Ok(nested);
    }
    Err(CliError::Data(format!("no checkpoint found at {}", path.display())))
}

fn step_chunks(done: u64, total: u64, every: u64) -> u64 {
    let left = total.saturating_sub(done);
    if every == 0 {
        left
    } else {
        (every - done % every).min(left)
    }
}

fn progress_interval(total: u64) -> u64 {
    (total / 10).max(1)
}

// ---------------------------------------------------------------- pretrain

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<LossRecord>,
    /// Predictor and bicubic scores on the validation split.
    pub val: Option<Scores>,
    pub bicubic_val: Option<Scores>,
}

pub fn pretrain(cfg: &RunConfig, opts: &Options) -> CliResult<Option<PretrainOutcome>> {
    let data = load_dataset(cfg)?;
    if opts.dry_run {
        println!(
            "pretrain {} on {} train images, {} steps (dry run)",
            cfg.ablation.cnn.as_str(),
            data.train_len(),
            cfg.pretrain.steps
        );
        return Ok(None);
    }
    pretrain_with(cfg, opts, &data).map(Some)
}

pub fn pretrain_with(cfg: &RunConfig, opts: &Options, data: &PatchDataset<f32>) -> CliResult<PretrainOutcome> {
    let mut run = RunDir::create(cfg, "pretrain")?;
    data.splits().write(&run.path.join(SPLITS_DIR))?;
    let init_seed = derive_seed(cfg.seed, CNN_INIT_STREAM);
    let scale = cfg.data.scale;
    let (predictor, history) = match cfg.ablation.cnn {
        CnnKind::Simplesr => {
            run.record("model.init_seed", init_seed);
            let (m, h) = train_upscaler(SimpleSr::new(cfg.simplesr_config(), init_seed)?, cfg, opts, data, &mut run)?;
            (InitialPredictor::SimpleSr(m), h)
        }
        CnnKind::SrcnnMini => {
            run.record("model.init_seed", init_seed);
            let (m, h) = train_upscaler(SrcnnMini::new(cfg.srcnn_config(), init_seed)?, cfg, opts, data, &mut run)?;
            (InitialPredictor::Srcnn(m), h)
        }
        CnnKind::None => (InitialPredictor::None { scale }, Vec::new()),
        CnnKind::Bilinear => (InitialPredictor::Bilinear { scale }, Vec::new()),
    };
    let ck_dir = run.path.join(CHECKPOINT_DIR);
    if !cfg.ablation.cnn.is_trainable() {
        info!("{} needs no training; writing a parameter-free checkpoint", cfg.ablation.cnn.as_str());
        predictor.to_checkpoint().save(&ck_dir)?;
        report::write_pretrain_curve(&ck_dir.join(HISTORY_FILE), &[])?;
    }
    report::write_pretrain_curve(&run.path.join(LOSS_FILE), &history)?;

    let val = score_predictor(&predictor, data.val())?;
    let bicubic = score_predictor(&InitialPredictor::None { scale }, data.val())?;
    let mut summary = Manifest::new();
    summary.set("predictor", predictor.kind()).set("steps", history.last().map_or(0, |r| r.step));
    for (name, s) in [("val", val), ("bicubic_val", bicubic)] {
        if let Some(s) = s {
            summary.set(format!("{name}.psnr_rgb"), s.psnr_rgb).set(format!("{name}.ssim_luma"), s.ssim_luma);
        }
    }
    let p = run.path.join(SUMMARY_FILE);
    fs::write(&p, summary.to_text()).map_err(io_err(&p))?;
    run.write_seeds()?;
    Ok(PretrainOutcome { checkpoint: ck_dir, history, val, bicubic_val: bicubic })
}

fn save_pretrain<M: Upscaler<f32>>(
    trainer: &CnnTrainer<f32, M>,
    earlier: &[LossRecord],
    dir: &Path,
) -> CliResult<Vec<LossRecord>> {
    let mut all = earlier.to_vec();
    all.extend_from_slice(trainer.history());
    let mut ck = trainer.checkpoint();
    ck.manifest.set("run.command", "pretrain");
    ck.save(dir)?;
    report::write_pretrain_curve(&dir.join(HISTORY_FILE), &all)?;
    Ok(all)
}

fn train_upscaler<M: Upscaler<f32>>(
    model: M,
    cfg: &RunConfig,
    opts: &Options,
    data: &PatchDataset<f32>,
    run: &mut RunDir,
) -> CliResult<(M, Vec<LossRecord>)> {
    let pc = cfg.pretrain_config();
    let mut trainer = CnnTrainer::new(model, &pc, cfg.seed)?;
    run.record("train.seed", cfg.seed);
    let mut earlier = Vec::new();
    if let Some(path) = &opts.resume {
        let dir = resolve_checkpoint(path)?;
        let ck = ModelCheckpoint::load(&dir)?;
        trainer.resume(&ck)?;
        let hist = dir.join(HISTORY_FILE);
        if hist.is_file() {
            earlier = report::read_pretrain_curve(&hist)?;
            earlier.retain(|r| r.step <= trainer.step_count());
        }
        run.record("resumed_from", dir.display());
        info!("resumed pretraining at step {}", trainer.step_count());
    }
    let ck_dir = run.path.join(CHECKPOINT_DIR);
    let every = cfg.pretrain.checkpoint_every;
    let log_every = progress_interval(pc.steps);
    while trainer.step_count() < pc.steps {
        let n = step_chunks(trainer.step_count(), pc.steps, every).min(log_every);
        trainer.run(data, n)?;
        if let Some(r) = trainer.history().last() {
            info!("pretrain step {}/{}: l_cnn {:.5} (gt {:.5})", r.step, pc.steps, r.total, r.gt);
        }
        if every > 0 && trainer.step_count() % every == 0 && trainer.step_count() < pc.steps {
            save_pretrain(&trainer, &earlier, &ck_dir)?;
        }
    }
    let all = save_pretrain(&trainer, &earlier, &ck_dir)?;
    Ok((trainer.model, all))
}

fn score_predictor(predictor: &InitialPredictor<f32>, pairs: &[resdiff_core::data::PatchPair<f32>]) -> CliResult<Option<Scores>> {
    let mut rows = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(16) {
        let lr = Image::batch(&chunk.iter().map(|p| p.lr.clone()).collect::<Vec<_>>())?;
        let out = Image::unbatch(&predictor.condition(&lr)?);
        for (o, p) in out.iter().zip(chunk) {
            rows.push(score(o, &p.hr)?);
        }
    }
    Ok(mean_scores(&rows))
}

// ------------------------------------------------------- train-diffusion

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub history: Vec<(u64, f64)>,
}

/// The predictor named by `ablation.cnn`, loaded from `checkpoints.cnn`
/// when it has weights.
pub fn load_predictor(cfg: &RunConfig) -> CliResult<InitialPredictor<f32>> {
    let kind = cfg.ablation.cnn;
    let scale = cfg.data.scale;
    let Some(path) = &cfg.checkpoints.cnn else {
        return match kind {
            CnnKind::None => Ok(InitialPredictor::None { scale }),
            CnnKind::Bilinear => Ok(InitialPredictor::Bilinear { scale }),
            _ => Err(CliError::Config(format!(
                "ablation.cnn = {:?} needs checkpoints.cnn (run `resdiff pretrain` first)",
                kind.as_str()
            ))),
        };
    };
    let dir = resolve_checkpoint(path)?;
    let ck = ModelCheckpoint::load(&dir)?;
    let m = &ck.manifest;
    let mut mismatched = Vec::new();
    let ck_kind = m.get("model.kind").unwrap_or("<missing>");
    if ck_kind != kind.as_str() {
        mismatched.push(format!("model.kind: checkpoint {ck_kind}, config {}", kind.as_str()));
    }
    for (key, want) in [("arch.scale", scale), ("arch.channels", 3)] {
        let got = m.get(key).unwrap_or("<missing>");
        if got != want.to_string() {
            mismatched.push(format!("{key}: checkpoint {got}, config {want}"));
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::Config(format!(
            "predictor checkpoint {} is incompatible: {}",
            dir.display(),
            mismatched.join("; ")
        )));
    }
    Ok(InitialPredictor::from_checkpoint(&ck)?)
}

pub fn train_diffusion(cfg: &RunConfig, opts: &Options) -> CliResult<Option<TrainOutcome>> {
    let data = load_dataset(cfg)?;
    let predictor = load_predictor(cfg)?;
    if opts.dry_run {
        println!(
            "train-diffusion {} on {} train images, {} steps, T = {} (dry run)",
            cfg.ablation,
            data.train_len(),
            cfg.diffusion.steps,
            cfg.diffusion.timesteps
        );
        return Ok(None);
    }
    train_diffusion_with(cfg, opts, &data, predictor).map(Some)
}

fn save_diffusion(trainer: &DiffusionTrainer<f32>, earlier: &[(u64, f64)], dir: &Path) -> CliResult<Vec<(u64, f64)>> {
    let mut all = earlier.to_vec();
    all.extend_from_slice(trainer.history());
    let mut ck = trainer.checkpoint();
    ck.manifest.set("run.command", "train-diffusion");
    ck.save(dir)?;
    trainer.predictor.to_checkpoint().save(&dir.join(PREDICTOR_DIR))?;
    report::write_diffusion_curve(&dir.join(HISTORY_FILE), &all)?;
    Ok(all)
}

pub fn train_diffusion_with(
    cfg: &RunConfig,
    opts: &Options,
    data: &PatchDataset<f32>,
    predictor: InitialPredictor<f32>,
) -> CliResult<TrainOutcome> {
    let mut run = RunDir::create(cfg, "train-diffusion")?;
    data.splits().write(&run.path.join(SPLITS_DIR))?;
    let init_seed = derive_seed(cfg.seed, DENOISER_INIT_STREAM);
    run.record("model.init_seed", init_seed);
    run.record("train.seed", cfg.seed);
    run.record("cond.kind", predictor.kind());
    let model = Denoiser::new(cfg.denoiser_config(), init_seed)?;
    let tc = cfg.diffusion_train_config();
    let mut trainer = DiffusionTrainer::new(model, predictor, tc, cfg.seed)?;
    let mut earlier = Vec::new();
    if let Some(path) = &opts.resume {
        let dir = resolve_checkpoint(path)?;
        let ck = ModelCheckpoint::load(&dir)?;
        let Some(stored) = ck.manifest.get("cond.kind") else {
            return Err(CliError::Config(format!("{} is not a train-diffusion checkpoint", dir.display())));
        };
        if stored != trainer.predictor.kind() {
            return Err(CliError::Config(format!(
                "resume checkpoint was trained with predictor {stored}, config uses {}",
                trainer.predictor.kind()
            )));
        }
        trainer.resume(&ck)?;
        let hist = dir.join(HISTORY_FILE);
        if hist.is_file() {
            earlier = report::read_diffusion_curve(&hist)?;
            earlier.retain(|r| r.0 <= trainer.step_count());
        }
        run.record("resumed_from", dir.display());
        info!("resumed diffusion training at step {}", trainer.step_count());
    }
    let ck_dir = run.path.join(CHECKPOINT_DIR);
    let every = cfg.diffusion.checkpoint_every;
    let log_every = progress_interval(tc.steps);
    while trainer.step_count() < tc.steps {
        let n = step_chunks(trainer.step_count(), tc.steps, every).min(log_every);
        trainer.run(data, n)?;
        let recent = &trainer.history()[trainer.history().len().saturating_sub(n as usize)..];
        let mean = recent.iter().map(|r| r.1).sum::<f64>() / recent.len().max(1) as f64;
        info!("[{}] diffusion step {}/{}: mean loss {mean:.5}", cfg.ablation, trainer.step_count(), tc.steps);
        if every > 0 && trainer.step_count() % every == 0 && trainer.step_count() < tc.steps {
            save_diffusion(&trainer, &earlier, &ck_dir)?;
        }
    }
    let history = save_diffusion(&trainer, &earlier, &ck_dir)?;
    report::write_diffusion_curve(&run.path.join(LOSS_FILE), &history)?;
    run.write_seeds()?;
    Ok(TrainOutcome { run_dir: run.path, history })
}

// ------------------------------------------------------------------ sample

/// One upscaled input: the conditioning image and every sampled variant.
#[derive(Debug, Clone)]
pub struct SampledImage {
    pub id: String,
    pub lr: Image32,
    pub hr: Option<Image32>,
    pub condition: Image32,
    pub samples: Vec<Image32>,
}

struct SampleInput {
    id: String,
    lr: Image32,
    hr: Option<Image32>,
}

fn sample_inputs(cfg: &RunConfig) -> CliResult<Vec<SampleInput>> {
    let mut inputs = match &cfg.sample.input_dir {
        Some(dir) => {
            let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("input directory {}: {e}", dir.display())))?;
            let mut paths: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(CliError::Data(format!("no PNG inputs in {}", dir.display())));
            }
            paths
                .iter()
                .map(|p| {
                    let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok(SampleInput { id, lr: read_png(p)?, hr: None })
                })
                .collect::<CliResult<Vec<_>>>()?
        }
        None => load_dataset(cfg)?
            .eval_split(&cfg.sample.split)?
            .iter()
            .map(|p| SampleInput { id: p.id.clone(), lr: p.lr.clone(), hr: Some(p.hr.clone()) })
            .collect(),
    };
    if cfg.sample.max_images > 0 {
        inputs.truncate(cfg.sample.max_images);
    }
    if inputs.is_empty() {
        return Err(CliError::Data(format!("the {} split is empty", cfg.sample.split)));
    }
    Ok(inputs)
}

pub fn sample(cfg: &RunConfig, opts: &Options) -> CliResult<Option<Vec<SampledImage>>> {
    let src = cfg
        .checkpoints
        .diffusion
        .as_ref()
        .ok_or_else(|| CliError::Config("sample needs checkpoints.diffusion (a train-diffusion run)".into()))?;
    let ck_dir = resolve_checkpoint(src)?;
    let ck = ModelCheckpoint::load(&ck_dir)?;
    let model = Denoiser::<f32>::from_checkpoint(&ck)?;
    let predictor = InitialPredictor::<f32>::from_checkpoint(&ModelCheckpoint::load(&ck_dir.join(PREDICTOR_DIR))?)?;
    let inputs = sample_inputs(cfg)?;
    if let Some(bad) = inputs.iter().find(|i| i.lr.channels() != 3) {
        return Err(CliError::Data(format!("input {} has {} channels, expected 3", bad.id, bad.lr.channels())));
    }
    if opts.dry_run {
        println!("sample {} inputs x {} variants from {} (dry run)", inputs.len(), cfg.sample.variants, ck_dir.display());
        return Ok(None);
    }
    let mut run = RunDir::create(cfg, "sample")?;
    run.record("checkpoint", ck_dir.display());
    let out = sample_into(cfg, &mut run, &model, &predictor, &ck, inputs)?;
    Ok(Some(out))
}

fn sample_into(
    cfg: &RunConfig,
    run: &mut RunDir,
    model: &Denoiser<f32>,
    predictor: &InitialPredictor<f32>,
    ck: &ModelCheckpoint,
    inputs: Vec<SampleInput>,
) -> CliResult<Vec<SampledImage>> {
    let (schedule, frame) = sampling_setup(ck)?;
    let base = derive_seed(cfg.seed, SAMPLE_STREAM);
    run.record("sample.base_seed", base);
    let same_size = inputs.windows(2).all(|w| w[0].lr.dims() == w[1].lr.dims());
    let batch = if same_size { cfg.sample.batch_size } else { 1 };

    let mut results: Vec<SampledImage> = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch) {
        let lr = Image::batch(&chunk.iter().map(|i| i.lr.clone()).collect::<Vec<_>>())?;
        for (c, i) in Image::unbatch(&predictor.condition(&lr)?).into_iter().zip(chunk) {
            results.push(SampledImage { id: i.id.clone(), lr: i.lr.clone(), hr: i.hr.clone(), condition: c, samples: Vec::new() });
        }
    }
    for v in 0..cfg.sample.variants {
        let vseed = derive_seed(base, v as u64);
        run.record(&format!("sample.variant.{v}"), vseed);
        let mut first = 0usize;
        for chunk in inputs.chunks(batch) {
            let lr = Image::batch(&chunk.iter().map(|i| i.lr.clone()).collect::<Vec<_>>())?;
            let hr = sample_batch(&lr, predictor, model, &schedule, frame, vseed, first as u64)?;
            for (k, im) in Image::unbatch(&hr).into_iter().enumerate() {
                let idx = first + k;
                run.record(&format!("sample.{}.v{v}", results[idx].id), derive_seed(vseed, idx as u64));
                results[idx].samples.push(im);
            }
            first += chunk.len();
            info!("sampled variant {v}: {first}/{} images", inputs.len());
        }
    }

    let samples_dir = run.subdir("samples")?;
    let cond_dir = run.subdir("cnn")?;
    let mut rows = Vec::with_capacity(results.len());
    for r in &results {
        write_png(&cond_dir.join(format!("{}.png", r.id)), &r.condition)?;
        for (v, s) in r.samples.iter().enumerate() {
            write_png(&samples_dir.join(format!("{}_v{v}.png", r.id)), s)?;
        }
        let up = upscale(&r.lr, predictor.scale(), Kernel::Bicubic)?.clamp(-1.0, 1.0);
        let mut row = vec![up, r.condition.clone()];
        row.extend(r.samples.iter().cloned());
        if let Some(hr) = &r.hr {
            row.push(hr.clone());
        }
        rows.push(row);
    }
    if results.iter().all(|r| r.hr.is_some()) {
        let hr_dir = run.subdir("hr")?;
        for r in &results {
            write_png(&hr_dir.join(format!("{}.png", r.id)), r.hr.as_ref().expect("checked"))?;
        }
    }
    if same_size {
        write_png(&run.path.join("grid.png"), &grid(&rows, 2)?)?;
    } else {
        warn!("inputs differ in size; skipping grid.png");
    }
    run.write_seeds()?;
    Ok(results)
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub mean: Option<Scores>,
    pub unpaired: Vec<PathBuf>,
}

fn png_stems(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .map(|p| (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p))
        .collect();
    out.sort();
    Ok(out)
}

/// HR stem a sample file belongs to: the same stem, or `<stem>_v<k>`.
fn hr_stem_for<'a>(stem: &'a str, hr: &HashMap<String, PathBuf>) -> Option<&'a str> {
    if hr.contains_key(stem) {
        return Some(stem);
    }
    let (base, v) = stem.rsplit_once("_v")?;
    (v.chars().all(|c| c.is_ascii_digit()) && !v.is_empty() && hr.contains_key(base)).then_some(base)
}

pub fn eval(cfg: &RunConfig, opts: &Options) -> CliResult<Option<EvalOutcome>> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone().ok_or_else(|| CliError::Config(format!("eval needs eval.{key}")))
    };
    let samples_dir = need(&cfg.eval.samples_dir, "samples_dir")?;
    let hr_dir = need(&cfg.eval.hr_dir, "hr_dir")?;
    let samples = png_stems(&samples_dir)?;
    let hr: HashMap<String, PathBuf> = png_stems(&hr_dir)?.into_iter().collect();
    let mut pairs = Vec::new();
    let mut unpaired = Vec::new();
    for (stem, path) in &samples {
        match hr_stem_for(stem, &hr) {
            Some(base) => pairs.push((stem.clone(), path.clone(), hr[base].clone())),
            None => unpaired.push(path.clone()),
        }
    }
    for p in &unpaired {
        warn!("no HR image pairs with {}; skipped", p.display());
    }
    if !unpaired.is_empty() {
        warn!("{} unpaired sample file(s) skipped", unpaired.len());
    }
    if pairs.is_empty() {
        return Err(CliError::Data(format!(
            "no sample in {} pairs with an HR image in {}",
            samples_dir.display(),
            hr_dir.display()
        )));
    }
    if opts.dry_run {
        println!("eval {} pairs, {} unpaired (dry run)", pairs.len(), unpaired.len());
        return Ok(None);
    }
    let run = RunDir::create(cfg, "eval")?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (id, sp, hp) in pairs {
        let (s, h): (Image32, Image32) = (read_png(&sp)?, read_png(&hp)?);
        if s.dims() != h.dims() {
            return Err(CliError::Data(format!("{} is {:?} but {} is {:?}", sp.display(), s.dims(), hp.display(), h.dims())));
        }
        rows.push(EvalRow { image_id: id, scores: score(&s, &h)? });
    }
    let mean = report::write_eval_report(&run.path.join("eval.csv"), &rows)?;
    write_eval_summary(&run.path, mean, rows.len(), unpaired.len())?;
    Ok(Some(EvalOutcome { rows, mean, unpaired }))
}

fn write_eval_summary(dir: &Path, mean: Option<Scores>, n: usize, skipped: usize) -> CliResult<()> {
    let mut m = Manifest::new();
    m.set("images", n)
        .set("unpaired_skipped", skipped)
        .set("convention.psnr", "RGB, images mapped to [0,1], max 1")
        .set("convention.ssim", "BT.601 luma, 11x11 Gaussian window sigma 1.5, K1 0.01, K2 0.03, valid positions")
        .set("convention.fid", report::FID_UNAVAILABLE);
    if let Some(s) = mean {
        m.set("mean.psnr_rgb", s.psnr_rgb).set("mean.ssim_luma", s.ssim_luma);
    }
    let p = dir.join(SUMMARY_FILE);
    fs::write(&p, m.to_text()).map_err(io_err(&p))
}

// ------------------------------------------------------------------ ablate

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub diffusion_steps: u64,
    pub scores: Scores,
    pub curve: Vec<(u64, f64)>,
}

#[derive(Debug, Clone)]
pub struct CnnAblationRow {
    pub cnn: String,
    pub cnn_loss: String,
    pub steps: u64,
    pub scores: Scores,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub cnn_rows: Vec<CnnAblationRow>,
}

impl AblationOutcome {
    pub fn row(&self, t: &Toggles) -> Option<&AblationRow> {
        self.rows.iter().find(|r| &r.toggles == t)
    }
}

pub fn ablate(cfg: &RunConfig, opts: &Options) -> CliResult<Option<AblationOutcome>> {
    if opts.resume.is_some() {
        return Err(CliError::Config("ablate does not support --resume; rerun individual commands instead".into()));
    }
    let data = load_dataset(cfg)?;
    if cfg.ablate.variants.is_empty() {
        return Err(CliError::Config("ablate.variants is empty".into()));
    }
    if opts.dry_run {
        for v in &cfg.ablate.variants {
            println!("variant {v}");
        }
        println!("{} variants on {} train images (dry run)", cfg.ablate.variants.len(), data.train_len());
        return Ok(None);
    }
    ablate_with(cfg, &data).map(Some)
}

pub fn ablate_with(cfg: &RunConfig, data: &PatchDataset<f32>) -> CliResult<AblationOutcome> {
    let root = RunDir::create(cfg, "ablate")?;
    data.splits().write(&root.path.join(SPLITS_DIR))?;
    let eval_pairs = data.eval_split(&cfg.ablate.split)?;
    let mut cnn_cache: HashMap<(CnnKind, CnnLoss), PathBuf> = HashMap::new();
    let mut cnn_rows = Vec::new();
    let mut rows = Vec::new();
    for &toggles in &cfg.ablate.variants {
        let mut vcfg = cfg.with_toggles(toggles);
        if toggles.cnn.is_trainable() {
            let key = (toggles.cnn, toggles.cnn_loss);
            if !cnn_cache.contains_key(&key) {
                let mut pcfg = vcfg.clone();
                pcfg.out_dir = root.path.join(format!("cnn-{}-{}", toggles.cnn.as_str(), toggles.cnn_loss.as_str()));
                info!("pretraining {} ({})", toggles.cnn.as_str(), toggles.cnn_loss.as_str());
                let out = pretrain_with(&pcfg, &Options::default(), data)?;
                if cnn_rows.is_empty() {
                    if let Some(b) = out.bicubic_val {
                        cnn_rows.push(CnnAblationRow { cnn: "bicubic".into(), cnn_loss: "-".into(), steps: 0, scores: b });
                    }
                }
                if let Some(s) = out.val {
                    cnn_rows.push(CnnAblationRow {
                        cnn: toggles.cnn.as_str().into(),
                        cnn_loss: toggles.cnn_loss.as_str().into(),
                        steps: out.history.last().map_or(0, |r| r.step),
                        scores: s,
                    });
                }
                cnn_cache.insert(key, out.checkpoint);
            }
            vcfg.checkpoints.cnn = Some(cnn_cache[&key].clone());
        } else {
            vcfg.checkpoints.cnn = None;
        }
        let vdir = root.path.join(toggles.label());
        vcfg.out_dir = vdir.join("train");
        let predictor = load_predictor(&vcfg)?;
        let trained = train_diffusion_with(&vcfg, &Options::default(), data, predictor)?;

        let mut scfg = vcfg.clone();
        scfg.out_dir = vdir.join("samples");
        scfg.sample.variants = 1;
        scfg.checkpoints.diffusion = Some(trained.run_dir.clone());
        let ck_dir = resolve_checkpoint(&trained.run_dir)?;
        let ck = ModelCheckpoint::load(&ck_dir)?;
        let model = Denoiser::<f32>::from_checkpoint(&ck)?;
        let predictor = InitialPredictor::<f32>::from_checkpoint(&ModelCheckpoint::load(&ck_dir.join(PREDICTOR_DIR))?)?;
        let inputs = eval_pairs
            .iter()
            .map(|p| SampleInput { id: p.id.clone(), lr: p.lr.clone(), hr: Some(p.hr.clone()) })
            .collect();
        let mut srun = RunDir::create(&scfg, "sample")?;
        let sampled = sample_into(&scfg, &mut srun, &model, &predictor, &ck, inputs)?;
        let eval_rows = sampled
            .iter()
            .map(|s| {
                let hr = s.hr.as_ref().expect("eval split has HR");
                Ok(EvalRow { image_id: s.id.clone(), scores: score(&s.samples[0], hr)? })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let mean = report::write_eval_report(&vdir.join("eval.csv"), &eval_rows)?
            .ok_or_else(|| CliError::Data("evaluation split is empty".into()))?;
        write_eval_summary(&vdir, Some(mean), eval_rows.len(), 0)?;
        info!("[{toggles}] PSNR {:.3} dB, SSIM {:.4}", mean.psnr_rgb, mean.ssim_luma);
        rows.push(AblationRow {
            toggles,
            diffusion_steps: trained.history.last().map_or(0, |r| r.0),
            scores: mean,
            curve: trained.history,
        });
    }
    write_ablation_tables(&root.path, cfg, &rows, &cnn_rows)?;
    Ok(AblationOutcome { rows, cnn_rows })
}

fn write_ablation_tables(dir: &Path, cfg: &RunConfig, rows: &[AblationRow], cnn_rows: &[CnnAblationRow]) -> CliResult<()> {
    let path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["variant", "cnn", "splitter", "hf_ca", "cnn_loss", "diffusion_steps", "psnr_rgb", "ssim_luma", "fid"])?;
    for r in rows {
        let t = r.toggles;
        w.write_record([
            t.label(),
            t.cnn.as_str().into(),
            t.splitter.as_str().into(),
            t.hf_ca.as_str().into(),
            t.cnn_loss.as_str().into(),
            r.diffusion_steps.to_string(),
            r.scores.psnr_rgb.to_string(),
            r.scores.ssim_luma.to_string(),
            report::FID_UNAVAILABLE.into(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("cnn_ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["cnn", "cnn_loss", "pretrain_steps", "psnr_rgb", "ssim_luma"])?;
    for r in cnn_rows {
        w.write_record([r.cnn.clone(), r.cnn_loss.clone(), r.steps.to_string(), r.scores.psnr_rgb.to_string(), r.scores.ssim_luma.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("loss_curves.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["step".to_string()];
    header.extend(rows.iter().map(|r| r.toggles.label()));
    w.write_record(&header)?;
    let curves: Vec<Vec<(u64, f64)>> = rows.iter().map(|r| report::windowed_means(&r.curve, cfg.ablate.log_every)).collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..len {
        let mut rec = vec![curves[0][i].0.to_string()];
        rec.extend(curves.iter().map(|c| c[i].1.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_respects_checkpoints() {
        assert_eq!(step_chunks(0, 10, 0), 10);
        assert_eq!(step_chunks(0, 10, 4), 4);
        assert_eq!(step_chunks(4, 10, 4), 4);
        assert_eq!(step_chunks(8, 10, 4), 2);
        assert_eq!(step_chunks(3, 10, 4), 1);
    }

    #[test]
    fn sample_files_pair_with_hr_stems() {
        let hr: HashMap<String, PathBuf> = [("img_1".to_string(), PathBuf::new()), ("b".to_string(), PathBuf::new())].into();
        assert_eq!(hr_stem_for("img_1", &hr), Some("img_1"));
        assert_eq!(hr_stem_for("img_1_v0", &hr), Some("img_1"));
        assert_eq!(hr_stem_for("b_v12", &hr), Some("b"));
        assert_eq!(hr_stem_for("b_vx", &hr), None);
        assert_eq!(hr_stem_for("c_v0", &hr), None);
    }
}
