//! Patch datasets, degradation and PNG I/O.
//!
//! Images live in `[-1, 1]`. Training patches are random crops of the train
//! split; validation and test pairs are fixed center crops. The LR side of
//! every pair is the bicubic (antialiased) downscale of the HR crop.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::resample::{resize, Kernel};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Bicubic downscale by an integer factor.
pub fn degrade<T: Scalar>(hr: &Image<T>, scale: usize) -> Result<Image<T>> {
    let (h, w, _) = hr.dims();
    if scale == 0 || h % scale != 0 || w % scale != 0 || h == 0 || w == 0 {
        return Err(Error::Precondition(format!("{h}x{w} image is not divisible by scale {scale}")));
    }
    resize(hr, h / scale, w / scale, Kernel::Bicubic)
}

/// Reads an 8-bit PNG (any color type) as RGB in `[-1, 1]`.
pub fn read_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let dynamic = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Image::from_fn(h, w, 3, |y, x, c| T::of(raw[(y * w + x) * 3 + c] as f64 / 127.5 - 1.0)))
}

fn quantize<T: Scalar>(v: T) -> u8 {
    ((v.to_f64_lossy() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel `[-1, 1]` image as an 8-bit PNG.
pub fn write_png<T: Scalar>(path: &Path, im: &Image<T>) -> Result<()> {
    let (h, w, c) = im.dims();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Dimension(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let mut buf = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.push(quantize(im.get(y, x, ch)));
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Tiles equally sized images into rows, separated by `gap` pixels of -1.
pub fn grid<T: Scalar>(rows: &[Vec<Image<T>>], gap: usize) -> Result<Image<T>> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::Dimension("empty grid".into()))?;
    let (h, w, c) = first.dims();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * h + (rows.len() - 1) * gap;
    let gw = cols * w + (cols - 1) * gap;
    let mut out = Image::filled(gh, gw, c, -T::one());
    for (r, row) in rows.iter().enumerate() {
        for (k, im) in row.iter().enumerate() {
            first.check_same_shape(im)?;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(r * (h + gap) + y, k * (w + gap) + x, ch, im.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Procedural RGB scenes: a color gradient, localized oriented gratings and
/// a few flat shapes with hard edges. Gratings reach frequencies above the
/// LR Nyquist limit, so downscaling genuinely loses information.
pub fn synthetic_image<T: Scalar>(size: usize, seed: u64) -> Image<T> {
    let mut r = rng::generator(seed);
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.5..0.5));
    let tilt: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.4..0.4));
    let theta = r.random_range(0.0..std::f64::consts::TAU);
    let (gdy, gdx) = (theta.sin(), theta.cos());

    struct Grating {
        ky: f64,
        kx: f64,
        phase: f64,
        amp: [f64; 3],
        cy: f64,
        cx: f64,
        radius: f64,
    }
    let gratings: Vec<Grating> = (0..r.random_range(1..=3))
        .map(|_| {
            let freq = r.random_range(0.04..0.3);
            let ang = r.random_range(0.0..std::f64::consts::PI);
            let a = r.random_range(0.15..0.4);
            Grating {
                ky: freq * ang.sin() * std::f64::consts::TAU,
                kx: freq * ang.cos() * std::f64::consts::TAU,
                phase: r.random_range(0.0..std::f64::consts::TAU),
                amp: std::array::from_fn(|_| a * r.random_range(0.5..1.0)),
                cy: r.random_range(0.0..s),
                cx: r.random_range(0.0..s),
                radius: r.random_range(0.25 * s..0.7 * s),
            }
        })
        .collect();

    enum Shape {
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
        Disc { cy: f64, cx: f64, rad: f64 },
    }
    let shapes: Vec<(Shape, [f64; 3])> = (0..r.random_range(2..=5))
        .map(|_| {
            let color = std::array::from_fn(|_| r.random_range(-0.9..0.9));
            let shape = if r.random_bool(0.5) {
                let (y0, x0) = (r.random_range(0.0..s), r.random_range(0.0..s));
                let (hh, ww) = (r.random_range(0.1 * s..0.5 * s), r.random_range(0.1 * s..0.5 * s));
                Shape::Rect { y0, x0, y1: y0 + hh, x1: x0 + ww }
            } else {
                Shape::Disc { cy: r.random_range(0.0..s), cx: r.random_range(0.0..s), rad: r.random_range(0.05 * s..0.3 * s) }
            };
            (shape, color)
        })
        .collect();

    Image::from_fn(size, size, 3, |y, x, c| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = base[c] + tilt[c] * ((fy * gdy + fx * gdx) / s - 0.5);
        for (shape, color) in &shapes {
            let inside = match *shape {
                Shape::Rect { y0, x0, y1, x1 } => fy >= y0 && fy < y1 && fx >= x0 && fx < x1,
                Shape::Disc { cy, cx, rad } => (fy - cy).powi(2) + (fx - cx).powi(2) < rad * rad,
            };
            if inside {
                v = 0.3 * v + 0.7 * color[c];
            }
        }
        for gr in &gratings {
            let d2 = ((fy - gr.cy).powi(2) + (fx - gr.cx).powi(2)) / (gr.radius * gr.radius);
            if d2 < 1.0 {
                v += gr.amp[c] * (1.0 - d2) * (gr.ky * fy + gr.kx * fx + gr.phase).sin();
            }
        }
        T::of(v.clamp(-1.0, 1.0))
    })
}

/// Image ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Shuffles `ids` with `seed` and cuts 80 / 10 / 10 (at least one
    /// validation and one test id when there are three or more ids).
    pub fn random(ids: &[String], seed: u64) -> Self {
        let mut ids = ids.to_vec();
        ids.shuffle(&mut rng::generator(seed));
        let n = ids.len();
        let held = if n >= 3 { (n / 10).max(1) } else { 0 };
        let test = ids.split_off(n - held);
        let val = ids.split_off(n - 2 * held);
        Splits { train: ids, val, test }
    }

    pub fn parts(&self) -> [(&'static str, &[String]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, ids) in self.parts() {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Config(format!("image {id} appears twice (again in {name} split)")));
                }
            }
        }
        if self.train.is_empty() {
            return Err(Error::Config("train split is empty".into()));
        }
        Ok(())
    }

    /// Writes `train.txt`, `val.txt` and `test.txt`, one id per line.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ids) in self.parts() {
            let path = dir.join(format!("{name}.txt"));
            let mut text = ids.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads the three manifests if all exist in `dir`.
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let paths: Vec<PathBuf> = SPLIT_NAMES.iter().map(|n| dir.join(format!("{n}.txt"))).collect();
        if !paths.iter().all(|p| p.is_file()) {
            return Ok(None);
        }
        let mut lists = Vec::new();
        for p in &paths {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            lists.push(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
        }
        let test = lists.pop().unwrap_or_default();
        let val = lists.pop().unwrap_or_default();
        let train = lists.pop().unwrap_or_default();
        Ok(Some(Splits { train, val, test }))
    }
}

/// A fixed evaluation pair.
#[derive(Debug, Clone)]
pub struct PatchPair<T> {
    pub id: String,
    pub lr: Image<T>,
    pub hr: Image<T>,
}

/// A training minibatch in NCHW layout.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct PatchDataset<T> {
    hr_patch: usize,
    scale: usize,
    splits: Splits,
    train: Vec<Image<T>>,
    /// Precomputed LR images when every train image is exactly one patch.
    train_lr: Option<Vec<Image<T>>>,
    val: Vec<PatchPair<T>>,
    test: Vec<PatchPair<T>>,
}

fn center_crop<T: Scalar>(im: &Image<T>, size: usize) -> Image<T> {
    let (h, w, c) = im.dims();
    crop(im, (h - size) / 2, (w - size) / 2, size, c)
}

fn crop<T: Scalar>(im: &Image<T>, y0: usize, x0: usize, size: usize, c: usize) -> Image<T> {
    Image::from_fn(size, size, c, |y, x, ch| im.get(y0 + y, x0 + x, ch))
}

impl<T: Scalar> PatchDataset<T> {
    /// Builds a dataset from `(id, image)` records and a split assignment.
    pub fn from_records(records: Vec<(String, Image<T>)>, splits: Splits, hr_patch: usize, scale: usize) -> Result<Self> {
        splits.validate()?;
        if scale == 0 || hr_patch == 0 || hr_patch % scale != 0 {
            return Err(Error::Config(format!("patch size {hr_patch} is not a multiple of scale {scale}")));
        }
        let mut by_id: std::collections::HashMap<String, Image<T>> = records.into_iter().collect();
        let mut take = |id: &String| -> Result<Image<T>> {
            let im = by_id.remove(id).ok_or_else(|| Error::Config(format!("split lists unknown image {id}")))?;
            if im.height() < hr_patch || im.width() < hr_patch {
                return Err(Error::Precondition(format!(
                    "image {id} is {}x{}, smaller than the {hr_patch}px patch",
                    im.height(),
                    im.width()
                )));
            }
            Ok(im)
        };
        let train = splits.train.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        let mut pairs = |ids: &[String]| -> Result<Vec<PatchPair<T>>> {
            ids.iter()
                .map(|id| {
                    let hr = center_crop(&take(id)?, hr_patch);
                    Ok(PatchPair { id: id.clone(), lr: degrade(&hr, scale)?, hr })
                })
                .collect()
        };
        let val = pairs(&splits.val)?;
        let test = pairs(&splits.test)?;
        let train_lr = if train.iter().all(|im| im.height() == hr_patch && im.width() == hr_patch) {
            Some(train.iter().map(|im| degrade(im, scale)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(PatchDataset { hr_patch, scale, splits, train, train_lr, val, test })
    }

    /// `count` procedural images of one patch each, split randomly by `seed`.
    pub fn synthetic(count: usize, hr_patch: usize, scale: usize, seed: u64) -> Result<Self> {
        Self::synthetic_scenes(count, hr_patch, hr_patch, scale, seed)
    }

    /// `count` procedural `image_size` images, cropped to `hr_patch` patches.
    pub fn synthetic_scenes(count: usize, image_size: usize, hr_patch: usize, scale: usize, seed: u64) -> Result<Self> {
        let records: Vec<(String, Image<T>)> = (0..count)
            .map(|i| (format!("syn_{i:05}"), synthetic_image(image_size, rng::derive_seed(seed, i as u64))))
            .collect();
        let ids: Vec<String> = records.iter().map(|(id, _)| id.clone()).collect();
        Self::from_records(records, Splits::random(&ids, seed), hr_patch, scale)
    }

    /// Every `*.png` in `dir`; ids are file stems. Split manifests in `dir`
    /// are used when present, otherwise the split is drawn from `seed`.
    pub fn from_dir(dir: &Path, hr_patch: usize, scale: usize, seed: u64) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Format { path: dir.to_path_buf(), message: "no PNG images found".into() });
        }
        let mut records = Vec::with_capacity(paths.len());
        for p in &paths {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            records.push((id, read_png(p)?));
        }
        let splits = match Splits::read(dir)? {
            Some(s) => s,
            None => {
                let ids: Vec<String> = records.iter().map(|(id, _)| id.clone()).collect();
                Splits::random(&ids, seed)
            }
        };
        Self::from_records(records, splits, hr_patch, scale)
    }

    pub fn hr_patch(&self) -> usize {
        self.hr_patch
    }

    pub fn lr_patch(&self) -> usize {
        self.hr_patch / self.scale
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn val(&self) -> &[PatchPair<T>] {
        &self.val
    }

    pub fn test(&self) -> &[PatchPair<T>] {
        &self.test
    }

    /// Pairs of an evaluation split by name (`val` or `test`).
    pub fn eval_split(&self, name: &str) -> Result<&[PatchPair<T>]> {
        match name {
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown evaluation split {other:?}"))),
        }
    }

    /// Train images that are exactly one patch, with their LR versions.
    pub fn fixed_train_pairs(&self) -> Option<(&[Image<T>], &[Image<T>])> {
        self.train_lr.as_deref().map(|lr| (self.train.as_slice(), lr))
    }

    /// Draws indices and crop offsets for `batch` patches.
    pub fn draw(&self, rng: &mut impl Rng, batch: usize) -> Vec<(usize, usize, usize)> {
        (0..batch)
            .map(|_| {
                let i = rng.random_range(0..self.train.len());
                let (h, w, _) = self.train[i].dims();
                let s = self.scale;
                let y = rng.random_range(0..=(h - self.hr_patch) / s) * s;
                let x = rng.random_range(0..=(w - self.hr_patch) / s) * s;
                (i, y, x)
            })
            .collect()
    }

    /// HR and LR patch for one draw.
    pub fn patch(&self, (i, y, x): (usize, usize, usize)) -> Result<(Image<T>, Image<T>)> {
        match &self.train_lr {
            Some(lr) => Ok((self.train[i].clone(), lr[i].clone())),
            None => {
                let hr = crop(&self.train[i], y, x, self.hr_patch, self.train[i].channels());
                let lr = degrade(&hr, self.scale)?;
                Ok((hr, lr))
            }
        }
    }

    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize) -> Result<Batch<T>> {
        let mut hrs = Vec::with_capacity(batch);
        let mut lrs = Vec::with_capacity(batch);
        for d in self.draw(rng, batch) {
            let (hr, lr) = self.patch(d)?;
            hrs.push(hr);
            lrs.push(lr);
        }
        Ok(Batch { lr: Image::batch(&lrs)?, hr: Image::batch(&hrs)? })
    }

    /// Copy whose evaluation HR images are replaced by noise, for checking
    /// that inference never reads ground truth.
    pub fn with_scrambled_targets(&self, seed: u64) -> Self {
        let mut out = self.clone();
        let mut r = rng::generator(seed);
        for pair in out.val.iter_mut().chain(out.test.iter_mut()) {
            pair.hr.data_mut().iter_mut().for_each(|v| *v = T::of(r.random_range(-1.0..1.0)));
        }
        out
    }
}
