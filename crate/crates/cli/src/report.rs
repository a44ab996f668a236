//! CSV files written by the commands.

use std::path::Path;

use resdiff_core::metrics::Scores;
use resdiff_core::simplesr::LossRecord;

use crate::error::{CliError, CliResult};

pub const PRETRAIN_HEADER: [&str; 5] = ["step", "l_gt", "l_fft", "l_dwt", "l_cnn"];
pub const DIFFUSION_HEADER: [&str; 2] = ["step", "loss"];
pub const EVAL_HEADER: [&str; 4] = ["image_id", "psnr_rgb", "ssim_luma", "fid"];
/// FID needs pretrained Inception features, which are out of scope.
pub const FID_UNAVAILABLE: &str = "unavailable";
pub const MEAN_ROW: &str = "mean";

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn field<V: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> CliResult<V> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| CliError::Data(format!("{}: bad or missing column {i} in {rec:?}", path.display())))
}

pub fn write_pretrain_curve(path: &Path, rows: &[LossRecord]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(PRETRAIN_HEADER)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.gt.to_string(), r.fft.to_string(), r.dwt.to_string(), r.total.to_string()])?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

pub fn read_pretrain_curve(path: &Path) -> CliResult<Vec<LossRecord>> {
    let mut rows = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec?;
        rows.push(LossRecord {
            step: field(&rec, 0, path)?,
            gt: field(&rec, 1, path)?,
            fft: field(&rec, 2, path)?,
            dwt: field(&rec, 3, path)?,
            total: field(&rec, 4, path)?,
        });
    }
    Ok(rows)
}

pub fn write_diffusion_curve(path: &Path, rows: &[(u64, f64)]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(DIFFUSION_HEADER)?;
    for (s, l) in rows {
        w.write_record([s.to_string(), l.to_string()])?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

pub fn read_diffusion_curve(path: &Path) -> CliResult<Vec<(u64, f64)>> {
    let mut rows = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec?;
        rows.push((field(&rec, 0, path)?, field(&rec, 1, path)?));
    }
    Ok(rows)
}

/// Per-image scores for one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub scores: Scores,
}

/// Writes one row per image followed by the `mean` summary row.
pub fn write_eval_report(path: &Path, rows: &[EvalRow]) -> CliResult<Option<Scores>> {
    let mean = resdiff_core::metrics::mean_scores(&rows.iter().map(|r| r.scores).collect::<Vec<_>>());
    let mut w = writer(path)?;
    w.write_record(EVAL_HEADER)?;
    for r in rows {
        w.write_record([r.image_id.clone(), r.scores.psnr_rgb.to_string(), r.scores.ssim_luma.to_string(), FID_UNAVAILABLE.into()])?;
    }
    if let Some(m) = mean {
        w.write_record([MEAN_ROW.to_string(), m.psnr_rgb.to_string(), m.ssim_luma.to_string(), FID_UNAVAILABLE.into()])?;
    }
    w.flush().map_err(crate::error::io_err(path))?;
    Ok(mean)
}

/// Per-image rows and the summary row, if present.
pub fn read_eval_report(path: &Path) -> CliResult<(Vec<EvalRow>, Option<Scores>)> {
    let mut rows = Vec::new();
    let mut mean = None;
    for rec in reader(path)?.records() {
        let rec = rec?;
        let id: String = field(&rec, 0, path)?;
        let scores = Scores { psnr_rgb: field(&rec, 1, path)?, ssim_luma: field(&rec, 2, path)? };
        if id == MEAN_ROW {
            mean = Some(scores);
        } else {
            rows.push(EvalRow { image_id: id, scores });
        }
    }
    Ok((rows, mean))
}

/// Means of consecutive `window`-step blocks; the point is labelled with
/// the block's last step. A trailing partial block is dropped.
pub fn windowed_means(curve: &[(u64, f64)], window: u64) -> Vec<(u64, f64)> {
    curve
        .chunks(window.max(1) as usize)
        .filter(|c| c.len() as u64 == window.max(1))
        .map(|c| (c[c.len() - 1].0, c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64))
        .collect()
}
