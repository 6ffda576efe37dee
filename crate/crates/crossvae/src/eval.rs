//! Per-video PSNR / SSIM evaluation and its JSON and text reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crossvae_core::losses::{GradientSurrogate, PerceptualScorer};
use crossvae_core::metrics::{psnr, ssim};
use crossvae_core::model::VideoVae;
use crossvae_core::params::ParamStore;
use crossvae_core::VideoTensor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::Dataset;
use crate::error::{Error, Result, Within};
use crate::trainer::caption_embedding;
use crate::vten;

pub const PERCEPTUAL_NOTE: &str = "gradient-magnitude surrogate; not comparable to LPIPS";

/// Anything that maps a clip (and its caption) to a reconstruction.
pub trait Reconstructor {
    fn config_hash(&self) -> String;
    fn reconstruct(&self, video: &VideoTensor<f32>, caption: &str) -> Result<VideoTensor<f32>>;
}

/// Mean-mode `decode(encode(x))`, scored as it would be stored on disk.
pub struct ModelReconstructor<'a> {
    pub model: &'a VideoVae,
    pub params: &'a ParamStore<f32>,
}

impl Reconstructor for ModelReconstructor<'_> {
    fn config_hash(&self) -> String {
        self.model.cfg.hash_hex()
    }

    fn reconstruct(&self, video: &VideoTensor<f32>, caption: &str) -> Result<VideoTensor<f32>> {
        let text = caption_embedding(&self.model.cfg, caption)?;
        let raw = self.model.reconstruct(self.params, video, text.as_ref()).within("metrics_eval")?;
        Ok(vten::stored(&VideoTensor::clamped(&raw).within("metrics_eval")?))
    }
}

/// Returns its input; the reference point for the metrics.
pub struct Identity;

impl Reconstructor for Identity {
    fn config_hash(&self) -> String {
        "identity".into()
    }

    fn reconstruct(&self, video: &VideoTensor<f32>, _caption: &str) -> Result<VideoTensor<f32>> {
        Ok(video.clone())
    }
}

/// Decibels that serialize `+inf` as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Text(t) if t == "inf" => Ok(Db(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid dB value {t:?}"))),
        }
    }
}

impl std::fmt::Display for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0 == f64::INFINITY {
            f.pad("inf")
        } else {
            f.pad(&format!("{:.4}", self.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub file: String,
    pub psnr: Db,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub psnr: Db,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub per_video: Vec<VideoScore>,
    pub means: Means,
    pub perceptual_metric: String,
    pub skipped: Vec<Skipped>,
    pub warnings: usize,
}

/// Scores one clip against its reconstruction.
pub fn score(file: &str, xhat: &VideoTensor<f32>, x: &VideoTensor<f32>) -> Result<VideoScore> {
    let p = psnr(xhat, x).within("metrics_eval")?;
    let s = ssim(xhat, x).within("metrics_eval")?;
    let q = GradientSurrogate.score(&xhat.tensor().cast(), &x.tensor().cast()).within("metrics_eval")?;
    Ok(VideoScore { file: file.to_string(), psnr: Db(p), ssim: s, perceptual: q })
}

/// Evaluates every clip in `data`. Clips the reconstructor cannot handle
/// (shape errors) are skipped and counted; nothing on disk is modified.
pub fn evaluate(rec: &dyn Reconstructor, data: &Dataset) -> Result<Report> {
    let mut per_video = Vec::new();
    let mut skipped = Vec::new();
    for (i, entry) in data.entries().iter().enumerate() {
        let video = data.load_video(i)?;
        let scored = rec.reconstruct(&video, &entry.caption).and_then(|xhat| score(&entry.file, &xhat, &video));
        match scored {
            Ok(s) => per_video.push(s),
            Err(Error::Core { source: crossvae_core::Error::Shape(reason), .. }) => {
                log::warn!("skipping {}: {reason}", entry.file);
                skipped.push(Skipped { file: entry.file.clone(), reason });
            }
            Err(e) => return Err(e),
        }
    }
    if per_video.is_empty() {
        return Err(Error::Eval("no evaluable videos".into()));
    }
    let n = per_video.len() as f64;
    let means = Means {
        psnr: Db(per_video.iter().map(|s| s.psnr.0).sum::<f64>() / n),
        ssim: per_video.iter().map(|s| s.ssim).sum::<f64>() / n,
        perceptual: per_video.iter().map(|s| s.perceptual).sum::<f64>() / n,
    };
    let warnings = skipped.len();
    Ok(Report { config_hash: rec.config_hash(), per_video, means, perceptual_metric: PERCEPTUAL_NOTE.into(), skipped, warnings })
}

/// Aligned plain-text rendering of a report.
pub fn render_table(report: &Report) -> String {
    let width = report.per_video.iter().map(|s| s.file.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>7}  {:>11}", "file", "PSNR (dB)", "SSIM", "perceptual*");
    let _ = writeln!(out, "{}", "-".repeat(width + 34));
    let row = |out: &mut String, name: &str, p: Db, s: f64, q: f64| {
        let _ = writeln!(out, "{name:<width$}  {p:>10}  {s:>7.4}  {q:>11.5}");
    };
    for s in &report.per_video {
        row(&mut out, &s.file, s.psnr, s.ssim, s.perceptual);
    }
    let _ = writeln!(out, "{}", "-".repeat(width + 34));
    row(&mut out, "mean", report.means.psnr, report.means.ssim, report.means.perceptual);
    let _ = writeln!(out, "\n* {}", report.perceptual_metric);
    let _ = writeln!(out, "config {}; {} skipped", report.config_hash, report.warnings);
    out
}

/// The text table lives next to the JSON, with a `.txt` extension.
pub fn table_path(json: &Path) -> PathBuf {
    json.with_extension("txt")
}

/// Writes the JSON report to `path` and the table to [`table_path`].
pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut json = serde_json::to_string_pretty(report).map_err(|source| Error::Json { path: path.into(), source })?;
    json.push('\n');
    fs::write(path, json).map_err(Error::io(path))?;
    let table = table_path(path);
    fs::write(&table, render_table(report)).map_err(Error::io(&table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_psnr_serializes_as_inf() {
        assert_eq!(serde_json::to_string(&Db(f64::INFINITY)).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Db(20.0)).unwrap(), "20.0");
        let back: Db = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(back.0, f64::INFINITY);
        assert!(serde_json::from_str::<Db>("\"nan\"").is_err());
        assert_eq!(format!("{:>6}", Db(f64::INFINITY)), "   inf");
    }
}
