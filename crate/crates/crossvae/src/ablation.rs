//! Trains and evaluates the three compression arrangements side by side.
//!
//! Each `ablate` run adds (or replaces) one row of `ablation.json` /
//! `ablation.txt` in the output directory, so running all three variants
//! into the same directory yields the full comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crossvae_core::config::Variant;
use crossvae_core::params::GroupSet;
use crossvae_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result, Within};
use crate::eval::{evaluate, write_report, Db, ModelReconstructor};
use crate::trainer::{train, TrainOptions};

pub const REPORT: &str = "ablation.json";
pub const TABLE: &str = "ablation.txt";
/// Row order of the comparison table.
pub const ORDER: [Variant; 3] = [Variant::Simultaneous, Variant::Sequential, Variant::Combined];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Networks the latent passes through on the way in (1 or 2).
    pub encoder_stages: usize,
    pub downsample: String,
    /// Latent of the first evaluated clip, (C, T, H, W).
    pub latent_shape: [usize; 4],
    pub generator_params: usize,
    pub train_steps: u64,
    pub final_loss: f64,
    pub psnr: Db,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Variant with the highest mean PSNR among the rows present.
    pub best_psnr: Option<Variant>,
    /// Whether the combined model has the best PSNR; `None` until all three rows exist.
    pub combined_best_observed: Option<bool>,
}

impl AblationReport {
    fn from_rows(mut rows: Vec<AblationRow>) -> Self {
        rows.sort_by_key(|r| ORDER.iter().position(|v| *v == r.variant));
        let best_psnr = rows.iter().max_by(|a, b| a.psnr.0.total_cmp(&b.psnr.0)).map(|r| r.variant);
        let complete = ORDER.iter().all(|v| rows.iter().any(|r| r.variant == *v));
        let combined_best_observed = complete.then(|| best_psnr == Some(Variant::Combined));
        AblationReport { rows, best_psnr, combined_best_observed }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<13} {:>6} {:>10} {:>14} {:>10} {:>10} {:>7} {:>11}",
            "variant", "stages", "downsample", "latent", "params", "PSNR (dB)", "SSIM", "perceptual*"
        );
        let _ = writeln!(out, "{}", "-".repeat(88));
        for r in &self.rows {
            let latent = format!("{:?}", r.latent_shape).replace(' ', "");
            let _ = writeln!(
                out,
                "{:<13} {:>6} {:>10} {:>14} {:>10} {:>10} {:>7.4} {:>11.5}",
                r.variant.name(),
                r.encoder_stages,
                r.downsample,
                latent,
                r.generator_params,
                r.psnr,
                r.ssim,
                r.perceptual
            );
        }
        let _ = writeln!(out, "\n* {}", crate::eval::PERCEPTUAL_NOTE);
        let flag = match self.combined_best_observed {
            Some(true) => "observed",
            Some(false) => "not observed",
            None => "pending (not all variants run)",
        };
        let _ = writeln!(out, "combined variant best on PSNR: {flag}");
        out
    }
}

fn load_rows(path: &Path) -> Result<Vec<AblationRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let report: AblationReport = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
    Ok(report.rows)
}

/// Trains `variant` from `base`, evaluates it on `data` and merges its row
/// into the comparison report in `out`.
pub fn ablate(variant: Variant, base: &ModelConfig, data: &Dataset, out: &Path) -> Result<AblationReport> {
    let cfg = ModelConfig { variant, ..base.clone() };
    let run_dir = out.join(variant.name());
    let trained = train(&cfg, data, &run_dir, &TrainOptions::default())?;
    let rec = ModelReconstructor { model: &trained.model, params: &trained.state.params };
    let report = evaluate(&rec, data)?;
    write_report(&report, &run_dir.join("eval.json"))?;

    let first = data.load_video(0)?;
    let latent_shape = trained.model.latent_shape(&first.shape()).within("core")?;
    let [_, t, h, w] = first.shape();
    let row = AblationRow {
        variant,
        encoder_stages: if trained.model.e2.is_some() { 2 } else { 1 },
        downsample: format!("{}x{}x{}", t / latent_shape[1], h / latent_shape[2], w / latent_shape[3]),
        latent_shape,
        generator_params: trained.state.params.count(GroupSet::GENERATOR),
        train_steps: trained.state.step,
        final_loss: trained.trace.last().map_or(f64::NAN, |s| s.loss.total),
        psnr: report.means.psnr,
        ssim: report.means.ssim,
        perceptual: report.means.perceptual,
    };
    let path = out.join(REPORT);
    let mut rows = load_rows(&path)?;
    rows.retain(|r| r.variant != variant);
    rows.push(row);
    let merged = AblationReport::from_rows(rows);
    let json = serde_json::to_string_pretty(&merged).map_err(|source| Error::Json { path: path.clone(), source })? + "\n";
    fs::write(&path, json).map_err(Error::io(&path))?;
    let table = out.join(TABLE);
    fs::write(&table, merged.render()).map_err(Error::io(&table))?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, psnr: f64) -> AblationRow {
        AblationRow {
            variant,
            encoder_stages: 2,
            downsample: "4x8x8".into(),
            latent_shape: [4, 1, 4, 4],
            generator_params: 10,
            train_steps: 1,
            final_loss: 0.5,
            psnr: Db(psnr),
            ssim: 0.5,
            perceptual: 0.1,
        }
    }

    #[test]
    fn ordering_flag_needs_all_rows() {
        let partial = AblationReport::from_rows(vec![row(Variant::Combined, 30.0), row(Variant::Simultaneous, 20.0)]);
        assert_eq!(partial.combined_best_observed, None);
        assert_eq!(partial.rows[0].variant, Variant::Simultaneous);
        let full = AblationReport::from_rows(vec![row(Variant::Combined, 30.0), row(Variant::Sequential, 31.0), row(Variant::Simultaneous, 20.0)]);
        assert_eq!(full.combined_best_observed, Some(false));
        assert_eq!(full.best_psnr, Some(Variant::Sequential));
        assert!(full.render().contains("not observed"));
        let won = AblationReport::from_rows(vec![row(Variant::Combined, 32.0), row(Variant::Sequential, 31.0), row(Variant::Simultaneous, 20.0)]);
        assert_eq!(won.combined_best_observed, Some(true));
    }
}
