//! The `crossvae` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures
//! (reported as `error [<module>]: <message>`). Logging goes to stderr and is
//! controlled by `CROSSVAE_LOG` = `quiet` | `info` (default) | `debug`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use crossvae_core::config::Variant;
use crossvae_core::{ModelConfig, VideoTensor};

use crate::ablation::ablate;
use crate::checkpoint;
use crate::dataset::{generate_dataset, Dataset, DatasetTemplate};
use crate::error::{Error, Result, Within};
use crate::eval::{evaluate, render_table, write_report, ModelReconstructor};
use crate::trainer::{caption_embedding, train, TrainOptions};
use crate::vten;

#[derive(Debug, Parser)]
#[command(name = "crossvae", version, about = "Train, run and evaluate the two-stage video autoencoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Simultaneous,
    Sequential,
    Combined,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Simultaneous => Variant::Simultaneous,
            VariantArg::Sequential => Variant::Sequential,
            VariantArg::Combined => Variant::Combined,
        }
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size {s:?}"));
    Ok((parse(h)?, parse(w)?))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a captioned moving-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Canvas as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        /// Upper bound on shapes per clip (1 to 4).
        #[arg(long)]
        max_shapes: Option<usize>,
    },
    /// Train a model described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write the posterior-mean latent of a clip.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        caption: Option<String>,
    },
    /// Reconstruct a clip from a latent.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        caption: Option<String>,
        /// The latent came from a single image rather than a clip.
        #[arg(long)]
        image: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate one compression arrangement for the comparison table.
    Ablate {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    ModelConfig::from_json(&text).and_then(|c| c.validate()).within("core")
}

/// Configures logging from `CROSSVAE_LOG`. Safe to call more than once.
pub fn init_logging() {
    let level = match std::env::var("CROSSVAE_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level().as_str().to_lowercase(), record.args()))
        .try_init();
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, n, seed, frames, size, max_shapes } => {
            let mut template = DatasetTemplate::new(frames, size.0, size.1);
            if let Some(m) = max_shapes {
                template.shapes = [1, m];
            }
            let entries = generate_dataset(&out, &template, n, seed)?;
            log::info!("wrote {} clips to {}", entries.len(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let cfg = read_config(&config)?;
            let data = Dataset::open(&data)?;
            let done = train(&cfg, &data, &out, &TrainOptions { resume, ..Default::default() })?;
            log::info!("checkpoint at {} after {} steps", done.checkpoint.display(), done.state.step);
        }
        Command::Encode { ckpt, input, out, caption } => {
            let loaded = checkpoint::load(&ckpt)?;
            let video = vten::read_video(&input)?;
            let text = caption_embedding(&loaded.model.cfg, caption.as_deref().unwrap_or(""))?;
            let z = loaded.model.encode(&loaded.state.params, &video, text.as_ref()).within("core")?;
            vten::write_tensor(&out, &z)?;
            log::info!("latent {:?} written to {}", z.shape(), out.display());
        }
        Command::Decode { ckpt, input, out, caption, image } => {
            let loaded = checkpoint::load(&ckpt)?;
            let z = vten::read_rank4(&input)?;
            let text = caption_embedding(&loaded.model.cfg, caption.as_deref().unwrap_or(""))?;
            let raw = loaded.model.decode(&loaded.state.params, &z, text.as_ref(), image).within("core")?;
            let video = VideoTensor::clamped(&raw).within("core")?;
            vten::write_video(&out, &video)?;
            log::info!("clip {:?} written to {}", video.shape(), out.display());
        }
        Command::Eval { ckpt, data, report } => {
            let loaded = checkpoint::load(&ckpt)?;
            let data = Dataset::open(&data)?;
            let rec = ModelReconstructor { model: &loaded.model, params: &loaded.state.params };
            let result = evaluate(&rec, &data)?;
            write_report(&result, &report)?;
            print!("{}", render_table(&result));
        }
        Command::Ablate { variant, config, data, out } => {
            let cfg = read_config(&config)?;
            let data = Dataset::open(&data)?;
            let report = ablate(variant.into(), &cfg, &data, &out)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    init_logging();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_flag_parses() {
        assert_eq!(parse_size("32x64"), Ok((32, 64)));
        assert!(parse_size("32").is_err());
        assert!(parse_size("ax8").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["crossvae", "train", "--bogus"]), 1);
        assert_eq!(run(["crossvae"]), 1);
        assert_eq!(run(["crossvae", "ablate", "--variant", "other", "--config", "c", "--data", "d", "--out", "o"]), 1);
        assert_eq!(run(["crossvae", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(run(["crossvae", "eval", "--ckpt", "/nonexistent/c.ckpt", "--data", "/nonexistent", "--report", "/tmp/r.json"]), 2);
    }
}
