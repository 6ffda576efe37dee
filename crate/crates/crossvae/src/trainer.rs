//! Drives [`training_step`] over a dataset on disk, logging every step as a
//! JSON line and writing checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crossvae_core::losses::LossReport;
use crossvae_core::model::VideoVae;
use crossvae_core::rng::SeededRng;
use crossvae_core::text::{HashEmbedder, TextEmbedder, TextEmbedding};
use crossvae_core::training::{expected_kind, training_step, Batch, BatchKind, Sample, TrainState};
use crossvae_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result, Within};

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const LOG: &str = "train_log.jsonl";
pub const CONFIG: &str = "config.json";

/// Embeds a caption the way the model was configured to read it; `None`
/// when cross-modal conditioning is off.
pub fn caption_embedding(cfg: &ModelConfig, caption: &str) -> Result<Option<TextEmbedding>> {
    if !cfg.crossmodal_enabled {
        return Ok(None);
    }
    let embedder = HashEmbedder { dim: cfg.text_embed_dim, max_tokens: cfg.max_text_tokens };
    embedder.embed(caption).map(Some).within("crossmodal")
}

/// Videos drawn for `step`: a fixed function of the seed and the step, so a
/// resumed run sees the same batches as an uninterrupted one.
pub fn select_videos(cfg: &ModelConfig, step: u64, kind: BatchKind, n_videos: usize) -> Vec<usize> {
    let want = match kind {
        BatchKind::Video => cfg.batch_videos,
        BatchKind::Image => cfg.image_batch_videos,
    }
    .min(n_videos);
    let mut rng = SeededRng::new(cfg.seed ^ 0x6261_7463_6865_7321).fork(step + 1);
    let mut pool: Vec<usize> = (0..n_videos).collect();
    for i in 0..want {
        let j = rng.int_range(i as i64, n_videos as i64 - 1) as usize;
        pool.swap(i, j);
    }
    pool.truncate(want);
    pool
}

/// Assembles the training batch for `step`.
pub fn batch_for_step(cfg: &ModelConfig, data: &Dataset, step: u64) -> Result<Batch> {
    let kind = expected_kind(cfg, step);
    let indices = select_videos(cfg, step, kind, data.len());
    let loaded = data.load_batch(&indices, kind == BatchKind::Image)?;
    let samples = loaded
        .videos
        .into_iter()
        .zip(&loaded.captions)
        .map(|(video, caption)| Ok(Sample { video, text: caption_embedding(cfg, caption)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { kind, samples })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub kind: BatchKind,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Also write `checkpoint_<step>.ckpt` every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Stop after this step even if `train_steps` is larger.
    pub stop_at: Option<u64>,
}

pub struct TrainOutcome {
    pub model: VideoVae,
    pub state: TrainState,
    /// Steps run by this invocation.
    pub trace: Vec<StepLog>,
    pub checkpoint: PathBuf,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let file = if append { OpenOptions::new().create(true).append(true).open(path) } else { File::create(path) };
    Ok(BufWriter::new(file.map_err(Error::io(path))?))
}

/// Trains `cfg` on `data` until `train_steps`, writing the config, the log and
/// the final checkpoint into `out`.
pub fn train(cfg: &ModelConfig, data: &Dataset, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = cfg.validate().within("core")?;
    if data.is_empty() {
        return Err(Error::Dataset(format!("{} holds no videos", data.root().display())));
    }
    let (model, state) = match &opts.resume {
        Some(path) => {
            let loaded = checkpoint::load(path)?;
            if !checkpoint::resumable(&loaded.model.cfg, &cfg) {
                return Err(Error::checkpoint(path, "checkpoint was trained with a different config"));
            }
            let (model, _) = VideoVae::build::<f32>(&cfg).within("core")?;
            let mut state = loaded.state;
            state.config_hash = cfg.hash_hex();
            (model, state)
        }
        None => {
            let (model, params) = VideoVae::build::<f32>(&cfg).within("core")?;
            (model, TrainState::new(&cfg, params))
        }
    };
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let cfg_path = out.join(CONFIG);
    fs::write(&cfg_path, cfg.to_json() + "\n").map_err(Error::io(&cfg_path))?;
    let log_path = out.join(LOG);
    let mut log = open_log(&log_path, opts.resume.is_some())?;

    let end = opts.stop_at.map_or(cfg.train_steps, |s| s.min(cfg.train_steps));
    let mut state = state;
    let mut trace = Vec::new();
    log::info!("training {} from step {} to {end} on {} videos", cfg.variant.name(), state.step, data.len());
    while state.step < end {
        let step = state.step;
        let batch = batch_for_step(&cfg, data, step)?;
        let loss = training_step(&model, &mut state, &batch).within("training")?;
        let entry = StepLog { step, kind: batch.kind, loss };
        let line = serde_json::to_string(&entry).map_err(|source| Error::Json { path: log_path.clone(), source })?;
        writeln!(log, "{line}").map_err(Error::io(&log_path))?;
        if step % 50 == 0 || step + 1 == end {
            log::info!("step {step} {:?} loss {:.5}", batch.kind, loss.total);
        }
        log::debug!("{line}");
        trace.push(entry);
        if opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0 && state.step < end {
            checkpoint::save(out.join(format!("checkpoint_{}.ckpt", state.step)), &model, &state)?;
        }
    }
    log.flush().map_err(Error::io(&log_path))?;
    let ckpt = out.join(CHECKPOINT);
    checkpoint::save(&ckpt, &model, &state)?;
    Ok(TrainOutcome { model, state, trace, checkpoint: ckpt })
}
