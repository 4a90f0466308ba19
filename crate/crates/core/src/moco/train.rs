use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, PretrainConfig};
use super::loss::info_nce_batch;
use super::momentum::momentum_update;
use super::queue::KeyQueue;
use crate::augment::{make_view_pair, AugmentConfig};
use crate::checkpoint::{self, CheckpointMeta, RngState};
use crate::data::{load_scans, DatasetIndex, VolumeSeries};
use crate::encoder::{backward, forward, init_encoder, stack_batch, update_running_stats, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, IoContext, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{derive_path, derive_seed, rng_from};
use crate::tensor::NamedTensors;

const SHUFFLE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// Everything needed to continue pretraining bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MocoState {
    pub query: EncoderParams<f32>,
    pub key: EncoderParams<f32>,
    pub queue: KeyQueue,
    pub optimizer: Optimizer<f32>,
    /// Completed epochs; the epoch in progress during training.
    pub epoch: u64,
    pub seed: u64,
}

impl MocoState {
    /// Fresh state: the key encoder starts as a copy of the query encoder.
    pub fn new(enc: &EncoderConfig, cfg: &PretrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let query = init_encoder::<f32>(enc, derive_seed(seed, 1))?;
        let key = query.clone();
        let queue = KeyQueue::random(cfg.queue_size, enc.embed_dim, derive_seed(seed, 2))?;
        Ok(MocoState { query, key, queue, optimizer: new_optimizer(cfg), epoch: 0, seed })
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.seed, epoch: self.epoch }
    }

    pub fn validate(&self) -> Result<()> {
        self.query.same_shape(&self.key)?;
        if self.queue.dim() != self.query.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "queue width {} vs embedding width {}",
                self.queue.dim(),
                self.query.cfg.embed_dim
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, cfg: &PretrainConfig, aug: &AugmentConfig) -> Result<()> {
        let mut tensors = NamedTensors::new();
        checkpoint::add_prefixed(&mut tensors, &self.query.tensors, "query");
        checkpoint::add_prefixed(&mut tensors, &self.key.tensors, "key");
        checkpoint::add_prefixed(&mut tensors, self.optimizer.state(), "optim");
        tensors.insert("queue".into(), self.queue.keys().to_owned().into_dyn());
        let config = serde_json::json!({
            "encoder": self.query.cfg,
            "pretrain": cfg,
            "augment": aug,
        });
        let mut meta = CheckpointMeta::new("moco", self.epoch, self.rng_state(), config);
        meta.extra = serde_json::json!({
            "queue_ptr": self.queue.ptr(),
            "optimizer": self.optimizer.kind(),
            "optimizer_step": self.optimizer.steps_taken(),
        });
        checkpoint::write_checkpoint(dir, meta, &tensors)
    }

    /// Restores a state together with the pretraining config it was saved with.
    pub fn load(dir: &Path) -> Result<(Self, PretrainConfig)> {
        let (meta, tensors) = checkpoint::read_checkpoint(dir)?;
        if meta.kind != "moco" {
            return Err(Error::Format(format!("{} is a {} checkpoint, not a pretraining one", dir.display(), meta.kind)));
        }
        let bad = |what: &str| Error::Format(format!("{}: {what}", dir.display()));
        let cfg: PretrainConfig = serde_json::from_value(meta.config.get("pretrain").cloned().unwrap_or_default())
            .map_err(|e| bad(&format!("pretrain config: {e}")))?;
        let query = checkpoint::encoder_from(&meta, &tensors, dir)?;
        let key = EncoderParams::from_tensors(query.cfg.clone(), checkpoint::strip_prefix(&tensors, "key"), Mode::Train)?;
        let rows = tensors.get("queue").ok_or_else(|| bad("missing queue"))?;
        let rows: Array2<f32> = rows.clone().into_dimensionality().map_err(|_| bad("queue is not 2-D"))?;
        let ptr = meta.extra.get("queue_ptr").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing queue_ptr"))?;
        let kind: OptimizerKind = serde_json::from_value(meta.extra.get("optimizer").cloned().unwrap_or_default())
            .map_err(|e| bad(&format!("optimizer kind: {e}")))?;
        if kind != cfg.optimizer {
            return Err(bad("optimizer kind disagrees with config"));
        }
        let step = meta.extra.get("optimizer_step").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut optimizer = new_optimizer(&cfg);
        optimizer.restore(step, checkpoint::strip_prefix(&tensors, "optim"));
        let state = MocoState {
            query,
            key,
            queue: KeyQueue::from_parts(rows, ptr as usize)?,
            optimizer,
            epoch: meta.rng_state.epoch,
            seed: meta.rng_state.seed,
        };
        state.validate()?;
        Ok((state, cfg))
    }
}

fn new_optimizer(cfg: &PretrainConfig) -> Optimizer<f32> {
    match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::sgd(cfg.sgd_momentum, cfg.weight_decay),
        OptimizerKind::Adam => Optimizer::adam(cfg.weight_decay),
    }
}

/// One contrastive update on `batch`; returns the mean loss. The learning
/// rate follows the schedule at `state.epoch`.
pub fn pretrain_step(
    state: &mut MocoState,
    batch: &[&VolumeSeries],
    cfg: &PretrainConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Size("empty pretraining batch".into()));
    }
    let pairs = batch
        .par_iter()
        .enumerate()
        .map(|(j, vs)| make_view_pair(vs, aug, derive_seed(seed, j as u64)))
        .collect::<Result<Vec<_>>>()?;
    let xa = stack_batch(&pairs.iter().map(|p| &p.view_a).collect::<Vec<_>>())?;
    let xb = stack_batch(&pairs.iter().map(|p| &p.view_b).collect::<Vec<_>>())?;
    drop(pairs);

    state.query.mode = Mode::Train;
    state.key.mode = Mode::Train;
    let (q_pass, k_pass) = rayon::join(
        || forward(&state.query, xa.view(), derive_seed(seed, 1 << 32)),
        || forward(&state.key, xb.view(), derive_seed(seed, (1 << 32) + 1)),
    );
    let (q_pass, k) = (q_pass?, k_pass?.embeddings);

    let tau = cfg.temperature as f32;
    let (loss, dq) = info_nce_batch(q_pass.embeddings.view(), k.view(), state.queue.keys(), tau)?;
    if !loss.is_finite() {
        let max_abs = q_pass.embeddings.iter().fold(0f32, |m, v| m.max(v.abs()));
        return Err(Error::Training(format!(
            "non-finite contrastive loss {loss} at epoch {} (lr {}, max |q| {max_abs}, queue ptr {}, batch {})",
            state.epoch,
            lr_at(state.epoch, cfg),
            state.queue.ptr(),
            batch.len()
        )));
    }
    let grads = backward(&state.query, &q_pass, Some(dq.view()), None)?;
    update_running_stats(&mut state.query, &q_pass);
    state.optimizer.step(&mut state.query.tensors, &grads, lr_at(state.epoch, cfg))?;
    momentum_update(&mut state.key.tensors, &state.query.tensors, cfg.momentum)?;
    state.queue.enqueue(k.view())?;
    Ok(loss as f64)
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Inputs of a pretraining run besides the data.
#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Receives `log.jsonl` and `checkpoints/`.
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

/// Result of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: MocoState,
    pub log: Vec<EpochLog>,
    pub last_checkpoint: Option<PathBuf>,
}

pub fn pretrain(
    dataset: &DatasetIndex,
    run: &PretrainRun,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Size("pretraining needs at least one scan".into()));
    }
    let scans = load_scans(dataset.records())?;
    pretrain_scans(&scans, run, on_epoch)
}

/// Pretraining over scans already in memory.
pub fn pretrain_scans(
    scans: &[VolumeSeries],
    run: &PretrainRun,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    let cfg = &run.pretrain;
    cfg.validate()?;
    run.encoder.validate()?;
    run.augment.validate()?;
    check_scans(scans, &run.encoder, run.augment.crop_len)?;

    let mut state = match &run.resume {
        Some(dir) => {
            let (state, saved) = MocoState::load(dir)?;
            if state.query.cfg != run.encoder {
                return Err(Error::Config(format!("{}: encoder config differs from the run's", dir.display())));
            }
            if saved.optimizer != cfg.optimizer || saved.queue_size != cfg.queue_size {
                return Err(Error::Config(format!("{}: optimizer or queue size differs from the run's", dir.display())));
            }
            state
        }
        None => MocoState::new(&run.encoder, cfg, run.seed)?,
    };

    let ckpt_root = run.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_root).at(&ckpt_root)?;
    let log_path = run.out_dir.join("log.jsonl");
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log_path).at(&log_path)?;

    let n = scans.len();
    let b = cfg.batch_size;
    let steps = n.div_ceil(b);
    let mut log = Vec::new();
    let mut last_checkpoint = None;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_path(state.seed, &[SHUFFLE_STREAM, epoch])));
        let mut total = 0.0;
        for step in 0..steps {
            let batch: Vec<&VolumeSeries> = (0..b).map(|j| &scans[order[(step * b + j) % n]]).collect();
            let seed = derive_path(state.seed, &[STEP_STREAM, epoch, step as u64]);
            total += pretrain_step(&mut state, &batch, cfg, &run.augment, seed)?;
        }
        let entry = EpochLog {
            epoch,
            loss: total / steps as f64,
            lr: lr_at(epoch, cfg),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        state.epoch = epoch + 1;
        let dir = checkpoint::epoch_dir(&ckpt_root, state.epoch);
        state.save(&dir, cfg, &run.augment)?;
        last_checkpoint = Some(dir);
        let mut line = serde_json::to_value(&entry).expect("log entry serializes");
        line["event"] = "pretrain_epoch".into();
        writeln!(log_file, "{line}").at(&log_path)?;
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(PretrainOutcome { state, log, last_checkpoint })
}

fn check_scans(scans: &[VolumeSeries], enc: &EncoderConfig, crop_len: usize) -> Result<()> {
    if scans.is_empty() {
        return Err(Error::Size("pretraining needs at least one scan".into()));
    }
    for (i, s) in scans.iter().enumerate() {
        let [t, z, y, x] = s.shape();
        if z != enc.input_depth || (y, x) != enc.input_hw {
            return Err(Error::Shape(format!(
                "scan {i} has volume {z}x{y}x{x}, encoder expects {}x{}x{}",
                enc.input_depth, enc.input_hw.0, enc.input_hw.1
            )));
        }
        if t < crop_len {
            return Err(Error::Shape(format!("scan {i} has {t} timepoints, crop needs {crop_len}")));
        }
    }
    Ok(())
}
