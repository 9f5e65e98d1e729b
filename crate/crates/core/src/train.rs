//! Training loop: seeded shuffling and augmentation, the epoch-indexed loss
//! weighting, Adam with an exponentially decaying learning rate, metrics
//! logging and checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::clip::{augment_visual, negative_audio_mix, sample_clip, AugmentationConfig};
use crate::domain::{ClipSample, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::mean_ap_grouped;
use crate::loss::{alpha_at, total_loss_tensor};
use crate::model::{AsdModel, Batch};
use crate::nn::{Mode, ParamStore};

pub const LR0: f64 = 1e-4;
pub const LR_DECAY: f64 = 0.95;

/// `lr0 * decay^(epoch - 1)` with the default constants.
pub fn lr_at(epoch: i64) -> Result<f64> {
    lr_schedule(LR0, LR_DECAY, epoch)
}

pub fn lr_schedule(lr0: f64, decay: f64, epoch: i64) -> Result<f64> {
    if epoch < 1 {
        return Err(Error::BadEpoch(epoch));
    }
    Ok(lr0 * decay.powi((epoch - 1) as i32))
}

/// Where initial parameters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Scratch,
    /// Parameters initialised from a checkpoint; optimizer and epoch reset.
    Finetune(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Last epoch to run (epochs are 1-based).
    pub epochs: u32,
    pub lr0: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Frames per training clip; `None` trains on whole tracks.
    pub clip_len: Option<usize>,
    pub stage: Stage,
    pub augment: bool,
    pub augmentation: AugmentationConfig,
    /// Global gradient-norm bound; off by default.
    pub grad_clip: Option<f64>,
    /// Continue from a checkpoint at its epoch + 1.
    pub resume: Option<PathBuf>,
    /// Receives `metrics.jsonl` and the checkpoints.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr0: LR0,
            lr_decay: LR_DECAY,
            batch_size: 4,
            seed: 0,
            clip_len: None,
            stage: Stage::Scratch,
            augment: true,
            augmentation: AugmentationConfig::default(),
            grad_clip: None,
            resume: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr0 {} / lr_decay {}", self.lr0, self.lr_decay)));
        }
        if self.clip_len == Some(0) {
            return Err(Error::Config("clip_len must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        self.augmentation.validate()
    }

    pub fn lr(&self, epoch: u32) -> Result<f64> {
        lr_schedule(self.lr0, self.lr_decay, epoch as i64)
    }
}

/// Adam with bias correction. State is keyed by parameter name so it can be
/// checkpointed.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(OptimizerState::default())
    }
}

impl Adam {
    pub fn new(state: OptimizerState) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state,
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<()> {
        let mut scale = 1.0;
        if let Some(max_norm) = clip {
            let norm = global_norm(store, grads)?;
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let m = match self.state.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.state.v.get(name) {
                Some(v) => ((v * self.beta2)? + (&g2 * (1.0 - self.beta2))?)?,
                None => (&g2 * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.state.m.insert(name.clone(), m);
            self.state.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

fn global_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for var in store.params().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub alpha: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map: Option<f64>,
}

pub struct TrainOutcome {
    pub model: AsdModel,
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: Checkpoint,
    pub final_path: Option<PathBuf>,
    pub best_path: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

/// Video part of a `video:entity` track id.
pub fn video_of(track_id: &str) -> &str {
    track_id.rsplit_once(':').map_or(track_id, |(v, _)| v)
}

/// Per-video mAP of whole-track predictions.
pub fn evaluate_clips(model: &AsdModel, clips: &[ClipSample]) -> Result<f64> {
    let mut by_video: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for clip in clips {
        let scores = model.predict_clip(clip)?;
        let e = by_video.entry(video_of(&clip.track_id).to_string()).or_default();
        e.0.extend(scores);
        e.1.extend_from_slice(&clip.labels);
    }
    mean_ap_grouped(by_video.values().map(|(s, l)| (s.as_slice(), l.as_slice())))
}

/// Owns the model and optimizer across epochs.
pub struct Trainer {
    model: AsdModel,
    config: TrainConfig,
    adam: Adam,
    next_epoch: u32,
}

impl Trainer {
    /// Builds the model for the configured stage, or restores everything
    /// from `config.resume`.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(path) = &config.resume {
            let ck = Checkpoint::load(path)?;
            if ck.model_config != model_config {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different model config",
                    path.display()
                )));
            }
            let model = ck.build_model()?;
            let adam = Adam::new(ck.optimizer_state()?);
            return Ok(Self {
                model,
                config,
                adam,
                next_epoch: ck.epoch + 1,
            });
        }
        let model = AsdModel::new(model_config, DType::F32)?;
        if let Stage::Finetune(path) = &config.stage {
            Checkpoint::load(path)?.load_into(&model)?;
        }
        Ok(Self {
            model,
            config,
            adam: Adam::default(),
            next_epoch: 1,
        })
    }

    pub fn model(&self) -> &AsdModel {
        &self.model
    }

    pub fn into_model(self) -> AsdModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn next_epoch(&self) -> u32 {
        self.next_epoch
    }

    pub fn checkpoint(&self, epoch: u32) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model, Some(self.adam.state()), epoch)
    }

    /// Forward, loss, backward and one optimizer step on a batch of
    /// equal-length clips. Returns the batch loss.
    pub fn train_step(&mut self, clips: &[ClipSample], epoch: u32, batch_index: usize) -> Result<f64> {
        let (batch, labels) = Batch::from_clips(clips, self.model.dtype())?;
        let logits = self.model.forward(&batch, Mode::Train)?;
        let loss = total_loss_tensor(&logits.av, &logits.visual, &labels, epoch as i64)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(self.non_finite(clips, epoch, batch_index, value));
        }
        let grads = loss.backward()?;
        self.adam.step(self.model.store(), &grads, self.config.lr(epoch)?, self.config.grad_clip)?;
        Ok(value)
    }

    fn non_finite(&self, clips: &[ClipSample], epoch: u32, batch: usize, loss: f64) -> Error {
        let bad_params: Vec<&String> = self
            .model
            .store()
            .params()
            .iter()
            .filter(|(_, v)| !all_finite(v.as_tensor()))
            .map(|(k, _)| k)
            .collect();
        let dump = serde_json::json!({
            "epoch": epoch,
            "batch": batch,
            "loss": loss.to_string(),
            "tracks": clips.iter().map(|c| &c.track_id).collect::<Vec<_>>(),
            "frames": clips.first().map_or(0, |c| c.num_frames()),
            "positives": clips.iter().map(|c| c.labels.iter().filter(|&&l| l == 1).count()).collect::<Vec<_>>(),
            "non_finite_params": bad_params,
        });
        let mut detail = format!("loss {loss}; {} non-finite parameter tensors", bad_params.len());
        if let Some(dir) = &self.config.out_dir {
            let path = dir.join(NONFINITE_DUMP);
            if std::fs::create_dir_all(dir).is_ok()
                && std::fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default()).is_ok()
            {
                detail.push_str(&format!("; batch dump at {}", path.display()));
            }
        }
        Error::NonFiniteLoss {
            epoch: epoch as usize,
            batch,
            detail,
        }
    }

    /// Training clips for one epoch in batch order: seeded shuffle, window
    /// sampling, augmentation, then batches of equal length.
    pub fn epoch_batches(&self, data: &[ClipSample], epoch: u32) -> Result<Vec<Vec<ClipSample>>> {
        let seed = self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut by_len: BTreeMap<usize, Vec<ClipSample>> = BTreeMap::new();
        for &i in &order {
            let track = &data[i];
            let len = self.config.clip_len.unwrap_or(track.num_frames());
            let mut clip = sample_clip(track, len, rng.gen())?;
            let aug_seed: u64 = rng.gen();
            if self.config.augment {
                clip = augment_visual(&clip, &self.config.augmentation, aug_seed ^ self.config.augmentation.seed);
            }
            by_len.entry(clip.num_frames()).or_default().push(clip);
        }
        let mut batches: Vec<Vec<ClipSample>> = Vec::new();
        for group in by_len.into_values() {
            for chunk in group.chunks(self.config.batch_size) {
                batches.push(chunk.to_vec());
            }
        }
        batches.shuffle(&mut rng);
        if self.config.augment && self.config.augmentation.negative_audio_prob > 0.0 {
            for batch in &mut batches {
                let n = batch.len();
                if n < 2 {
                    continue;
                }
                let donors: Vec<Vec<f32>> = batch.iter().map(|c| c.waveform.clone()).collect();
                for (j, clip) in batch.iter_mut().enumerate() {
                    *clip = negative_audio_mix(clip, &donors[(j + 1) % n], &self.config.augmentation, rng.gen());
                }
            }
        }
        Ok(batches)
    }

    /// One epoch; returns the frame-weighted mean batch loss.
    pub fn run_epoch(&mut self, data: &[ClipSample], epoch: u32) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batches = self.epoch_batches(data, epoch)?;
        let (mut sum, mut weight) = (0.0, 0.0);
        for (i, batch) in batches.iter().enumerate() {
            let loss = self.train_step(batch, epoch, i)?;
            let w = batch.len() as f64;
            sum += loss * w;
            weight += w;
        }
        self.next_epoch = epoch + 1;
        Ok(sum / weight)
    }

    /// Runs epochs `next_epoch..=config.epochs`, logging metrics and
    /// writing checkpoints when `out_dir` is set.
    pub fn fit(mut self, train: &[ClipSample], val: Option<&[ClipSample]>) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for c in train.iter().chain(val.into_iter().flatten()) {
            c.validate()?;
        }
        let out_dir = self.config.out_dir.clone();
        let mut log = match &out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(self.config.resume.is_some())
                    .write(true)
                    .truncate(self.config.resume.is_none())
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut metrics = Vec::new();
        let mut best: Option<f64> = None;
        let mut best_path = None;
        let start = self.next_epoch;
        for epoch in start..=self.config.epochs {
            let train_loss = self.run_epoch(train, epoch)?;
            let val_map = match val {
                Some(v) if !v.is_empty() => Some(evaluate_clips(&self.model, v)?),
                _ => None,
            };
            let m = EpochMetrics {
                epoch,
                alpha: alpha_at(epoch as i64)?,
                lr: self.config.lr(epoch)?,
                train_loss,
                val_map,
            };
            log::info!(
                "epoch {epoch}: loss {train_loss:.5} alpha {:.4} lr {:.3e} val_map {:?}",
                m.alpha,
                m.lr,
                val_map
            );
            if let Some((f, path)) = &mut log {
                let line = serde_json::to_string(&m)?;
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            // Higher val mAP is better; without validation, lower loss is.
            let score = val_map.unwrap_or(-train_loss);
            if let Some(dir) = &out_dir {
                let ck = self.checkpoint(epoch)?;
                ck.save(&dir.join(FINAL_CHECKPOINT))?;
                if best.map_or(true, |b| score > b) {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                    best_path = Some(dir.join(BEST_CHECKPOINT));
                }
            }
            if best.map_or(true, |b| score > b) {
                best = Some(score);
            }
            metrics.push(m);
        }
        let last = self.next_epoch.saturating_sub(1);
        let final_checkpoint = self.checkpoint(last)?;
        let final_path = out_dir.as_ref().map(|d| d.join(FINAL_CHECKPOINT));
        if let Some(p) = &final_path {
            if !p.exists() {
                final_checkpoint.save(p)?;
            }
        }
        Ok(TrainOutcome {
            model: self.model,
            metrics,
            final_checkpoint,
            final_path,
            best_path,
        })
    }
}

fn all_finite(t: &Tensor) -> bool {
    t.flatten_all()
        .and_then(|f| f.to_dtype(DType::F64))
        .and_then(|f| f.to_vec1::<f64>())
        .map(|v| v.iter().all(|x| x.is_finite()))
        .unwrap_or(false)
}

/// Trains `model_config` on `train` with optional validation clips.
pub fn train(
    model_config: &ModelConfig,
    train: &[ClipSample],
    val: Option<&[ClipSample]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Trainer::new(model_config.clone(), config.clone())?.fit(train, val)
}

/// Reads a metrics log written by [`Trainer::fit`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
