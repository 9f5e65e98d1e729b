//! Flat key-value run configuration (TOML) and the per-run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::clip::AugmentationConfig;
use crate::domain::{ModelConfig, TemporalModel, VisualInputs};
use crate::error::{Error, Result};
use crate::train::{Stage, TrainConfig};

pub const SEED_ENV: &str = "ASDNB_SEED";

/// Model ablations selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// No audio encoder; the main head sees visual embeddings only.
    VisualOnly,
    /// No body stream.
    FaceOnly,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "visual-only" => Ok(Ablation::VisualOnly),
            "face-only" => Ok(Ablation::FaceOnly),
            other => Err(Error::Config(format!("unknown ablation {other:?} (none, visual-only, face-only)"))),
        }
    }
}

/// Training run settings. Every key is optional; unset keys take the
/// library defaults. Relative paths in a file resolve against the file's
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<u32>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub lr0: Option<f64>,
    pub lr_decay: Option<f64>,
    pub clip_len: Option<usize>,
    pub augment: Option<bool>,
    pub grad_clip: Option<f64>,
    pub ablation: Option<Ablation>,
    /// Main head temporal model: none, gru, lstm, bilstm or bigru.
    pub temporal: Option<String>,
    /// Divides every model width (1 = full size).
    pub model_scale: Option<usize>,
    pub finetune: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.val_data, &mut cfg.out, &mut cfg.finetune, &mut cfg.resume]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// `self` with every key set in `top` replaced.
    pub fn overlay(mut self, top: RunConfig) -> Self {
        overlay!(
            self, top, data, val_data, out, epochs, batch_size, seed, lr0, lr_decay, clip_len, augment, grad_clip,
            ablation, temporal, model_scale, finetune, resume
        );
        self
    }

    /// Applies `ASDNB_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.seed = Some(seed);
        }
        Ok(self)
    }

    pub fn model_config(&self, frame_size: usize) -> Result<ModelConfig> {
        let mut m = match self.model_scale.unwrap_or(1) {
            0 => return Err(Error::Config("model_scale must be positive".into())),
            1 => ModelConfig::default(),
            k => ModelConfig::scaled(k),
        };
        m.frame_size = frame_size;
        m.seed = self.seed.unwrap_or(0);
        if let Some(t) = &self.temporal {
            m.temporal = t.parse::<TemporalModel>()?;
        }
        match self.ablation.unwrap_or_default() {
            Ablation::None => {}
            Ablation::VisualOnly => m.use_audio = false,
            Ablation::FaceOnly => m.visual_inputs = VisualInputs::FaceOnly,
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let seed = self.seed.unwrap_or(d.seed);
        if self.finetune.is_some() && self.resume.is_some() {
            return Err(Error::Config("finetune and resume are mutually exclusive".into()));
        }
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            lr0: self.lr0.unwrap_or(d.lr0),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed,
            clip_len: self.clip_len.or(d.clip_len),
            stage: self.finetune.clone().map_or(Stage::Scratch, Stage::Finetune),
            augment: self.augment.unwrap_or(d.augment),
            augmentation: AugmentationConfig { seed, ..AugmentationConfig::default() },
            grad_clip: self.grad_clip.or(d.grad_clip),
            resume: self.resume.clone(),
            out_dir: self.out.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Hashes `path` into the input list; missing files are skipped.
    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        if path.is_file() {
            self.inputs.insert(label.to_string(), file_sha256(path)?);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "data = \"synth\"\nepochs = 5\nbatch_size = 2\nablation = \"face-only\"\n").unwrap();
        let file = RunConfig::load(&path).unwrap();
        assert_eq!(file.data, Some(dir.path().join("synth")));
        let merged = file.overlay(RunConfig {
            epochs: Some(2),
            ..Default::default()
        });
        assert_eq!(merged.epochs, Some(2));
        assert_eq!(merged.batch_size, Some(2));
        let m = merged.model_config(112).unwrap();
        assert_eq!(m.visual_inputs, VisualInputs::FaceOnly);
        assert!(m.use_audio);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("/nonexistent/run.toml")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epochz = 5\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn visual_only_drops_audio() {
        let m = RunConfig {
            ablation: Some(Ablation::VisualOnly),
            ..Default::default()
        }
        .model_config(112)
        .unwrap();
        assert!(!m.use_audio);
    }
}
