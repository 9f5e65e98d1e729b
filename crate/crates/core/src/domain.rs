//! Shared domain types: clips, embeddings and the model configuration.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of face and body crops fed to the visual encoder.
pub const FRAME_SIZE: usize = 112;
/// Audio sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Width of every per-frame embedding.
pub const EMBED_DIM: usize = 128;
/// Audio hop in seconds; also the tolerance on audio/video duration.
pub const HOP_SECONDS: f64 = 0.010;

/// A stack of `T` square images, row-major, channel-major within a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    channels: usize,
    size: usize,
    data: Vec<f32>,
}

impl FrameStack {
    pub fn new(channels: usize, size: usize, data: Vec<f32>) -> Result<Self> {
        let per = channels * size * size;
        if per == 0 || data.len() % per != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values is not a whole number of {channels}x{size}x{size} frames",
                data.len()
            )));
        }
        Ok(Self { channels, size, data })
    }

    pub fn zeros(frames: usize, channels: usize, size: usize) -> Self {
        Self {
            channels,
            size,
            data: vec![0.0; frames * channels * size * size],
        }
    }

    /// Grayscale stack from per-frame pixel buffers.
    pub fn from_frames(size: usize, frames: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * size * size);
        for f in frames {
            if f.len() != size * size {
                return Err(Error::ShapeMismatch(format!("frame of {} values, expected {}", f.len(), size * size)));
            }
            data.extend_from_slice(f);
        }
        Ok(Self { channels: 1, size, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Contiguous window of frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let n = self.frame_len();
        Self {
            channels: self.channels,
            size: self.size,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }
}

/// Aligned face frames, body frames, audio and per-frame labels of one
/// candidate track.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub face_frames: FrameStack,
    pub body_frames: FrameStack,
    /// Mono samples at [`SAMPLE_RATE`].
    pub waveform: Vec<f32>,
    /// 1 = speaking.
    pub labels: Vec<u8>,
    pub track_id: String,
    pub fps: f64,
}

impl ClipSample {
    pub fn num_frames(&self) -> usize {
        self.face_frames.len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames() as f64 / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.face_frames.len();
        if t == 0 {
            return Err(Error::MismatchedLengths("clip has no frames".into()));
        }
        if self.body_frames.len() != t || self.labels.len() != t {
            return Err(Error::MismatchedLengths(format!(
                "face {t}, body {}, labels {}",
                self.body_frames.len(),
                self.labels.len()
            )));
        }
        if self.face_frames.size() != self.body_frames.size()
            || self.face_frames.channels() != self.body_frames.channels()
        {
            return Err(Error::MismatchedLengths(format!(
                "face crops {}x{}x{} vs body crops {}x{}x{}",
                self.face_frames.channels(),
                self.face_frames.size(),
                self.face_frames.size(),
                self.body_frames.channels(),
                self.body_frames.size(),
                self.body_frames.size()
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::ValueRange(format!("fps {}", self.fps)));
        }
        let audio_secs = self.waveform.len() as f64 / SAMPLE_RATE as f64;
        let video_secs = self.duration_secs();
        if (audio_secs - video_secs).abs() > HOP_SECONDS + 1e-9 {
            return Err(Error::AudioDurationMismatch { audio_secs, video_secs });
        }
        for (name, stack) in [("face", &self.face_frames), ("body", &self.body_frames)] {
            if let Some(v) = stack.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::ValueRange(format!("{name} pixel {v} outside [0,1]")));
            }
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::ValueRange(format!("label {l} is not binary")));
        }
        if let Some(s) = self.waveform.iter().find(|s| !s.is_finite()) {
            return Err(Error::ValueRange(format!("non-finite audio sample {s}")));
        }
        Ok(())
    }
}

/// Returns the sample unchanged when every clip invariant holds.
pub fn validate_sample(sample: ClipSample) -> Result<ClipSample> {
    sample.validate()?;
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
    Fused,
}

/// Per-frame `T x D` feature sequence.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    values: Tensor,
    modality: Modality,
}

impl EmbeddingSequence {
    /// Wraps a `T x 128` tensor.
    pub fn new(values: Tensor, modality: Modality) -> Result<Self> {
        Self::with_dim(values, modality, EMBED_DIM)
    }

    /// Like [`EmbeddingSequence::new`] with a non-default width (reduced test
    /// models).
    pub fn with_dim(values: Tensor, modality: Modality, dim: usize) -> Result<Self> {
        let (_, d) = values
            .dims2()
            .map_err(|_| Error::ShapeMismatch(format!("embedding must be rank 2, got {:?}", values.dims())))?;
        if d != dim {
            return Err(Error::ShapeMismatch(format!("embedding width {d}, expected {dim}")));
        }
        let finite = values
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::ValueRange("embedding contains non-finite values".into()));
        }
        Ok(Self { values, modality })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    /// Elementwise sum of a visual and an audio sequence.
    pub fn fuse(visual: &Self, audio: &Self) -> Result<Self> {
        if visual.modality != Modality::Visual || audio.modality != Modality::Audio {
            return Err(Error::ShapeMismatch(format!(
                "fusion expects (visual, audio), got ({:?}, {:?})",
                visual.modality, audio.modality
            )));
        }
        if visual.values.dims() != audio.values.dims() {
            return Err(Error::ShapeMismatch(format!(
                "visual {:?} vs audio {:?}",
                visual.values.dims(),
                audio.values.dims()
            )));
        }
        Ok(Self {
            values: (&visual.values + &audio.values)?,
            modality: Modality::Fused,
        })
    }
}

/// Colour layout of the visual crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    #[default]
    Grayscale,
    Rgb,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Grayscale => 1,
            ColorMode::Rgb => 3,
        }
    }
}

/// Which visual streams the encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisualInputs {
    #[default]
    FaceAndBody,
    FaceOnly,
}

/// Temporal model of a classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalModel {
    /// Per-frame fully connected layer only.
    None,
    Gru,
    Lstm,
    BiLstm,
    #[default]
    BiGru,
}

impl std::str::FromStr for TemporalModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "gru" | "forward-gru" => Self::Gru,
            "lstm" | "forward-lstm" => Self::Lstm,
            "bilstm" | "bidirectional-lstm" => Self::BiLstm,
            "bigru" | "bidirectional-gru" => Self::BiGru,
            other => return Err(Error::Config(format!("unknown temporal model {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub frame_size: usize,
    pub color: ColorMode,
    /// Output channels of the stride-2 stem convolution of each visual stream.
    pub visual_stem: usize,
    /// Widths of the three dual-path stages.
    pub visual_channels: [usize; 3],
    pub audio_channels: [usize; 4],
    pub audio_blocks: [usize; 4],
    pub se_reduction: usize,
    pub gru_hidden: usize,
    pub kernel_pair: (usize, usize),
    /// Main (audio-visual) classifier.
    pub temporal: TemporalModel,
    /// Auxiliary visual-only classifier.
    pub aux_temporal: TemporalModel,
    pub visual_inputs: VisualInputs,
    pub use_audio: bool,
    /// Fraction of frames whose per-frame embeddings are replaced by the
    /// embedding of another frame of the same clip before the heads.
    #[serde(default)]
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: EMBED_DIM,
            frame_size: FRAME_SIZE,
            color: ColorMode::Grayscale,
            visual_stem: 16,
            visual_channels: [32, 64, 128],
            audio_channels: [16, 32, 64, 96],
            audio_blocks: [3, 4, 6, 3],
            se_reduction: 16,
            gru_hidden: 128,
            kernel_pair: (3, 5),
            temporal: TemporalModel::BiGru,
            aux_temporal: TemporalModel::BiGru,
            visual_inputs: VisualInputs::FaceAndBody,
            use_audio: true,
            feature_noise: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Every width divided by eight, for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            visual_stem: 2,
            visual_channels: [4, 8, 16],
            audio_channels: [2, 4, 8, 12],
            gru_hidden: 16,
            ..Self::default()
        }
    }

    /// Every width divided by `factor` (at least 1 channel).
    pub fn scaled(factor: usize) -> Self {
        let d = |c: usize| (c / factor).max(1);
        let base = Self::default();
        Self {
            embed_dim: d(base.embed_dim),
            visual_stem: d(base.visual_stem),
            visual_channels: base.visual_channels.map(d),
            audio_channels: base.audio_channels.map(d),
            gru_hidden: d(base.gru_hidden),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_pair != (3, 5) {
            return Err(Error::Config(format!(
                "kernel_pair must be (3, 5), got {:?}",
                self.kernel_pair
            )));
        }
        let widths = [self.embed_dim, self.visual_stem, self.gru_hidden, self.se_reduction, self.frame_size];
        if widths.iter().chain(&self.visual_channels).chain(&self.audio_channels).any(|&w| w == 0)
            || self.audio_blocks.iter().any(|&b| b == 0)
        {
            return Err(Error::Config("all widths and block counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.feature_noise) {
            return Err(Error::Config(format!("feature_noise {} must lie in [0, 1]", self.feature_noise)));
        }
        if self.frame_size % 16 != 0 {
            return Err(Error::Config(format!(
                "frame_size {} must be divisible by 16 (four stride-2 stages)",
                self.frame_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: usize, body: usize, audio: usize) -> ClipSample {
        ClipSample {
            face_frames: FrameStack::zeros(t, 1, 4),
            body_frames: FrameStack::zeros(body, 1, 4),
            waveform: vec![0.0; audio],
            labels: vec![0; t],
            track_id: "t".into(),
            fps: 25.0,
        }
    }

    #[test]
    fn one_second_clip_is_accepted() {
        let s = sample(25, 25, 16_000);
        assert_eq!(validate_sample(s.clone()).unwrap(), s);
    }

    #[test]
    fn body_length_mismatch_is_rejected() {
        assert!(matches!(validate_sample(sample(25, 24, 16_000)), Err(Error::MismatchedLengths(_))));
    }

    #[test]
    fn silent_track_is_legal() {
        let s = sample(25, 25, 16_000);
        assert!(s.labels.iter().all(|&l| l == 0));
        assert!(validate_sample(s).is_ok());
    }

    #[test]
    fn audio_tolerance_is_one_hop() {
        assert!(validate_sample(sample(25, 25, 16_000 + 160)).is_ok());
        assert!(matches!(
            validate_sample(sample(25, 25, 16_000 + 161)),
            Err(Error::AudioDurationMismatch { .. })
        ));
    }

    #[test]
    fn pixels_outside_unit_range_are_rejected() {
        let mut s = sample(2, 2, 1280);
        s.body_frames.frame_mut(1)[3] = 1.5;
        assert!(matches!(validate_sample(s), Err(Error::ValueRange(_))));
    }

    #[test]
    fn validation_is_idempotent() {
        let s = sample(10, 10, 6400);
        let once = validate_sample(s).unwrap();
        let twice = validate_sample(once.clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn kernel_pair_is_fixed() {
        let cfg = ModelConfig {
            kernel_pair: (3, 7),
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
