//! The full active speaker detector: visual encoder (face + body), audio
//! encoder, main audio-visual head and auxiliary visual head.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio_encoder::{AudioEncoder, AudioEncoderConfig};
use crate::classifier::{ClassifierConfig, TemporalClassifier};
use crate::domain::{ClipSample, Modality, ModelConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mfcc::{align_audio_to_video, compute_mfcc, WINDOW_SAMPLES};
use crate::nn::{sigmoid, Mode, ParamStore};
use crate::visual::VisualEncoder;

/// A batch of equal-length clips as tensors.
pub struct Batch {
    /// `(N, T, C, H, W)`
    pub face: Tensor,
    /// `(N, T, C, H, W)`
    pub body: Tensor,
    /// `(N, 4T, 13)`
    pub mfcc: Tensor,
}

impl Batch {
    /// Stacks equal-length clips and computes their aligned MFCCs. Returns
    /// the batch and the `(N, T)` label tensor.
    pub fn from_clips(clips: &[ClipSample], dtype: DType) -> Result<(Batch, Tensor)> {
        let first = clips.first().ok_or(Error::EmptyInput)?;
        let t = first.num_frames();
        let (c, s) = (first.face_frames.channels(), first.face_frames.size());
        let n = clips.len();
        let mut face = Vec::with_capacity(n * t * c * s * s);
        let mut body = Vec::with_capacity(n * t * c * s * s);
        let mut mfcc = Vec::with_capacity(n * 4 * t * 13);
        let mut labels = Vec::with_capacity(n * t);
        for clip in clips {
            clip.validate()?;
            if clip.num_frames() != t || clip.face_frames.channels() != c || clip.face_frames.size() != s {
                return Err(Error::ShapeMismatch(format!(
                    "clip {} has {} frames of {}x{}x{}, batch expects {t} of {c}x{s}x{s}",
                    clip.track_id,
                    clip.num_frames(),
                    clip.face_frames.channels(),
                    clip.face_frames.size(),
                    clip.face_frames.size()
                )));
            }
            face.extend_from_slice(clip.face_frames.as_slice());
            body.extend_from_slice(clip.body_frames.as_slice());
            let mut wave = clip.waveform.clone();
            if wave.len() < WINDOW_SAMPLES {
                wave.resize(WINDOW_SAMPLES, 0.0);
            }
            let m = align_audio_to_video(&compute_mfcc(&wave, SAMPLE_RATE)?, t, clip.fps)?;
            mfcc.extend(m.flat());
            labels.extend(clip.labels.iter().map(|&l| l as f32));
        }
        let dev = candle_core::Device::Cpu;
        let batch = Batch {
            face: Tensor::from_vec(face, (n, t, c, s, s), &dev)?.to_dtype(dtype)?,
            body: Tensor::from_vec(body, (n, t, c, s, s), &dev)?.to_dtype(dtype)?,
            mfcc: Tensor::from_vec(mfcc, (n, 4 * t, 13), &dev)?.to_dtype(dtype)?,
        };
        let labels = Tensor::from_vec(labels, (n, t), &dev)?.to_dtype(dtype)?;
        Ok((batch, labels))
    }
}

/// Logits of both heads, `(N, T)` each.
pub struct Logits {
    pub av: Tensor,
    pub visual: Tensor,
}

pub struct AsdModel {
    config: ModelConfig,
    store: ParamStore,
    visual: VisualEncoder,
    audio: Option<AudioEncoder>,
    main_head: TemporalClassifier,
    aux_head: TemporalClassifier,
}

impl AsdModel {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, config.seed);
        let mut root = store.root();
        let visual = VisualEncoder::new(&mut root.pp("visual"), &config)?;
        let audio = if config.use_audio {
            Some(AudioEncoder::new(&mut root.pp("audio"), &AudioEncoderConfig::from(&config))?)
        } else {
            None
        };
        let main_cfg = ClassifierConfig {
            input_dim: config.embed_dim,
            gru_hidden: config.gru_hidden,
            temporal: config.temporal,
        };
        let aux_cfg = ClassifierConfig {
            temporal: config.aux_temporal,
            ..main_cfg
        };
        let main_accepts = if config.use_audio { Modality::Fused } else { Modality::Visual };
        let main_head = TemporalClassifier::new(&mut root.pp("classifier"), &main_cfg, main_accepts)?;
        let aux_head = TemporalClassifier::new(&mut root.pp("visual_head"), &aux_cfg, Modality::Visual)?;
        Ok(Self {
            config,
            store,
            visual,
            audio,
            main_head,
            aux_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn visual_encoder(&self) -> &VisualEncoder {
        &self.visual
    }

    pub fn audio_encoder(&self) -> Option<&AudioEncoder> {
        self.audio.as_ref()
    }

    pub fn main_head(&self) -> &TemporalClassifier {
        &self.main_head
    }

    pub fn aux_head(&self) -> &TemporalClassifier {
        &self.aux_head
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Parameter count per top-level component (`visual`, `audio`,
    /// `classifier`, `visual_head`).
    pub fn param_breakdown(&self) -> Vec<(&'static str, usize)> {
        ["visual", "audio", "classifier", "visual_head"]
            .into_iter()
            .map(|k| (k, self.store.num_params_under(&format!("{k}."))))
            .collect()
    }

    /// Visual embeddings `(N, T, D)`.
    pub fn encode_visual(&self, batch: &Batch, mode: Mode) -> Result<Tensor> {
        let body = if self.visual.has_body() { Some(&batch.body) } else { None };
        self.visual.forward_batch(&batch.face, body, mode)
    }

    /// Row indices into the flattened `(N*T, D)` embeddings that replace a
    /// `feature_noise` fraction of frames with another frame of the same
    /// clip. The pattern is seeded by the model seed and the clip contents,
    /// so it is identical in training and evaluation.
    fn feature_noise_index(&self, batch: &Batch) -> Result<Option<Tensor>> {
        let p = self.config.feature_noise;
        if p <= 0.0 {
            return Ok(None);
        }
        let (n, t) = (batch.face.dim(0)?, batch.face.dim(1)?);
        let mut idx = Vec::with_capacity(n * t);
        for b in 0..n {
            let mut h = Sha256::new();
            h.update(self.config.seed.to_le_bytes());
            for part in [batch.mfcc.get(b)?, batch.face.get(b)?.get(0)?] {
                for x in part.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    h.update(x.to_le_bytes());
                }
            }
            let digest = h.finalize();
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
            for i in 0..t {
                let mut j = i;
                if t > 1 && rng.gen::<f64>() < p {
                    j = rng.gen_range(0..t - 1);
                    if j >= i {
                        j += 1;
                    }
                }
                idx.push((b * t + j) as u32);
            }
        }
        Ok(Some(Tensor::from_vec(idx, n * t, batch.face.device())?))
    }

    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<Logits> {
        let noise = self.feature_noise_index(batch)?;
        let perturb = |x: Tensor| -> Result<Tensor> {
            match &noise {
                Some(idx) => {
                    let (n, t, d) = x.dims3()?;
                    Ok(x.reshape((n * t, d))?.index_select(idx, 0)?.reshape((n, t, d))?)
                }
                None => Ok(x),
            }
        };
        let v = perturb(self.encode_visual(batch, mode)?)?;
        let fused = match &self.audio {
            Some(audio) => {
                let a = perturb(audio.forward_batch(&batch.mfcc, mode)?)?;
                if a.dims() != v.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "audio embedding {:?} vs visual {:?}",
                        a.dims(),
                        v.dims()
                    )));
                }
                (&v + a)?
            }
            None => v.clone(),
        };
        Ok(Logits {
            av: self.main_head.forward_batch(&fused)?,
            visual: self.aux_head.forward_batch(&v)?,
        })
    }

    /// Per-frame speaking probabilities of the main head for a whole clip,
    /// in evaluation mode.
    pub fn predict_clip(&self, clip: &ClipSample) -> Result<Vec<f64>> {
        let (batch, _) = Batch::from_clips(std::slice::from_ref(clip), self.dtype())?;
        let logits = self.forward(&batch, Mode::Eval)?;
        let p = sigmoid(&logits.av)?.squeeze(0)?.to_dtype(DType::F64)?;
        Ok(p.to_vec1::<f64>()?)
    }
}
