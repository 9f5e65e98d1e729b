//! Clip windows, geometric augmentation and negative audio mixing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClipSample, FrameStack, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    /// Rotation is drawn uniformly from `[-rotate_degrees, rotate_degrees]`.
    pub rotate_degrees: f64,
    /// Side of the square crop as a fraction of the frame side.
    pub crop_scale: (f64, f64),
    pub negative_audio_prob: f64,
    pub snr_db_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_degrees: 15.0,
            crop_scale: (0.85, 1.0),
            negative_audio_prob: 0.5,
            snr_db_range: (-5.0, 5.0),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No geometric change and no audio mixing.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_degrees: 0.0,
            crop_scale: (1.0, 1.0),
            negative_audio_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_prob) || !prob(self.negative_audio_prob) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        if !(self.rotate_degrees.is_finite() && self.rotate_degrees >= 0.0) {
            return Err(Error::Config(format!("rotate_degrees {}", self.rotate_degrees)));
        }
        let (a, b) = self.snr_db_range;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(Error::Config(format!("snr_db_range {:?}", self.snr_db_range)));
        }
        Ok(())
    }
}

/// Flip, rotation about the centre and square crop, resampled back to the
/// original size. One transform is shared by every face and body frame of
/// a clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTransform {
    pub flip: bool,
    pub angle_deg: f64,
    pub scale: f64,
    /// Position of the crop inside the free margin, each in `[0, 1]`.
    pub offset: (f64, f64),
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle_deg: 0.0,
            scale: 1.0,
            offset: (0.0, 0.0),
        }
    }

    pub fn sample(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Self {
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        let angle_deg = if cfg.rotate_degrees > 0.0 {
            rng.gen_range(-cfg.rotate_degrees..=cfg.rotate_degrees)
        } else {
            0.0
        };
        let (lo, hi) = cfg.crop_scale;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let offset = (rng.gen::<f64>(), rng.gen::<f64>());
        Self {
            flip,
            angle_deg,
            scale,
            offset,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.angle_deg == 0.0 && self.scale == 1.0
    }

    /// Transforms one `channels x size x size` frame.
    pub fn apply_frame(&self, src: &[f32], channels: usize, size: usize) -> Vec<f32> {
        if self.is_identity() {
            return src.to_vec();
        }
        let s = size as f64;
        let side = self.scale * s;
        let (tx, ty) = (self.offset.0 * (s - side), self.offset.1 * (s - side));
        let (sin, cos) = (-self.angle_deg.to_radians()).sin_cos();
        let c = 0.5 * s;
        let plane = size * size;
        let mut out = vec![0.0f32; src.len()];
        for v in 0..size {
            for u in 0..size {
                let px = tx + (u as f64 + 0.5) * self.scale - c;
                let py = ty + (v as f64 + 0.5) * self.scale - c;
                let mut x = c + cos * px - sin * py;
                let y = c + sin * px + cos * py;
                if self.flip {
                    x = s - x;
                }
                for ch in 0..channels {
                    out[ch * plane + v * size + u] = bilinear(&src[ch * plane..(ch + 1) * plane], size, x - 0.5, y - 0.5);
                }
            }
        }
        out
    }

    pub fn apply(&self, stack: &FrameStack) -> FrameStack {
        let mut out = stack.clone();
        for i in 0..stack.len() {
            let f = self.apply_frame(stack.frame(i), stack.channels(), stack.size());
            out.frame_mut(i).copy_from_slice(&f);
        }
        out
    }
}

/// Bilinear sample at pixel coordinates `(x, y)`, zero outside the image.
fn bilinear(plane: &[f32], size: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= size as f64 || yi >= size as f64 {
            0.0
        } else {
            plane[yi as usize * size + xi as usize] as f64
        }
    };
    let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy;
    v.clamp(0.0, 1.0) as f32
}

/// Applies one sampled transform to every face and body frame; audio and
/// labels are untouched.
pub fn augment_visual(sample: &ClipSample, cfg: &AugmentationConfig, seed: u64) -> ClipSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = GeometricTransform::sample(cfg, &mut rng);
    ClipSample {
        face_frames: t.apply(&sample.face_frames),
        body_frames: t.apply(&sample.body_frames),
        ..sample.clone()
    }
}

fn audio_range(sample: &ClipSample, start: usize, len: usize) -> (usize, usize) {
    let per_frame = SAMPLE_RATE as f64 / sample.fps;
    let a0 = ((start as f64 * per_frame).round() as usize).min(sample.waveform.len());
    let a1 = (((start + len) as f64 * per_frame).round() as usize).min(sample.waveform.len());
    (a0, a1)
}

/// Frames `[start, start + len)` of a clip with the matching audio.
pub fn window_clip(sample: &ClipSample, start: usize, len: usize) -> ClipSample {
    let (a0, a1) = audio_range(sample, start, len);
    ClipSample {
        face_frames: sample.face_frames.window(start, len),
        body_frames: sample.body_frames.window(start, len),
        waveform: sample.waveform[a0..a1].to_vec(),
        labels: sample.labels[start..start + len].to_vec(),
        track_id: sample.track_id.clone(),
        fps: sample.fps,
    }
}

/// Seeded contiguous window of `min(clip_len, track length)` frames.
pub fn sample_clip(track: &ClipSample, clip_len: usize, seed: u64) -> Result<ClipSample> {
    let n = track.num_frames();
    if n == 0 {
        return Err(Error::EmptyTrack);
    }
    if clip_len == 0 {
        return Err(Error::Config("clip_len must be positive".into()));
    }
    let len = clip_len.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..=n - len);
    Ok(window_clip(track, start, len))
}

fn mean_power(x: impl Iterator<Item = f32>, n: usize) -> f64 {
    x.map(|v| (v as f64) * (v as f64)).sum::<f64>() / n.max(1) as f64
}

/// `waveform + g * donor` with `g` chosen so that the signal-to-donor power
/// ratio equals `snr_db`. The donor is tiled to the waveform length; an
/// infinite SNR or a silent donor leaves the waveform unchanged.
pub fn mix_at_snr(waveform: &[f32], donor: &[f32], snr_db: f64) -> Vec<f32> {
    if donor.is_empty() || waveform.is_empty() || snr_db == f64::INFINITY {
        return waveform.to_vec();
    }
    let n = waveform.len();
    let tiled = || donor.iter().copied().cycle().take(n);
    let p_donor = mean_power(tiled(), n);
    if p_donor == 0.0 {
        return waveform.to_vec();
    }
    let p_signal = mean_power(waveform.iter().copied(), n);
    let gain = (p_signal / (p_donor * 10f64.powf(snr_db / 10.0))).sqrt();
    waveform
        .iter()
        .zip(tiled())
        .map(|(&s, d)| (s as f64 + gain * d as f64) as f32)
        .collect()
}

/// With probability `negative_audio_prob`, adds the donor's audio at an SNR
/// drawn from `snr_db_range`. Labels are never changed.
pub fn negative_audio_mix(sample: &ClipSample, donor: &[f32], cfg: &AugmentationConfig, seed: u64) -> ClipSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen::<f64>() >= cfg.negative_audio_prob {
        return sample.clone();
    }
    let (lo, hi) = cfg.snr_db_range;
    let snr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    ClipSample {
        waveform: mix_at_snr(&sample.waveform, donor, snr),
        ..sample.clone()
    }
}
