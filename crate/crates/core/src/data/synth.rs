//! Synthetic speaker tracks with labels that are recoverable from the
//! rendered pixels and audio.
//!
//! Each synthetic video holds `entities_per_video` people who share one
//! audio track. A speaker-turn schedule (runs of at least `min_run` frames)
//! decides who speaks: nobody or exactly one entity. While anybody speaks
//! the audio carries a pure tone, so audio alone says *that* someone speaks
//! but not *who*. The speaking entity is visible through a moving bright
//! patch: an opening mouth in the face crop and a gesturing hand in the body
//! crop. Non-speaking frames show the same patches at rest. Channels that do
//! not carry the signal follow an independent decoy schedule, so they are
//! statistically independent of the labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{derive_body_box, AnnotationRecord, SpeakLabel, Track};
use super::dataset::{quantize_pixel, quantize_sample, Dataset, DatasetMeta, TrackData};
use crate::domain::{ClipSample, FrameStack, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalChannel {
    Face,
    Body,
    Both,
}

impl SignalChannel {
    pub fn in_face(self) -> bool {
        matches!(self, SignalChannel::Face | SignalChannel::Both)
    }

    pub fn in_body(self) -> bool {
        matches!(self, SignalChannel::Body | SignalChannel::Both)
    }
}

impl std::str::FromStr for SignalChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(SignalChannel::Face),
            "body" => Ok(SignalChannel::Body),
            "both" => Ok(SignalChannel::Both),
            other => Err(Error::Config(format!("unknown signal channel {other:?} (face, body, both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_tracks: usize,
    pub frames_per_track: usize,
    pub signal_channel: SignalChannel,
    pub tone_hz: f64,
    pub seed: u64,
    pub fps: f64,
    pub frame_size: usize,
    pub entities_per_video: usize,
    /// Minimum length of a speaker turn, in frames.
    pub min_run: usize,
    /// Probability that a frame's visual cue (and, per video, the audio tone)
    /// is flipped relative to the label.
    pub cue_noise: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_tracks: 20,
            frames_per_track: 25,
            signal_channel: SignalChannel::Both,
            tone_hz: 440.0,
            seed: 0,
            fps: 25.0,
            frame_size: crate::domain::FRAME_SIZE,
            entities_per_video: 2,
            min_run: 5,
            cue_noise: 0.0,
            pixel_noise: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_tracks == 0 || self.frames_per_track == 0 {
            return bad("num_tracks and frames_per_track must be positive".into());
        }
        if self.entities_per_video == 0 || self.min_run == 0 {
            return bad("entities_per_video and min_run must be positive".into());
        }
        if self.frame_size < 16 {
            return bad(format!("frame_size {} is too small", self.frame_size));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps {}", self.fps));
        }
        if !(self.tone_hz > 0.0 && self.tone_hz < SAMPLE_RATE as f64 / 2.0) {
            return bad(format!("tone_hz {} must be in (0, 8000)", self.tone_hz));
        }
        if !(0.0..=1.0).contains(&self.cue_noise) || !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            return bad("cue_noise must lie in [0, 1] and pixel_noise must be >= 0".into());
        }
        // The model needs at least one feature frame per video frame.
        if (SAMPLE_RATE as f64 / self.fps) * (self.frames_per_track as f64) < 400.0 {
            return bad("tracks shorter than 25 ms of audio".into());
        }
        Ok(())
    }

    /// Notional source frame size used for the annotation boxes.
    pub const FRAME_WIDTH: f64 = 640.0;
    pub const FRAME_HEIGHT: f64 = 360.0;
}

/// Speaker-turn schedule: 0 = nobody, `k` = entity `k - 1` speaks.
fn turn_schedule(rng: &mut impl Rng, frames: usize, entities: usize, min_run: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(frames);
    let mut state = rng.gen_range(0..=entities);
    while out.len() < frames {
        let run = rng.gen_range(min_run..=3 * min_run);
        out.extend(std::iter::repeat(state).take(run));
        let next = rng.gen_range(0..entities);
        state = if next >= state { next + 1 } else { next };
    }
    out.truncate(frames);
    out
}

/// Per-entity appearance, fixed for a track.
struct Look {
    face_level: f32,
    dx: f64,
    dy: f64,
    phase: f64,
    period: f64,
}

impl Look {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            face_level: rng.gen_range(0.40..0.55),
            dx: rng.gen_range(-3.0..3.0),
            dy: rng.gen_range(-3.0..3.0),
            phase: rng.gen_range(0.0..2.0 * PI),
            period: rng.gen_range(3.0..6.0),
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(size: usize, level: f32) -> Self {
        Self {
            size,
            px: vec![level; size * size],
        }
    }

    fn rect(&mut self, cx: f64, cy: f64, w: f64, h: f64, level: f32) {
        let s = self.size as f64;
        let x0 = (cx - w / 2.0).round().clamp(0.0, s) as usize;
        let x1 = (cx + w / 2.0).round().clamp(0.0, s) as usize;
        let y0 = (cy - h / 2.0).round().clamp(0.0, s) as usize;
        let y1 = (cy + h / 2.0).round().clamp(0.0, s) as usize;
        for y in y0..y1 {
            self.px[y * self.size + x0..y * self.size + x1].fill(level);
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, level: f32) {
        for y in 0..self.size {
            for x in 0..self.size {
                let u = (x as f64 + 0.5 - cx) / rx;
                let v = (y as f64 + 0.5 - cy) / ry;
                if u * u + v * v <= 1.0 {
                    self.px[y * self.size + x] = level;
                }
            }
        }
    }
}

fn render_face(size: usize, look: &Look, active: bool, t: usize) -> Vec<f32> {
    let s = size as f64;
    let (cx, cy) = (0.5 * s + look.dx, 0.5 * s + look.dy);
    let mut c = Canvas::new(size, 0.15);
    c.ellipse(cx, cy, 0.32 * s, 0.40 * s, look.face_level);
    c.rect(cx - 0.12 * s, cy - 0.10 * s, 0.08 * s, 0.05 * s, 0.05);
    c.rect(cx + 0.12 * s, cy - 0.10 * s, 0.08 * s, 0.05 * s, 0.05);
    let mouth_y = cy + 0.18 * s;
    if active {
        let w = (2.0 * PI * t as f64 / look.period + look.phase).sin();
        let h = 0.12 * s + 0.06 * s * w;
        c.rect(cx, mouth_y + 0.02 * s * w, 0.26 * s, h, 0.95);
    } else {
        c.rect(cx, mouth_y, 0.26 * s, 0.025 * s, 0.08);
    }
    c.px
}

fn render_body(size: usize, look: &Look, active: bool, t: usize) -> Vec<f32> {
    let s = size as f64;
    let (ox, oy) = (look.dx, look.dy);
    let mut c = Canvas::new(size, 0.15);
    c.rect(0.5 * s + ox, 0.65 * s + oy, 0.6 * s, 0.7 * s, 0.35);
    c.ellipse(0.5 * s + ox, 0.17 * s + oy, 0.13 * s, 0.15 * s, look.face_level);
    if active {
        let a = 2.0 * PI * t as f64 / look.period + look.phase;
        let hx = 0.5 * s + 0.25 * s * a.sin() + ox;
        let hy = 0.55 * s + 0.12 * s * a.cos() + oy;
        c.rect(hx, hy, 0.16 * s, 0.16 * s, 0.95);
    } else {
        c.rect(0.3 * s + ox, 0.88 * s + oy, 0.14 * s, 0.14 * s, 0.55);
    }
    c.px
}

fn add_noise(px: &mut [f32], noise: &Normal<f64>, sigma: f64, rng: &mut impl Rng) {
    for v in px.iter_mut() {
        let n = if sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
        *v = quantize_pixel(*v + n);
    }
}

fn flip_some(cues: &[bool], p: f64, rng: &mut impl Rng) -> Vec<bool> {
    cues.iter().map(|&c| if rng.gen::<f64>() < p { !c } else { c }).collect()
}

/// Shared audio of one video: a tone while `speech[t]` holds, plus a weak
/// noise floor.
fn render_audio(speech: &[bool], spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<f32> {
    let per_frame = SAMPLE_RATE as f64 / spec.fps;
    let n = (speech.len() as f64 * per_frame).round() as usize;
    let floor = Normal::new(0.0, 0.01).expect("valid normal");
    (0..n)
        .map(|i| {
            let frame = ((i as f64 / per_frame) as usize).min(speech.len() - 1);
            let tone = if speech[frame] {
                0.3 * (2.0 * PI * spec.tone_hz * i as f64 / SAMPLE_RATE as f64).sin()
            } else {
                0.0
            };
            quantize_sample((tone + floor.sample(rng)) as f32)
        })
        .collect()
}

/// Generates `spec.num_tracks` tracks. Identical specs give identical
/// datasets; pixels and samples are already quantised to 8 and 16 bits, so
/// a saved and reloaded dataset compares equal.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pixel = Normal::new(0.0, spec.pixel_noise.max(1e-12)).expect("valid normal");
    let t_len = spec.frames_per_track;
    let size = spec.frame_size;
    let videos = spec.num_tracks.div_ceil(spec.entities_per_video);
    let mut tracks = Vec::with_capacity(spec.num_tracks);
    for v in 0..videos {
        let entities = spec.entities_per_video.min(spec.num_tracks - v * spec.entities_per_video);
        let video_id = format!("synth_v{v:03}");
        let turns = turn_schedule(&mut rng, t_len, entities, spec.min_run);
        let decoy = turn_schedule(&mut rng, t_len, entities, spec.min_run);
        let speech: Vec<bool> = turns.iter().map(|&s| s != 0).collect();
        let heard = flip_some(&speech, spec.cue_noise, &mut rng);
        let waveform = render_audio(&heard, spec, &mut rng);
        for e in 0..entities {
            let labels: Vec<u8> = turns.iter().map(|&s| u8::from(s == e + 1)).collect();
            let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let seen = flip_some(&truth, spec.cue_noise, &mut rng);
            let decoy_cue: Vec<bool> = decoy.iter().map(|&s| s == e + 1).collect();
            let look = Look::sample(&mut rng);
            let mut face = FrameStack::zeros(t_len, 1, size);
            let mut body = FrameStack::zeros(t_len, 1, size);
            for t in 0..t_len {
                let face_cue = if spec.signal_channel.in_face() { seen[t] } else { decoy_cue[t] };
                let body_cue = if spec.signal_channel.in_body() { seen[t] } else { decoy_cue[t] };
                let mut f = render_face(size, &look, face_cue, t);
                let mut b = render_body(size, &look, body_cue, t);
                add_noise(&mut f, &pixel, spec.pixel_noise, &mut rng);
                add_noise(&mut b, &pixel, spec.pixel_noise, &mut rng);
                face.frame_mut(t).copy_from_slice(&f);
                body.frame_mut(t).copy_from_slice(&b);
            }
            let entity_id = format!("e{e}");
            // Face width between 40 and 180 source pixels so every size
            // bucket occurs.
            let fw = rng.gen_range(40.0..180.0) / SyntheticSpec::FRAME_WIDTH;
            let fh = fw * SyntheticSpec::FRAME_WIDTH / SyntheticSpec::FRAME_HEIGHT * 1.2;
            let slot = (e as f64 + 0.5) / entities as f64;
            let x1 = (slot - fw / 2.0).clamp(0.0, 1.0 - fw);
            let y1 = rng.gen_range(0.05..(0.95 - fh).max(0.06));
            let round6 = |b: [f64; 4]| b.map(|v| (v * 1e6).round() / 1e6);
            let face_box = round6([x1, y1, x1 + fw, (y1 + fh).min(1.0)]);
            let body_box = round6(derive_body_box(&face_box, 1.0, 1.0)?);
            let records = labels
                .iter()
                .enumerate()
                .map(|(t, &l)| AnnotationRecord {
                    video_id: video_id.clone(),
                    frame_timestamp: (t as f64 / spec.fps * 1000.0).round() / 1000.0,
                    face_box,
                    body_box: Some(body_box),
                    label: SpeakLabel::from_bit(l),
                    entity_id: entity_id.clone(),
                })
                .collect();
            let annotation = Track {
                video_id: video_id.clone(),
                entity_id,
                records,
            };
            let clip = ClipSample {
                face_frames: face,
                body_frames: body,
                waveform: waveform.clone(),
                labels,
                track_id: annotation.id(),
                fps: spec.fps,
            };
            clip.validate()?;
            tracks.push(TrackData { annotation, clip });
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            fps: spec.fps,
            frame_size: size,
            frame_width: SyntheticSpec::FRAME_WIDTH,
            frame_height: SyntheticSpec::FRAME_HEIGHT,
            source: serde_json::to_value(spec)?,
        },
        tracks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{load_dataset, save_dataset};

    fn small(signal: SignalChannel) -> SyntheticSpec {
        SyntheticSpec {
            num_tracks: 5,
            frames_per_track: 30,
            signal_channel: signal,
            frame_size: 32,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    /// Mean brightness of the mouth region of a face crop.
    fn mouth_energy(frame: &[f32], size: usize) -> f32 {
        let s = size as f64;
        let (y0, y1) = ((0.6 * s) as usize, (0.85 * s) as usize);
        let (x0, x1) = ((0.3 * s) as usize, (0.7 * s) as usize);
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += frame[y * size + x];
            }
        }
        sum / ((y1 - y0) * (x1 - x0)) as f32
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic(&small(SignalChannel::Both)).unwrap();
        let b = generate_synthetic(&small(SignalChannel::Both)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec {
            seed: 12,
            ..small(SignalChannel::Both)
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_grouping() {
        let ds = generate_synthetic(&small(SignalChannel::Both)).unwrap();
        assert_eq!(ds.len(), 5);
        for t in &ds.tracks {
            assert_eq!(t.clip.num_frames(), 30);
            assert_eq!(t.annotation.len(), 30);
            assert_eq!(t.annotation.labels(), t.clip.labels);
            t.clip.validate().unwrap();
        }
        // Entities of one video share their audio and never speak together.
        let (a, b) = (&ds.tracks[0], &ds.tracks[1]);
        assert_eq!(a.annotation.video_id, b.annotation.video_id);
        assert_eq!(a.clip.waveform, b.clip.waveform);
        assert!(a.clip.labels.iter().zip(&b.clip.labels).all(|(x, y)| x + y <= 1));
    }

    #[test]
    fn face_signal_is_readable_from_pixels() {
        let ds = generate_synthetic(&SyntheticSpec {
            pixel_noise: 0.0,
            ..small(SignalChannel::Face)
        })
        .unwrap();
        for t in &ds.tracks {
            let energy = |want: u8| {
                t.clip
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == want)
                    .map(|(i, _)| mouth_energy(t.clip.face_frames.frame(i), 32))
                    .collect::<Vec<f32>>()
            };
            let quiet = energy(0).into_iter().fold(f32::MIN, f32::max);
            let loud = energy(1).into_iter().fold(f32::MAX, f32::min);
            assert!(loud > quiet + 0.05, "{loud} vs {quiet}");
        }
    }

    #[test]
    fn body_signal_leaves_faces_uninformative() {
        let spec = SyntheticSpec {
            num_tracks: 40,
            pixel_noise: 0.0,
            ..small(SignalChannel::Body)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let (mut agree, mut total) = (0usize, 0usize);
        for t in &ds.tracks {
            let rest = (0..30)
                .map(|i| mouth_energy(t.clip.face_frames.frame(i), 32))
                .fold(f32::MAX, f32::min);
            for (i, &l) in t.clip.labels.iter().enumerate() {
                let open = mouth_energy(t.clip.face_frames.frame(i), 32) > rest + 0.05;
                agree += usize::from(open == (l == 1));
                total += 1;
            }
        }
        let rate = agree as f64 / total as f64;
        // Independent schedules agree about as often as chance predicts,
        // far from the perfect agreement of the face signal.
        assert!(rate < 0.75, "{rate}");
    }

    #[test]
    fn runs_respect_the_minimum_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = turn_schedule(&mut rng, 500, 2, 10);
        let mut run = 1;
        let mut runs = Vec::new();
        for w in s.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                runs.push(run);
                run = 1;
            }
        }
        assert!(runs.iter().all(|&r| r >= 10));
    }

    #[test]
    fn tone_only_while_someone_speaks() {
        let ds = generate_synthetic(&small(SignalChannel::Both)).unwrap();
        let t = &ds.tracks[0];
        let other = &ds.tracks[1];
        let per = 640;
        for i in 0..30 {
            let seg = &t.clip.waveform[i * per..(i + 1) * per];
            let rms = (seg.iter().map(|v| v * v).sum::<f32>() / per as f32).sqrt();
            let speaking = t.clip.labels[i] == 1 || other.clip.labels[i] == 1;
            assert_eq!(rms > 0.1, speaking);
        }
    }

    #[test]
    fn saved_dataset_reloads_equal() {
        let ds = generate_synthetic(&small(SignalChannel::Body)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.tracks.len(), ds.tracks.len());
        for (a, b) in back.tracks.iter().zip(&ds.tracks) {
            assert_eq!(a, b);
        }
    }
}
