//! On-disk track datasets.
//!
//! ```text
//! <root>/annotations.csv
//! <root>/dataset.json
//! <root>/tracks/<video>__<entity>/face/000000.png ...
//! <root>/tracks/<video>__<entity>/body/000000.png ...
//! <root>/tracks/<video>__<entity>/audio.wav
//! <root>/tracks/<video>__<entity>/labels.json
//! ```
//!
//! Crops are 8-bit grayscale PNGs, audio is 16 kHz mono 16-bit PCM and the
//! labels file is a JSON array of 0/1.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::annotations::{load_annotations, write_annotations, Track};
use crate::domain::{ClipSample, FrameStack, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub fps: f64,
    pub frame_size: usize,
    /// Size of the source video frames the normalised boxes refer to.
    pub frame_width: f64,
    pub frame_height: f64,
    /// Free-form provenance, e.g. the generator settings.
    #[serde(default)]
    pub source: serde_json::Value,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            fps: 25.0,
            frame_size: crate::domain::FRAME_SIZE,
            frame_width: 640.0,
            frame_height: 360.0,
            source: serde_json::Value::Null,
        }
    }
}

/// One annotated track together with its assembled crops and audio.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackData {
    pub annotation: Track,
    pub clip: ClipSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub tracks: Vec<TrackData>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn clips(&self) -> Vec<ClipSample> {
        self.tracks.iter().map(|t| t.clip.clone()).collect()
    }

    pub fn annotations(&self) -> Vec<Track> {
        self.tracks.iter().map(|t| t.annotation.clone()).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.tracks.iter().map(|t| t.clip.num_frames()).sum()
    }
}

pub fn track_dir_name(video_id: &str, entity_id: &str) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect::<String>()
    };
    format!("{}__{}", clean(video_id), clean(entity_id))
}

pub fn quantize_pixel(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn quantize_sample(v: f32) -> f32 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() / 32767.0
}

fn write_stack(stack: &FrameStack, dir: &Path) -> Result<()> {
    if stack.channels() != 1 {
        return Err(Error::ShapeMismatch("only grayscale crops can be written".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = stack.size() as u32;
    for i in 0..stack.len() {
        let f = stack.frame(i);
        let img = GrayImage::from_fn(s, s, |x, y| {
            Luma([(f[(y * s + x) as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(dir.join(format!("{i:06}.png")))?;
    }
    Ok(())
}

fn read_stack(dir: &Path, frames: usize, size: usize) -> Result<FrameStack> {
    let mut data = Vec::with_capacity(frames * size * size);
    for i in 0..frames {
        let path = dir.join(format!("{i:06}.png"));
        let img = image::open(&path)?.into_luma8();
        if img.width() as usize != size || img.height() as usize != size {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} crop, expected {size}x{size}",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        data.extend(img.pixels().map(|p| p.0[0] as f32 / 255.0));
    }
    FrameStack::new(1, size, data)
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Mono samples in `[-1, 1]` and the file's sample rate. Multi-channel files
/// are averaged to mono.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            // Symmetric full scale, so that 16-bit writes round-trip exactly.
            let scale = ((1i64 << (spec.bits_per_sample - 1)) - 1) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
    };
    let ch = spec.channels.max(1) as usize;
    let mono = raw.chunks(ch).map(|c| c.iter().sum::<f32>() / ch as f32).collect();
    Ok((mono, spec.sample_rate))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the dataset; the output depends only on its contents.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ann_path = root.join("annotations.csv");
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    write_annotations(&ds.annotations(), std::io::BufWriter::new(file))?;
    write_json(&root.join("dataset.json"), &ds.meta)?;
    for t in &ds.tracks {
        let dir = root
            .join("tracks")
            .join(track_dir_name(&t.annotation.video_id, &t.annotation.entity_id));
        write_stack(&t.clip.face_frames, &dir.join("face"))?;
        write_stack(&t.clip.body_frames, &dir.join("body"))?;
        write_wav(&dir.join("audio.wav"), &t.clip.waveform)?;
        write_json(&dir.join("labels.json"), &t.clip.labels)?;
    }
    Ok(())
}

pub fn dataset_paths(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("annotations.csv"), root.join("dataset.json"))
}

/// Loads a dataset written by [`save_dataset`] (or laid out the same way).
/// `labels.json` must agree with the annotation labels.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let (ann_path, meta_path) = dataset_paths(root);
    let meta: DatasetMeta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text)?
    } else {
        DatasetMeta::default()
    };
    let annotations = load_annotations(&ann_path)?;
    let mut tracks = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let dir = root.join("tracks").join(track_dir_name(&ann.video_id, &ann.entity_id));
        let n = ann.len();
        let face = read_stack(&dir.join("face"), n, meta.frame_size)?;
        let body = read_stack(&dir.join("body"), n, meta.frame_size)?;
        let (waveform, sr) = read_wav(&dir.join("audio.wav"))?;
        if sr != SAMPLE_RATE {
            return Err(Error::BadSampleRate(sr));
        }
        let labels_path = dir.join("labels.json");
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let labels: Vec<u8> = serde_json::from_str(&text)?;
        if labels != ann.labels() {
            return Err(Error::MismatchedLengths(format!(
                "{}: labels.json disagrees with annotations.csv",
                labels_path.display()
            )));
        }
        let clip = ClipSample {
            face_frames: face,
            body_frames: body,
            waveform,
            labels,
            track_id: ann.id(),
            fps: meta.fps,
        };
        clip.validate()?;
        tracks.push(TrackData { annotation: ann, clip });
    }
    Ok(Dataset { meta, tracks })
}

/// Random-access frames and audio of source videos, the boundary to a
/// video decoder. Boxes passed in are normalised.
pub trait MediaSource {
    /// Grayscale frame nearest to `timestamp`, pixel values in `[0, 1]`.
    fn frame(&self, video_id: &str, timestamp: f64) -> Result<GrayImage>;
    /// The video's mono audio at 16 kHz.
    fn audio(&self, video_id: &str) -> Result<Vec<f32>>;
}

/// Frames stored as `<root>/frames/<video>/<millis>.png` (timestamp in
/// integer milliseconds) and audio as `<root>/audio/<video>.wav`.
pub struct FrameDirectorySource {
    pub root: PathBuf,
}

impl MediaSource for FrameDirectorySource {
    fn frame(&self, video_id: &str, timestamp: f64) -> Result<GrayImage> {
        let key = super::annotations::timestamp_key(timestamp);
        let path = self.root.join("frames").join(video_id).join(format!("{key}.png"));
        Ok(image::open(&path)?.into_luma8())
    }

    fn audio(&self, video_id: &str) -> Result<Vec<f32>> {
        let (samples, sr) = read_wav(&self.root.join("audio").join(format!("{video_id}.wav")))?;
        if sr != SAMPLE_RATE {
            return Err(Error::BadSampleRate(sr));
        }
        Ok(samples)
    }
}

/// Crops a normalised box out of a frame and resizes it to `size x size`.
pub fn crop_resize(img: &GrayImage, b: &super::BBox, size: usize) -> Vec<f32> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = (b[0] * w).floor().clamp(0.0, w - 1.0) as u32;
    let y = (b[1] * h).floor().clamp(0.0, h - 1.0) as u32;
    let cw = ((b[2] * w).ceil() as u32).clamp(x + 1, img.width()) - x;
    let ch = ((b[3] * h).ceil() as u32).clamp(y + 1, img.height()) - y;
    let crop = image::imageops::crop_imm(img, x, y, cw, ch).to_image();
    let resized = image::imageops::resize(&crop, size as u32, size as u32, image::imageops::FilterType::Triangle);
    resized.pixels().map(|p| p.0[0] as f32 / 255.0).collect()
}

/// Builds the clip of an annotated track from raw frames: face crops from
/// the face boxes, body crops from the body boxes (or boxes derived from
/// the face), and the audio span covering the track.
pub fn assemble_track(source: &dyn MediaSource, track: &Track, fps: f64, size: usize) -> Result<ClipSample> {
    let first = track.records.first().ok_or(Error::EmptyTrack)?;
    let mut face = Vec::with_capacity(track.len());
    let mut body = Vec::with_capacity(track.len());
    for r in &track.records {
        let img = source.frame(&r.video_id, r.frame_timestamp)?;
        let body_box = match r.body_box {
            Some(b) => b,
            None => super::annotations::derive_body_box(&r.face_box, 1.0, 1.0)?,
        };
        face.push(crop_resize(&img, &r.face_box, size));
        body.push(crop_resize(&img, &body_box, size));
    }
    let audio = source.audio(&track.video_id)?;
    let start = (first.frame_timestamp * SAMPLE_RATE as f64).round() as usize;
    let len = (track.len() as f64 / fps * SAMPLE_RATE as f64).round() as usize;
    let end = (start + len).min(audio.len());
    let mut waveform = audio[start.min(end)..end].to_vec();
    waveform.resize(len, 0.0);
    let clip = ClipSample {
        face_frames: FrameStack::from_frames(size, &face)?,
        body_frames: FrameStack::from_frames(size, &body)?,
        waveform,
        labels: track.labels(),
        track_id: track.id(),
        fps,
    };
    clip.validate()?;
    Ok(clip)
}
