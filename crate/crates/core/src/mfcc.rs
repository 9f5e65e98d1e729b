//! MFCC extraction (16 kHz, 25 ms window, 10 ms hop, 13 coefficients) and
//! alignment of the 100 Hz feature rate to the video frame rate.
//!
//! Chain: pre-emphasis 0.97, Hamming window, 512-point power spectrum,
//! 26 triangular mel filters over 0-8 kHz, natural log with floor 1e-10,
//! orthonormal DCT-II truncated to 13 coefficients.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio_encoder::AUDIO_FRAMES_PER_VIDEO_FRAME;
use crate::domain::SAMPLE_RATE;
use crate::error::{Error, Result};

pub const NUM_COEFFS: usize = 13;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const NFFT: usize = 512;
pub const NUM_FILTERS: usize = 26;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;

const DUMP_MAGIC: &[u8; 4] = b"MFCC";
const DUMP_VERSION: u32 = 1;

pub type MfccRow = [f32; NUM_COEFFS];

/// `N x 13` cepstral features at 100 frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    pub frames: Vec<MfccRow>,
}

impl MfccMatrix {
    pub const HOP_SECONDS: f64 = 0.010;
    pub const WINDOW_SECONDS: f64 = 0.025;
    pub const SAMPLE_RATE: u32 = SAMPLE_RATE;

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.frames.iter().flatten().copied().collect()
    }

    /// Binary dump: `"MFCC"`, u32 rows, u32 13, u32 version, then
    /// little-endian f32 values row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.frames.len() as u32).to_le_bytes())?;
        w.write_all(&(NUM_COEFFS as u32).to_le_bytes())?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        for v in self.frames.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: format!("MFCC dump: {msg}"),
        };
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[0..4] != DUMP_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let (rows, cols, version) = (word(4) as usize, word(8) as usize, word(12));
        if cols != NUM_COEFFS || version != DUMP_VERSION {
            return Err(bad(&format!("unsupported layout {cols} columns, version {version}")));
        }
        let mut payload = vec![0u8; rows * cols * 4];
        r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let frames = values
            .chunks_exact(NUM_COEFFS)
            .map(|c| c.try_into().unwrap())
            .collect();
        Ok(Self { frames })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Number of feature frames for a waveform of `num_samples` samples.
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < WINDOW_SAMPLES {
        0
    } else {
        (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank and DCT basis.
pub struct MfccExtractor {
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MfccExtractor {
    pub fn new() -> Self {
        let window = (0..WINDOW_SAMPLES)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WINDOW_SAMPLES - 1) as f64).cos())
            .collect();

        let bins = NFFT / 2 + 1;
        let high = SAMPLE_RATE as f64 / 2.0;
        let (mel_lo, mel_hi) = (hz_to_mel(0.0), hz_to_mel(high));
        let points: Vec<usize> = (0..NUM_FILTERS + 2)
            .map(|i| {
                let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (NUM_FILTERS + 1) as f64;
                ((NFFT + 1) as f64 * mel_to_hz(mel) / SAMPLE_RATE as f64).floor() as usize
            })
            .collect();
        let filters = (0..NUM_FILTERS)
            .map(|m| {
                let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
                let mut f = vec![0.0; bins];
                for (k, w) in f.iter_mut().enumerate().take(hi.min(bins - 1) + 1).skip(lo) {
                    if k < mid && mid > lo {
                        *w = (k - lo) as f64 / (mid - lo) as f64;
                    } else if k >= mid && hi > mid {
                        *w = (hi - k) as f64 / (hi - mid) as f64;
                    }
                }
                f
            })
            .collect();

        let n = NUM_FILTERS as f64;
        let dct = (0..NUM_COEFFS)
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                (0..NUM_FILTERS)
                    .map(|i| scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                    .collect()
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(NFFT);
        Self {
            window,
            filters,
            dct,
            fft,
        }
    }

    pub fn compute(&self, waveform: &[f32]) -> Result<MfccMatrix> {
        if waveform.len() < WINDOW_SAMPLES {
            return Err(Error::TooShort {
                samples: waveform.len(),
                required: WINDOW_SAMPLES,
            });
        }
        let emphasized: Vec<f64> = waveform
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if i == 0 {
                    x as f64
                } else {
                    x as f64 - PRE_EMPHASIS * waveform[i - 1] as f64
                }
            })
            .collect();

        let n = frame_count(waveform.len());
        let bins = NFFT / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        let mut log_energy = vec![0.0; NUM_FILTERS];
        let mut frames = Vec::with_capacity(n);
        for f in 0..n {
            let start = f * HOP_SAMPLES;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < WINDOW_SAMPLES {
                    Complex::new(emphasized[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr() / NFFT as f64;
            }
            for (e, filt) in log_energy.iter_mut().zip(&self.filters) {
                let s: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                *e = s.max(LOG_FLOOR).ln();
            }
            let mut row = [0f32; NUM_COEFFS];
            for (r, basis) in row.iter_mut().zip(&self.dct) {
                *r = basis.iter().zip(&log_energy).map(|(b, e)| b * e).sum::<f64>() as f32;
            }
            frames.push(row);
        }
        Ok(MfccMatrix { frames })
    }
}

/// MFCCs of a 16 kHz waveform.
pub fn compute_mfcc(waveform: &[f32], sample_rate: u32) -> Result<MfccMatrix> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::BadSampleRate(sample_rate));
    }
    MfccExtractor::new().compute(waveform)
}

/// Like [`compute_mfcc`], but linearly resamples other rates to 16 kHz
/// first.
pub fn compute_mfcc_resampled(waveform: &[f32], sample_rate: u32) -> Result<MfccMatrix> {
    if sample_rate == SAMPLE_RATE {
        return compute_mfcc(waveform, sample_rate);
    }
    if sample_rate == 0 {
        return Err(Error::BadSampleRate(0));
    }
    let out_len = (waveform.len() as u64 * SAMPLE_RATE as u64 / sample_rate as u64) as usize;
    let resampled = resample_linear(waveform, out_len);
    MfccExtractor::new().compute(&resampled)
}

fn resample_linear(x: &[f32], out_len: usize) -> Vec<f32> {
    if x.is_empty() || out_len == 0 {
        return Vec::new();
    }
    if out_len == 1 || x.len() == 1 {
        return vec![x[0]; out_len];
    }
    let scale = (x.len() - 1) as f64 / (out_len - 1) as f64;
    (0..out_len)
        .map(|j| {
            let pos = j as f64 * scale;
            let i = (pos.floor() as usize).min(x.len() - 2);
            let frac = pos - i as f64;
            (x[i] as f64 * (1.0 - frac) + x[i + 1] as f64 * frac) as f32
        })
        .collect()
}

/// Resamples the frame axis to exactly `4 * frames` rows (linear
/// interpolation, endpoints aligned). Already-aligned input is returned
/// unchanged. `fps` only documents the source rate: alignment is expressed
/// in frame counts.
pub fn align_audio_to_video(mfcc: &MfccMatrix, frames: usize, _fps: f64) -> Result<MfccMatrix> {
    if mfcc.is_empty() || frames == 0 {
        return Err(Error::EmptyInput);
    }
    let target = AUDIO_FRAMES_PER_VIDEO_FRAME * frames;
    let n = mfcc.len();
    if n == target {
        return Ok(mfcc.clone());
    }
    let rows = if n == 1 {
        vec![mfcc.frames[0]; target]
    } else {
        let scale = (n - 1) as f64 / (target - 1) as f64;
        (0..target)
            .map(|j| {
                let pos = j as f64 * scale;
                let i = (pos.floor() as usize).min(n - 2);
                let frac = pos - i as f64;
                let (a, b) = (&mfcc.frames[i], &mfcc.frames[i + 1]);
                let mut row = [0f32; NUM_COEFFS];
                for k in 0..NUM_COEFFS {
                    row[k] = (a[k] as f64 * (1.0 - frac) + b[k] as f64 * frac) as f32;
                }
                row
            })
            .collect()
    };
    Ok(MfccMatrix { frames: rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let m = compute_mfcc(&noise(16_000, 1), 16_000).unwrap();
        assert_eq!(m.len(), 98);
        assert_eq!((16_000 - 400) / 160 + 1, 98);
    }

    #[test]
    fn below_one_window_is_too_short() {
        assert!(matches!(
            compute_mfcc(&noise(399, 1), 16_000),
            Err(Error::TooShort { samples: 399, .. })
        ));
        assert_eq!(compute_mfcc(&noise(400, 1), 16_000).unwrap().len(), 1);
    }

    #[test]
    fn other_rates_need_resampling() {
        assert!(matches!(compute_mfcc(&noise(8000, 1), 8000), Err(Error::BadSampleRate(8000))));
        let m = compute_mfcc_resampled(&noise(8000, 1), 8000).unwrap();
        assert_eq!(m.len(), frame_count(16_000));
    }

    #[test]
    fn silence_gives_identical_rows() {
        let m = compute_mfcc(&vec![0.0; 4000], 16_000).unwrap();
        assert!(m.frames.iter().all(|r| r == &m.frames[0]));
        assert!(m.frames[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn one_hop_shift_shifts_rows() {
        let x = noise(8000, 3);
        let a = compute_mfcc(&x, 16_000).unwrap();
        let b = compute_mfcc(&x[HOP_SAMPLES..], 16_000).unwrap();
        assert_eq!(b.len(), a.len() - 1);
        for i in 1..b.len() {
            for k in 0..NUM_COEFFS {
                assert!((a.frames[i + 1][k] - b.frames[i][k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gain_only_moves_c0() {
        let x = noise(6000, 5);
        let scaled: Vec<f32> = x.iter().map(|v| v * 3.0).collect();
        let a = compute_mfcc(&x, 16_000).unwrap();
        let b = compute_mfcc(&scaled, 16_000).unwrap();
        for (ra, rb) in a.frames.iter().zip(&b.frames) {
            assert!((rb[0] - ra[0]) > 1.0);
            for k in 1..NUM_COEFFS {
                assert!((ra[k] - rb[k]).abs() < 1e-5, "coefficient {k}: {} vs {}", ra[k], rb[k]);
            }
        }
    }

    #[test]
    fn alignment_resamples_to_four_rows_per_frame() {
        let m = compute_mfcc(&noise(16_000, 9), 16_000).unwrap();
        let aligned = align_audio_to_video(&m, 25, 25.0).unwrap();
        assert_eq!(aligned.len(), 100);
        assert_eq!(aligned.frames[0], m.frames[0]);
        assert_eq!(aligned.frames[99], m.frames[97]);
        // Row 50 sits at source position 50 * 97 / 99.
        let pos: f64 = 50.0 * 97.0 / 99.0;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let want = m.frames[i][3] as f64 * (1.0 - frac) + m.frames[i + 1][3] as f64 * frac;
        assert!((aligned.frames[50][3] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn aligned_input_is_returned_unchanged() {
        let m = MfccMatrix {
            frames: (0..100).map(|i| [i as f32; NUM_COEFFS]).collect(),
        };
        assert_eq!(align_audio_to_video(&m, 25, 25.0).unwrap(), m);
    }

    #[test]
    fn empty_alignment_is_an_error() {
        let m = MfccMatrix { frames: vec![] };
        assert!(matches!(align_audio_to_video(&m, 25, 25.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn dump_round_trips() {
        let m = compute_mfcc(&noise(2000, 2), 16_000).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"MFCC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize, m.len());
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 13);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + m.len() * 13 * 4);
        assert_eq!(MfccMatrix::read_from(bytes.as_slice()).unwrap(), m);
    }
}
