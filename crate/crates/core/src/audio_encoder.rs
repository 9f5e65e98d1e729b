//! Thin SE-ResNet34 over aligned MFCC matrices.
//!
//! The MFCC matrix is treated as a one-channel image with frequency on the
//! height axis and time on the width axis. Time strides `(1, 1, 2, 2)`
//! reduce `4T` feature frames to `T` video frames; the frequency axis is
//! average-pooled at the end.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingSequence, Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{relu, sigmoid, BatchNorm, Conv2d, ConvGeom, Linear, Mode, Path};

/// Audio feature frames per video frame.
pub const AUDIO_FRAMES_PER_VIDEO_FRAME: usize = 4;

const FREQ_STRIDES: [usize; 4] = [1, 2, 2, 2];
const TIME_STRIDES: [usize; 4] = [1, 1, 2, 2];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub se_reduction: usize,
    pub output_dim: usize,
}

impl From<&ModelConfig> for AudioEncoderConfig {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            stage_channels: cfg.audio_channels,
            blocks_per_stage: cfg.audio_blocks,
            se_reduction: cfg.se_reduction,
            output_dim: cfg.embed_dim,
        }
    }
}

/// Squeeze-and-excitation: rescales each channel by a gate in (0, 1)
/// computed from the globally pooled input.
pub struct SeUnit {
    squeeze: Linear,
    excite: Linear,
}

impl SeUnit {
    pub fn new(p: &mut Path<'_>, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            squeeze: Linear::with_zero_bias(&mut p.pp("squeeze"), channels, hidden)?,
            excite: Linear::with_zero_bias(&mut p.pp("excite"), hidden, channels)?,
        })
    }

    /// Per-channel gates `(N, C)` for `x: (N, C, H, W)`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean((2, 3))?;
        let h = relu(&self.squeeze.forward(&pooled)?)?;
        Ok(sigmoid(&self.excite.forward(&h)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gates(x)?;
        let (n, c) = g.dims2()?;
        Ok(x.broadcast_mul(&g.reshape((n, c, 1, 1))?)?)
    }
}

struct SeBasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    se: SeUnit,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl SeBasicBlock {
    fn new(p: &mut Path<'_>, cin: usize, cout: usize, stride: (usize, usize), reduction: usize) -> Result<Self> {
        let geom = ConvGeom {
            kh: 3,
            kw: 3,
            sh: stride.0,
            sw: stride.1,
            ph: 1,
            pw: 1,
        };
        let shortcut = if cin != cout || stride != (1, 1) {
            let g = ConvGeom {
                kh: 1,
                kw: 1,
                sh: stride.0,
                sw: stride.1,
                ph: 0,
                pw: 0,
            };
            Some((
                Conv2d::new(&mut p.pp("shortcut"), cin, cout, g, false)?,
                BatchNorm::new(&mut p.pp("shortcut_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut p.pp("conv1"), cin, cout, geom, false)?,
            bn1: BatchNorm::new(&mut p.pp("bn1"), cout)?,
            conv2: Conv2d::new(&mut p.pp("conv2"), cout, cout, ConvGeom::square(3, 1), false)?,
            bn2: BatchNorm::new(&mut p.pp("bn2"), cout)?,
            se: SeUnit::new(&mut p.pp("se"), cout, reduction)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let y = self.se.forward(&y)?;
        let residual = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(relu(&(y + residual)?)?)
    }
}

pub struct AudioEncoder {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<SeBasicBlock>,
    projection: Option<Linear>,
    output_dim: usize,
}

impl AudioEncoder {
    pub fn new(p: &mut Path<'_>, cfg: &AudioEncoderConfig) -> Result<Self> {
        let c0 = cfg.stage_channels[0];
        let stem = Conv2d::new(&mut p.pp("stem"), 1, c0, ConvGeom::square(3, 1), false)?;
        let stem_bn = BatchNorm::new(&mut p.pp("stem_bn"), c0)?;
        let mut blocks = Vec::new();
        let mut cin = c0;
        for stage in 0..4 {
            let cout = cfg.stage_channels[stage];
            for b in 0..cfg.blocks_per_stage[stage] {
                let stride = if b == 0 {
                    (FREQ_STRIDES[stage], TIME_STRIDES[stage])
                } else {
                    (1, 1)
                };
                blocks.push(SeBasicBlock::new(
                    &mut p.pp(format!("layer{}.{b}", stage + 1)),
                    cin,
                    cout,
                    stride,
                    cfg.se_reduction,
                )?);
                cin = cout;
            }
        }
        let projection = if cin != cfg.output_dim {
            Some(Linear::new(&mut p.pp("projection"), cin, cfg.output_dim, true)?)
        } else {
            None
        };
        Ok(Self {
            stem,
            stem_bn,
            blocks,
            projection,
            output_dim: cfg.output_dim,
        })
    }

    /// `mfcc: (N, 4T, 13)` -> `(N, T, D)`.
    pub fn forward_batch(&self, mfcc: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, rows, coeffs) = mfcc.dims3()?;
        if rows == 0 || rows % AUDIO_FRAMES_PER_VIDEO_FRAME != 0 {
            return Err(Error::NotAligned { rows });
        }
        let t = rows / AUDIO_FRAMES_PER_VIDEO_FRAME;
        let x = mfcc.transpose(1, 2)?.contiguous()?.reshape((n, 1, coeffs, rows))?;
        let mut x = relu(&self.stem_bn.forward(&self.stem.forward(&x)?, mode)?)?;
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
        }
        debug_assert_eq!(x.dim(3)?, t);
        let pooled = x.mean(2)?.transpose(1, 2)?.contiguous()?;
        match &self.projection {
            Some(proj) => proj.forward(&pooled),
            None => Ok(pooled),
        }
    }

    /// Audio embedding of one clip from its `4T x 13` aligned feature rows.
    pub fn forward_audio(&self, aligned: &[[f32; 13]], mode: Mode, dtype: DType) -> Result<EmbeddingSequence> {
        let rows = aligned.len();
        if rows == 0 || rows % AUDIO_FRAMES_PER_VIDEO_FRAME != 0 {
            return Err(Error::NotAligned { rows });
        }
        let flat: Vec<f32> = aligned.iter().flatten().copied().collect();
        let x = Tensor::from_vec(flat, (1, rows, 13), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let out = self.forward_batch(&x, mode)?.squeeze(0)?;
        EmbeddingSequence::with_dim(out, Modality::Audio, self.output_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder(cfg: &ModelConfig) -> (ParamStore, AudioEncoder) {
        let mut store = ParamStore::new(DType::F32, cfg.seed);
        let enc = AudioEncoder::new(&mut store.root().pp("audio"), &AudioEncoderConfig::from(cfg)).unwrap();
        (store, enc)
    }

    fn mfcc(rows: usize, scale: f32, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..rows * 13).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        Tensor::from_vec(v, (1, rows, 13), &Device::Cpu).unwrap()
    }

    #[test]
    fn four_rows_per_frame() {
        let (_s, enc) = encoder(&ModelConfig::default());
        assert_eq!(enc.forward_batch(&mfcc(100, 1.0, 1), Mode::Eval).unwrap().dims(), &[1, 25, 128]);
        assert_eq!(enc.forward_batch(&mfcc(4, 1.0, 1), Mode::Eval).unwrap().dims(), &[1, 1, 128]);
        assert!(matches!(
            enc.forward_batch(&mfcc(99, 1.0, 1), Mode::Eval),
            Err(Error::NotAligned { rows: 99 })
        ));
        let rows = vec![[0.5f32; 13]; 8];
        let seq = enc.forward_audio(&rows, Mode::Eval, DType::F32).unwrap();
        assert_eq!((seq.len(), seq.dim()), (2, 128));
    }

    fn se() -> SeUnit {
        let mut store = ParamStore::new(DType::F32, 5);
        SeUnit::new(&mut store.root().pp("se"), 32, 16).unwrap()
    }

    #[test]
    fn zero_input_gates_are_one_half() {
        let se = se();
        let x = Tensor::zeros((2, 32, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let g = se.gates(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|&v| v == 0.5));
        let y = se.forward(&x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let se = se();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f32> = (0..2 * 32 * 9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = Tensor::from_vec(v, (2, 32, 3, 3), &Device::Cpu).unwrap();
        let g = se.gates(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
        // Not homogeneous: doubling the input does not double the output.
        let y1 = se.forward(&x).unwrap();
        let y2 = se.forward(&(&x * 2.0).unwrap()).unwrap();
        let gap = (y2 - (y1 * 2.0).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(gap > 1e-6, "{gap}");
    }

    #[test]
    fn large_inputs_stay_finite() {
        let (_s, enc) = encoder(&ModelConfig::tiny());
        for mode in [Mode::Train, Mode::Eval] {
            let out = enc.forward_batch(&mfcc(32, 1e3, 2), mode).unwrap();
            let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let x = mfcc(16, 1.0, 3);
        let run = || {
            let (_s, enc) = encoder(&ModelConfig::tiny());
            enc.forward_batch(&x, Mode::Train).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn parameter_budget() {
        let (store, _) = encoder(&ModelConfig::default());
        let n = store.num_params();
        assert!((850_000..=1_350_000).contains(&n), "{n}");
    }
}
