//! Dual-input visual encoder: face and body streams built from factorised
//! 2D (spatial) + 1D (temporal) convolutions with parallel 3- and 5-wide
//! kernels, fused face-into-body early and body-into-face late.

use candle_core::{DType, Tensor};

use crate::domain::{EmbeddingSequence, FrameStack, Modality, ModelConfig, VisualInputs};
use crate::error::{Error, Result};
use crate::nn::{relu, BatchNorm, Conv2d, ConvGeom, Linear, Mode, Path, TemporalConv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualPathBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_stride: usize,
    pub kernels: (usize, usize),
}

struct FactorisedPath {
    spatial: Conv2d,
    spatial_bn: BatchNorm,
    temporal: TemporalConv,
    temporal_bn: BatchNorm,
}

impl FactorisedPath {
    fn new(p: &mut Path<'_>, spec: &DualPathBlockSpec, k: usize) -> Result<Self> {
        Ok(Self {
            spatial: Conv2d::new(
                &mut p.pp("spatial"),
                spec.in_channels,
                spec.out_channels,
                ConvGeom::square(k, spec.spatial_stride),
                false,
            )?,
            spatial_bn: BatchNorm::new(&mut p.pp("spatial_bn"), spec.out_channels)?,
            temporal: TemporalConv::new(&mut p.pp("temporal"), spec.out_channels, spec.out_channels, k)?,
            temporal_bn: BatchNorm::new(&mut p.pp("temporal_bn"), spec.out_channels)?,
        })
    }

    fn forward(&self, x: &Tensor, clips: usize, mode: Mode) -> Result<Tensor> {
        let y = relu(&self.spatial_bn.forward(&self.spatial.forward(x)?, mode)?)?;
        self.temporal_bn.forward(&self.temporal.forward(&y, clips)?, mode)
    }
}

/// Two factorised paths (kernel 3 and kernel 5) summed, then rectified.
pub struct DualPathBlock {
    spec: DualPathBlockSpec,
    narrow: FactorisedPath,
    wide: FactorisedPath,
}

impl DualPathBlock {
    pub fn new(p: &mut Path<'_>, spec: DualPathBlockSpec) -> Result<Self> {
        Ok(Self {
            narrow: FactorisedPath::new(&mut p.pp(format!("k{}", spec.kernels.0)), &spec, spec.kernels.0)?,
            wide: FactorisedPath::new(&mut p.pp(format!("k{}", spec.kernels.1)), &spec, spec.kernels.1)?,
            spec,
        })
    }

    pub fn spec(&self) -> &DualPathBlockSpec {
        &self.spec
    }

    /// Sum of both paths before the final rectification.
    pub fn forward_linear(&self, x: &Tensor, clips: usize, mode: Mode) -> Result<Tensor> {
        let (nt, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "block expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if clips == 0 || nt % clips != 0 {
            return Err(Error::ShapeMismatch(format!("{nt} frames cannot be split into {clips} clips")));
        }
        Ok((self.narrow.forward(x, clips, mode)? + self.wide.forward(x, clips, mode)?)?)
    }

    /// `x: (N*T, C, H, W)` -> `(N*T, C', H/stride, W/stride)`.
    pub fn forward(&self, x: &Tensor, clips: usize, mode: Mode) -> Result<Tensor> {
        Ok(relu(&self.forward_linear(x, clips, mode)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionDirection {
    FaceToBody,
    BodyToFace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionSpec {
    /// Fusion happens after this stage (1-based).
    pub stage_index: usize,
    pub direction: FusionDirection,
    pub src_channels: usize,
    pub dst_channels: usize,
}

/// `dst + P(src)` with `P` a bias-free 1x1 channel map (identity when the
/// channel counts agree).
pub struct Fusion {
    spec: FusionSpec,
    projection: Option<Conv2d>,
}

impl Fusion {
    pub fn new(p: &mut Path<'_>, spec: FusionSpec) -> Result<Self> {
        let projection = if spec.src_channels == spec.dst_channels {
            None
        } else {
            Some(Conv2d::new(
                &mut p.pp("projection"),
                spec.src_channels,
                spec.dst_channels,
                ConvGeom::square(1, 1),
                false,
            )?)
        };
        Ok(Self { spec, projection })
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    pub fn fuse(&self, dst: &Tensor, src: &Tensor) -> Result<Tensor> {
        let (dn, dc, dh, dw) = dst.dims4()?;
        let (sn, sc, sh, sw) = src.dims4()?;
        if (dn, dh, dw) != (sn, sh, sw) || dc != self.spec.dst_channels || sc != self.spec.src_channels {
            return Err(Error::ShapeMismatch(format!(
                "fusion {:?}: dst {:?}, src {:?}",
                self.spec,
                dst.dims(),
                src.dims()
            )));
        }
        let projected = match &self.projection {
            Some(conv) => conv.forward(src)?,
            None => src.clone(),
        };
        Ok((dst + projected)?)
    }
}

struct Stem {
    conv: Conv2d,
    bn: BatchNorm,
}

impl Stem {
    fn new(p: &mut Path<'_>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut p.pp("conv"), cin, cout, ConvGeom::square(3, 2), false)?,
            bn: BatchNorm::new(&mut p.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(relu(&self.bn.forward(&self.conv.forward(x)?, mode)?)?)
    }
}

struct Stream {
    stem: Stem,
    stages: Vec<DualPathBlock>,
}

impl Stream {
    fn new(p: &mut Path<'_>, cfg: &ModelConfig) -> Result<Self> {
        let stem = Stem::new(&mut p.pp("stem"), cfg.color.channels(), cfg.visual_stem)?;
        let mut stages = Vec::with_capacity(3);
        let mut cin = cfg.visual_stem;
        for (i, &cout) in cfg.visual_channels.iter().enumerate() {
            let spec = DualPathBlockSpec {
                in_channels: cin,
                out_channels: cout,
                spatial_stride: 2,
                kernels: cfg.kernel_pair,
            };
            stages.push(DualPathBlock::new(&mut p.pp(format!("stage{}", i + 1)), spec)?);
            cin = cout;
        }
        Ok(Self { stem, stages })
    }
}

pub struct VisualEncoder {
    face: Stream,
    body: Option<Stream>,
    fusions: Vec<Fusion>,
    head: Linear,
    frame_size: usize,
    channels: usize,
    embed_dim: usize,
}

impl VisualEncoder {
    pub fn new(p: &mut Path<'_>, cfg: &ModelConfig) -> Result<Self> {
        let face = Stream::new(&mut p.pp("face"), cfg)?;
        let (body, fusions) = match cfg.visual_inputs {
            VisualInputs::FaceOnly => (None, Vec::new()),
            VisualInputs::FaceAndBody => {
                let body = Stream::new(&mut p.pp("body"), cfg)?;
                let c = cfg.visual_channels;
                let specs = [
                    FusionSpec {
                        stage_index: 1,
                        direction: FusionDirection::FaceToBody,
                        src_channels: c[0],
                        dst_channels: c[0],
                    },
                    FusionSpec {
                        stage_index: 2,
                        direction: FusionDirection::FaceToBody,
                        src_channels: c[1],
                        dst_channels: c[1],
                    },
                    FusionSpec {
                        stage_index: 3,
                        direction: FusionDirection::BodyToFace,
                        src_channels: c[2],
                        dst_channels: c[2],
                    },
                ];
                let mut fusions = Vec::new();
                for spec in specs {
                    fusions.push(Fusion::new(&mut p.pp(format!("fusion{}", spec.stage_index)), spec)?);
                }
                (Some(body), fusions)
            }
        };
        let head = Linear::new(&mut p.pp("head"), cfg.visual_channels[2], cfg.embed_dim, true)?;
        Ok(Self {
            face,
            body,
            fusions,
            head,
            frame_size: cfg.frame_size,
            channels: cfg.color.channels(),
            embed_dim: cfg.embed_dim,
        })
    }

    pub fn has_body(&self) -> bool {
        self.body.is_some()
    }

    pub fn fusions(&self) -> &[Fusion] {
        &self.fusions
    }

    fn check_input(&self, x: &Tensor, what: &str) -> Result<(usize, usize)> {
        let dims = x.dims();
        if dims.len() != 5 || dims[2] != self.channels || dims[3] != self.frame_size || dims[4] != self.frame_size {
            return Err(Error::ShapeMismatch(format!(
                "{what} input {dims:?}, expected (N, T, {}, {}, {})",
                self.channels, self.frame_size, self.frame_size
            )));
        }
        if dims[0] == 0 || dims[1] == 0 {
            return Err(Error::ShapeMismatch(format!("{what} input {dims:?} is empty")));
        }
        Ok((dims[0], dims[1]))
    }

    /// `face, body: (N, T, C, H, W)` -> `(N, T, D)`.
    pub fn forward_batch(&self, face: &Tensor, body: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let (n, t) = self.check_input(face, "face")?;
        let flat = |x: &Tensor| x.reshape((n * t, self.channels, self.frame_size, self.frame_size));
        let mut f = self.face.stem.forward(&flat(face)?, mode)?;
        let mut b = match (&self.body, body) {
            (Some(stream), Some(body)) => {
                if self.check_input(body, "body")? != (n, t) {
                    return Err(Error::ShapeMismatch(format!(
                        "face {:?} vs body {:?}",
                        face.dims(),
                        body.dims()
                    )));
                }
                Some(stream.stem.forward(&flat(body)?, mode)?)
            }
            (Some(_), None) => return Err(Error::ShapeMismatch("encoder expects a body stream".into())),
            (None, _) => None,
        };
        for (i, stage) in self.face.stages.iter().enumerate() {
            f = stage.forward(&f, n, mode)?;
            if let (Some(stream), Some(bx)) = (&self.body, b.as_ref()) {
                let mut bx = stream.stages[i].forward(bx, n, mode)?;
                for fusion in self.fusions.iter().filter(|fu| fu.spec.stage_index == i + 1) {
                    match fusion.spec.direction {
                        FusionDirection::FaceToBody => bx = fusion.fuse(&bx, &f)?,
                        FusionDirection::BodyToFace => f = fusion.fuse(&f, &bx)?,
                    }
                }
                b = Some(bx);
            }
        }
        let pooled = f.mean((2, 3))?;
        let c = pooled.dim(1)?;
        self.head.forward(&pooled.reshape((n, t, c))?)
    }

    /// Fused visual embedding of one clip.
    pub fn forward_visual(&self, face: &FrameStack, body: &FrameStack, mode: Mode, dtype: DType) -> Result<EmbeddingSequence> {
        let face_t = frames_to_tensor(face, dtype)?.unsqueeze(0)?;
        let body_t = frames_to_tensor(body, dtype)?.unsqueeze(0)?;
        let out = self.forward_batch(&face_t, self.body.as_ref().map(|_| &body_t), mode)?;
        EmbeddingSequence::with_dim(out.squeeze(0)?, Modality::Visual, self.embed_dim)
    }
}

/// `(T, C, H, W)` tensor view of a frame stack.
pub fn frames_to_tensor(stack: &FrameStack, dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_slice(
        stack.as_slice(),
        (stack.len(), stack.channels(), stack.size(), stack.size()),
        &candle_core::Device::Cpu,
    )?;
    Ok(t.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            frame_size: 32,
            ..ModelConfig::tiny()
        }
    }

    fn encoder(cfg: &ModelConfig, dtype: DType) -> (ParamStore, VisualEncoder) {
        let mut store = ParamStore::new(dtype, cfg.seed);
        let enc = VisualEncoder::new(&mut store.root().pp("visual"), cfg).unwrap();
        (store, enc)
    }

    fn block(spec: DualPathBlockSpec) -> (ParamStore, DualPathBlock) {
        let mut store = ParamStore::new(DType::F32, 3);
        let b = DualPathBlock::new(&mut store.root().pp("block"), spec).unwrap();
        (store, b)
    }

    const STEM_BLOCK: DualPathBlockSpec = DualPathBlockSpec {
        in_channels: 1,
        out_channels: 32,
        spatial_stride: 2,
        kernels: (3, 5),
    };

    #[test]
    fn block_halves_spatial_size() {
        let (_s, b) = block(STEM_BLOCK);
        let x = random(&[25, 1, 112, 112], 1, DType::F32);
        assert_eq!(b.forward(&x, 1, Mode::Train).unwrap().dims(), &[25, 32, 56, 56]);
    }

    #[test]
    fn zero_input_gives_zero_before_rectification() {
        let (_s, b) = block(DualPathBlockSpec {
            in_channels: 4,
            out_channels: 8,
            ..STEM_BLOCK
        });
        let x = Tensor::zeros((6, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = b.forward_linear(&x, 2, mode).unwrap();
            assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn block_rejects_wrong_channels() {
        let (_s, b) = block(STEM_BLOCK);
        let x = random(&[2, 3, 16, 16], 1, DType::F32);
        assert!(matches!(b.forward(&x, 1, Mode::Train), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fusion_identities() {
        let mut store = ParamStore::new(DType::F32, 0);
        let same = FusionSpec {
            stage_index: 1,
            direction: FusionDirection::FaceToBody,
            src_channels: 8,
            dst_channels: 8,
        };
        let widen = FusionSpec {
            src_channels: 32,
            dst_channels: 64,
            ..same
        };
        let f_same = Fusion::new(&mut store.root().pp("a"), same).unwrap();
        let f_widen = Fusion::new(&mut store.root().pp("b"), widen).unwrap();
        let dst = random(&[2, 8, 4, 4], 1, DType::F32);
        let src = random(&[2, 8, 4, 4], 2, DType::F32);
        let zeros = Tensor::zeros((2, 8, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let diff = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff(&f_same.fuse(&dst, &zeros).unwrap(), &dst), 0.0);
        assert_eq!(diff(&f_same.fuse(&zeros, &src).unwrap(), &src), 0.0);

        let src32 = random(&[2, 32, 4, 4], 3, DType::F32);
        let dst64 = random(&[2, 64, 4, 4], 4, DType::F32);
        assert_eq!(f_widen.fuse(&dst64, &src32).unwrap().dims(), &[2, 64, 4, 4]);
        let zeros32 = Tensor::zeros((2, 32, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(diff(&f_widen.fuse(&dst64, &zeros32).unwrap(), &dst64), 0.0);
        assert!(matches!(f_widen.fuse(&dst64, &src), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn embedding_shapes() {
        let cfg = ModelConfig::default();
        let (_s, enc) = encoder(&cfg, DType::F32);
        let face = random(&[1, 25, 1, 112, 112], 1, DType::F32);
        let body = random(&[1, 25, 1, 112, 112], 2, DType::F32);
        assert_eq!(enc.forward_batch(&face, Some(&body), Mode::Eval).unwrap().dims(), &[1, 25, 128]);
        let one = face.narrow(1, 0, 1).unwrap();
        let out = enc.forward_batch(&one, Some(&one), Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[1, 1, 128]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = small_config();
        let face = random(&[2, 5, 1, 32, 32], 1, DType::F32);
        let body = random(&[2, 5, 1, 32, 32], 2, DType::F32);
        let run = || {
            let (_s, enc) = encoder(&cfg, DType::F32);
            enc.forward_batch(&face, Some(&body), Mode::Train)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn temporal_receptive_field_is_six_frames() {
        let cfg = small_config();
        let (_s, enc) = encoder(&cfg, DType::F64);
        let t = 25;
        let face = random(&[1, t, 1, 32, 32], 1, DType::F64);
        let body = random(&[1, t, 1, 32, 32], 2, DType::F64);
        let base = enc.forward_batch(&face, Some(&body), Mode::Eval).unwrap();
        let changed = 12;
        let mut v = face.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let frame = 32 * 32;
        for x in &mut v[changed * frame..(changed + 1) * frame] {
            *x = 1.0 - *x;
        }
        let face2 = Tensor::from_vec(v, (1, t, 1, 32, 32), &Device::Cpu).unwrap();
        let moved = enc.forward_batch(&face2, Some(&body), Mode::Eval).unwrap();
        let per_frame = (moved - base).unwrap().abs().unwrap().max(2).unwrap().squeeze(0).unwrap();
        let d = per_frame.to_vec1::<f64>().unwrap();
        for (i, &di) in d.iter().enumerate() {
            let dist = i.abs_diff(changed);
            if dist <= 6 {
                assert!(di > 0.0, "frame {i} should see the change");
            } else {
                assert_eq!(di, 0.0, "frame {i} is outside the receptive field");
            }
        }
    }

    #[test]
    fn gradients_reach_face_and_body() {
        let cfg = small_config();
        let (_s, enc) = encoder(&cfg, DType::F32);
        let face = Var::from_tensor(&random(&[1, 4, 1, 32, 32], 1, DType::F32)).unwrap();
        let body = Var::from_tensor(&random(&[1, 4, 1, 32, 32], 2, DType::F32)).unwrap();
        let out = enc.forward_batch(face.as_tensor(), Some(body.as_tensor()), Mode::Train).unwrap();
        let loss = out.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for v in [&face, &body] {
            let g = grads.get(v.as_tensor()).expect("gradient");
            assert!(g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
        }
    }

    #[test]
    fn face_only_ignores_body() {
        let cfg = ModelConfig {
            visual_inputs: VisualInputs::FaceOnly,
            ..small_config()
        };
        let (store, enc) = encoder(&cfg, DType::F32);
        assert!(!enc.has_body());
        assert!(enc.fusions().is_empty());
        assert!(store.params().keys().all(|k| !k.contains("body")));
        let face = random(&[1, 3, 1, 32, 32], 1, DType::F32);
        assert_eq!(enc.forward_batch(&face, None, Mode::Eval).unwrap().dims(), &[1, 3, 16]);
    }

    #[test]
    fn fusion_layout() {
        let (_s, enc) = encoder(&ModelConfig::default(), DType::F32);
        let layout: Vec<(usize, FusionDirection)> = enc.fusions().iter().map(|f| (f.spec().stage_index, f.spec().direction)).collect();
        assert_eq!(
            layout,
            vec![
                (1, FusionDirection::FaceToBody),
                (2, FusionDirection::FaceToBody),
                (3, FusionDirection::BodyToFace)
            ]
        );
    }

    #[test]
    fn parameter_budget() {
        let (store, _) = encoder(&ModelConfig::default(), DType::F32);
        let n = store.num_params();
        assert!((600_000..=1_400_000).contains(&n), "{n}");
    }
}
