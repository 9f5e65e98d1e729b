use std::sync::Arc;

use candle_core::{DType, Tensor, Var};

use super::norm::batch_norm;
use super::ops::{conv2d, temporal_conv, ConvGeom};
use super::store::{Init, Path};
use crate::error::Result;

/// Whether normalisation layers use batch statistics (and update their
/// running averages) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 2D convolution over `(N, C, H, W)`.
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
}

impl Conv2d {
    pub fn new(p: &mut Path<'_>, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Result<Self> {
        let fan_in = cin * geom.kh * geom.kw;
        let weight = p.param("weight", &[cout, cin, geom.kh, geom.kw], Init::He { fan_in })?;
        let bias = if bias {
            Some(p.param("bias", &[cout], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.geom)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// 1D convolution along time for per-frame feature maps.
///
/// Input and output are `(N*T, C, H, W)`; the kernel spans `k` neighbouring
/// frames of the same clip with zero padding `k / 2`, so `T` is preserved.
pub struct TemporalConv {
    weight: Var,
}

impl TemporalConv {
    pub fn new(p: &mut Path<'_>, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let weight = p.param("weight", &[cout, cin, k, 1], Init::He { fan_in: cin * k })?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor, clips: usize) -> Result<Tensor> {
        Ok(temporal_conv(x, self.weight.as_tensor(), clips)?)
    }
}

/// Per-channel normalisation over every axis except axis 1.
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(p: &mut Path<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.param("gamma", &[channels], Init::Const(1.0))?,
            beta: p.param("beta", &[channels], Init::Const(0.0))?,
            running_mean: p.buffer("running_mean", &[channels], 0.0)?,
            running_var: p.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let fixed = match mode {
            Mode::Train => None,
            Mode::Eval => Some(Arc::new((
                self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
                self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
            ))),
        };
        let (y, (mean, var)) = batch_norm(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps, fixed)?;
        if mode == Mode::Train {
            let count = x.elem_count() / x.dim(1)?;
            let unbiased = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let m = self.momentum;
            let dev = x.device();
            let dtype = self.running_mean.dtype();
            let blend = |run: &Var, batch: Vec<f64>, k: f64| -> Result<()> {
                let old = run.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
                let new: Vec<f64> = old.iter().zip(&batch).map(|(o, b)| (1.0 - m) * o + m * k * b).collect();
                run.set(&Tensor::from_vec(new, batch.len(), dev)?.to_dtype(dtype)?)?;
                Ok(())
            };
            blend(&self.running_mean, mean, 1.0)?;
            blend(&self.running_var, var, unbiased)?;
        }
        Ok(y)
    }
}

/// Affine map over the last axis.
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(p: &mut Path<'_>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = p.param("weight", &[dout, din], Init::Uniform { bound })?;
        let bias = if bias {
            Some(p.param("bias", &[dout], Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Like [`Linear::new`] but with zero bias, for gates that must start at a
    /// known operating point.
    pub fn with_zero_bias(p: &mut Path<'_>, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = p.param("weight", &[dout, din], Init::Uniform { bound })?;
        let bias = Some(p.param("bias", &[dout], Init::Const(0.0))?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().expect("linear input has rank >= 1");
        let rows = x.elem_count() / din;
        let y = x.reshape((rows, din))?.matmul(&self.weight.as_tensor().t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}
